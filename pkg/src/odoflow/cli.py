"""Command-line entry point: gen-data, train, eval, infer, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import geometry as G
from . import metrics as MT
from . import train as TR


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise SystemExit(f"error: no such file: {path}")
    except json.JSONDecodeError as exc:
        raise SystemExit(f"error: {path} is not valid JSON: {exc}")


def _read_cloud(path):
    path = Path(path)
    if path.suffix == ".bin":
        return D.load_kitti_bin(path)
    if path.suffix == ".ply":
        return G.read_ply(path)[0]
    if path.suffix == ".npy":
        return np.load(path)
    raise SystemExit(f"error: unsupported point cloud format {path.suffix!r} (use .bin, .ply or .npy)")


def cmd_gen_data(args):
    spec = _read_json(args.recipe) if args.recipe else {}
    n = int(spec.pop("n_scenes", args.n))
    recipe = D.SceneRecipe(**spec)
    pairs = D.make_synthetic_dataset(recipe, n)
    manifest = D.save_dataset(args.out, pairs, meta={"recipe": recipe.to_dict()})
    print(f"wrote {n} pairs to {manifest}")


def cmd_train(args):
    cfg_dict = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    cfg = TR.TrainConfig.from_dict(cfg_dict)
    pairs = D.load_dataset(args.data)
    val = D.load_dataset(args.val) if args.val else None
    out = Path(args.out)
    ckpt, history = TR.train(pairs, cfg, val_pairs=val, checkpoint_dir=args.stage_dir)
    TR.save_checkpoint(out, ckpt)
    log_path = out.with_suffix(".log.json")
    log_path.write_text(json.dumps(history, indent=1))
    print(f"saved checkpoint {out} after {ckpt.iteration} iterations; log in {log_path}")


def cmd_eval(args):
    ckpt = TR.load_checkpoint(args.ckpt)
    pairs = D.load_dataset(args.data)
    res = TR.evaluate(ckpt, pairs)
    text = MT.to_json(res, args.json)
    if "flow" in res:
        print(MT.format_table({Path(args.ckpt).stem: res["flow"]}))
    print(text)


def cmd_infer(args):
    ckpt = TR.load_checkpoint(args.ckpt)
    cfg = TR.TrainConfig.from_dict(ckpt.config)
    n = cfg.net_config().pyramid.n_input
    P = _read_cloud(args.p)
    Q = _read_cloud(args.q)
    if args.z_thresh is not None:
        P, Q = D.remove_ground(P, args.z_thresh), D.remove_ground(Q, args.z_thresh)
    if len(P) != n:
        P = D.sample_to_n(P, n, seed=cfg.seed)
    pair = D.FramePair(P, D.sample_to_n(Q, n, seed=cfg.seed + 1), name=Path(args.p).stem)
    res = TR.infer(ckpt, pair, args.out)
    print(f"wrote {res['ply']} and {res['json']}")


def cmd_gradcheck(args):
    from . import gradcheck as GC

    results = GC.run(args.module or None)
    failed = [k for k, v in results.items() if not v[3]]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser():
    p = argparse.ArgumentParser(prog="odoflow", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic labelled dataset")
    g.add_argument("--recipe", help="JSON with SceneRecipe fields and optional n_scenes")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=8, help="number of scenes if the recipe has no n_scenes")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="staged training")
    t.add_argument("--config", help="JSON mirroring TrainConfig")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path (.npz)")
    t.add_argument("--val", help="held-out dataset evaluated every eval_every epochs")
    t.add_argument("--stage-dir", help="also save a checkpoint at each stage boundary")
    t.add_argument("--seed", type=int)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--json", help="write metrics JSON here")
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="predict flow and pose for one pair")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--p", required=True)
    i.add_argument("--q", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--z-thresh", type=float, help="remove points below this height first")
    i.set_defaults(fn=cmd_infer)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--module", action="append",
                   help="restrict to a module (repeatable): tensor_core, geometry, encoder, costvolume, "
                        "init_heads, refinement, losses, end_to_end")
    c.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        code = args.fn(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
