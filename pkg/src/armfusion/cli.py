"""Command-line entry point: generate, train, eval, compare, check-tables."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .dataset import save_dataset
from .experiment import ExperimentConfig, evaluate_bundle, run_comparison, train_stages
from .io import save_features
from .metrics import check_table_consistency, read_table_csv
from .synthetic import SyntheticConfig, generate_synthetic
from .visual import pooled_frame_features

log = logging.getLogger("armfusion")


def cmd_generate(args) -> int:
    cfg = SyntheticConfig(n_traj=args.n_traj, steps_per_traj=args.steps, image_size=args.image_size,
                          seed=args.seed)
    trajs = generate_synthetic(cfg)
    manifest = save_dataset(trajs, args.out)
    print(f"wrote {len(trajs)} trajectories to {manifest}")
    if args.features_pool:
        path = Path(args.out) / "features.dmlf"
        save_features(path, pooled_frame_features(trajs, cfg.window_size, args.features_pool))
        print(f"wrote pooled frame features to {path}")
    return 0


def cmd_train(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    result = train_stages(cfg, args.stage, args.out)
    if "bundle" in result:
        print(f"bundle written to {result['bundle']}")
    else:
        print(f"stage {args.stage} written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    res = evaluate_bundle(args.bundle, args.data, args.split)
    doc = {"split": args.split, **{k: v.to_dict() for k, v in res.items()}}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.json:
        Path(args.json).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_compare(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    res = run_comparison(cfg, args.out)
    sys.stdout.write(res.text)
    if not res.ok:
        failed = [c.label for c in res.cells if c.status != "ok"]
        print(f"failed cells: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_check_tables(args) -> int:
    rows = check_table_consistency(read_table_csv(args.csv), args.tol)
    width = max(len(r.label) for r in rows) if rows else 5
    for r in rows:
        mark = "FLAG" if r.flagged else "ok"
        print(f"{r.label.ljust(width)}  mse={r.mse:<8g} rmse={r.rmse:<8g} sqrt(mse)={r.mse ** 0.5:.5f}  "
              f"dev={100 * r.deviation:5.2f}%  {mark}")
    flagged = sum(r.flagged for r in rows)
    print(f"{flagged} of {len(rows)} rows flagged at {100 * args.tol:g}% tolerance")
    return 1 if flagged else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="armfusion", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic planar-arm dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-traj", type=int, default=200)
    g.add_argument("--steps", type=int, default=50)
    g.add_argument("--image-size", type=int, default=32)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--features-pool", type=int, default=0,
                   help="also write features.dmlf with frames average-pooled by this factor")
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train pipeline stages into a bundle directory")
    t.add_argument("--config", required=True)
    t.add_argument("--stage", choices=("visual", "state", "fusion", "all"), default="all")
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a bundle on a dataset split")
    e.add_argument("--bundle", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--json")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("compare", help="run the backend x regressor grid and write report.json/report.txt")
    c.add_argument("--config", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_compare)

    k = sub.add_parser("check-tables", help="audit published (mse, rmse) pairs for consistency")
    k.add_argument("--csv", required=True)
    k.add_argument("--tol", type=float, default=0.05)
    k.set_defaults(fn=cmd_check_tables)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
