"""Train desk-scale affine runs, probe q(t) and correlate T_cross with mp.

Usage: python3 scripts/affine_crossings.py [--out runs/affine] [--seeds 0 1 2] [--T-max 1024]
"""

import argparse
import json
import time
from pathlib import Path

from statetrack import diagnostics as dg
from statetrack.groups import build_group
from statetrack.training import TrainConfig, train_curriculum

# affine (preset, group) cells that extrapolate past L_max at desk scale
CELLS = [
    ("negative_mamba", "C2"),
    ("token_gated_rnn", "C2"),
    ("simple_aussm", "C2"),
    ("simple_aussm", "C3"),
    ("aussm", "C2"),
]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/affine")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--T-max", type=int, default=1024)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--epochs", type=int, default=300)
    args = ap.parse_args()
    entries = []
    for model, gname in CELLS:
        for seed in args.seeds:
            t0 = time.perf_counter()
            cfg = TrainConfig.desk(model=model, group=gname, lr=args.lr, max_total_epochs=args.epochs)
            rec, stack = train_curriculum(cfg, seed)
            sep = dg.probe_separation(stack, build_group(gname), n=200, T_max=args.T_max, seed=seed)
            tc = dg.crossing_time(sep.steps, sep.q_readout)
            name = f"{model}-{gname}-s{seed}"
            entries.append(dg.CrossingEntry(name, sep.steps, sep.q_readout, rec.mp, cfg.L_max + 1))
            print(f"{name:28s} {rec.status:9s} mp={rec.mp:4d} t_cross={tc} ({time.perf_counter() - t0:.0f}s)", flush=True)
    report = dg.analyze_crossings(entries)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "crossings.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"pairs={report.n_pairs} r={report.pearson_r} {report.notice}")


if __name__ == "__main__":
    main()
