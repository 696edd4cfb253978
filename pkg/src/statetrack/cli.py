"""Command-line entry point: ``statetrack {train,grid,probe,analyze,verify,figures}``.

Exit codes: 0 success, 1 validation error, 2 numeric failure, 3 failed check.
"""

from __future__ import annotations

import argparse
import csv
import glob
import io
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from . import theory as th
from .config import EXAMPLE, ExperimentConfig, load_config, parse_config
from .errors import ConfigError, NumericError, ResourceError
from .groups import build_group, enumerate_return_words
from .network import load_checkpoint
from .reporting import (
    RunManifest, crossing_plot, perturbation_plot, read_tidy, render_svg, separation_plots, subspace_plot, write_json, write_text,
)
from .training import grid_cells, load_run, run_grid, save_run, train_curriculum

OUT_ENV = "STATETRACK_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3
VERIFY_SUITES = ("neutrality", "transport", "parity", "budget", "diffusion", "margins")


def _out_root(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / default_name


def _experiment(args) -> ExperimentConfig:
    if args.config:
        return load_config(args.config, profile=args.profile, seed=args.seed)
    return parse_config("", profile=args.profile, seed=args.seed)


def _timing(root: Path, started: float) -> None:
    stamp = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())
    write_text(root / "timing.txt", f"finished_utc {stamp}\nwall_time_s {time.perf_counter() - started:.3f}\n")


def _say(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------- train / grid


def cmd_train(args) -> int:
    started = time.perf_counter()
    exp = _experiment(args)
    cfg = exp.train
    root = _out_root(args, f"train-{cfg.hash(exp.seed)}")
    log = _say if args.verbose else None
    record, stack = train_curriculum(cfg, exp.seed, log=log)
    record.notes["group"] = cfg.group
    paths = save_run(root, record, stack)
    write_json(root / "config.json", exp.to_dict())
    arts = [str(p.relative_to(root)) for p in paths] + ["config.json"]
    RunManifest("train", exp.to_dict(), [exp.seed], arts).write(root)
    _timing(root, started)
    _say(f"{cfg.model} on {cfg.group}: status={record.status} mp={record.mp} final_acc={record.final_test_acc:.4f} -> {root}")
    return EXIT_OK


def cmd_grid(args) -> int:
    started = time.perf_counter()
    exp = _experiment(args)
    g = exp.grid
    cells = grid_cells(exp.train, g.d_state, g.lr, g.scheduler, g.seeds)
    root = _out_root(args, f"grid-{exp.train.hash(exp.seed)}")
    result = run_grid(cells, jobs=args.jobs, out_dir=root)
    write_json(root / "grid.json", result.to_dict())
    write_json(root / "config.json", exp.to_dict())
    arts = ["grid.json", "config.json"] + sorted(
        str(p.relative_to(root)) for p in root.glob("cell-*/*") if p.is_file() and p.name != "timing.txt"
    )
    RunManifest("grid", exp.to_dict(), list(g.seeds), arts).write(root)
    _timing(root, started)
    b = result.best
    _say(f"grid of {len(cells)} cells: best mp={b.mp} acc={b.final_test_acc:.4f} (seed {b.seed}, d_state {b.config['d_state']}, lr {b.config['lr']}) -> {root}")
    return EXIT_OK


# ---------------------------------------------------------------- probe


def _resolve_run(path: Path):
    """Accept a run directory (with record.json) or a bare checkpoint directory."""
    ck = path / "checkpoint" if (path / "checkpoint" / "manifest.json").is_file() else path
    if not (ck / "manifest.json").is_file():
        raise FileNotFoundError(f"no checkpoint under {path}")
    stack, manifest = load_checkpoint(ck)
    record = load_run(path) if (path / "record.json").is_file() else None
    return stack, manifest, record


def cmd_probe(args) -> int:
    started = time.perf_counter()
    exp = _experiment(args)
    p = exp.probe
    missing = [c for c in args.checkpoint if not Path(c).exists()]
    if missing:
        raise FileNotFoundError("missing checkpoints: " + ", ".join(missing))
    which = args.which or ["perturb", "separation", "subspace", "gain"]
    for ckpt in args.checkpoint:
        src = Path(ckpt)
        stack, manifest, record = _resolve_run(src)
        group_name = (manifest.get("extra") or {}).get("group") or (record.config["group"] if record else exp.train.group)
        group = build_group(group_name)
        root = Path(args.out) / src.name if args.out and len(args.checkpoint) > 1 else Path(args.out) if args.out else src / "probe"
        summary = {"checkpoint": str(src), "group": group_name, "seed": exp.seed}
        if record is not None:
            summary["mp"] = record.mp
            summary["L_max"] = record.config["L_max"]
        arts = []
        if "perturb" in which:
            tr = dg.probe_perturbation(stack, group, p.n, p.T, p.t0, p.sigma, seed=exp.seed)
            write_text(root / "perturbation.csv", tr.to_csv())
            summary["perturbation"] = tr.summary()
            arts.append("perturbation.csv")
        sep = None
        if "separation" in which or "subspace" in which:
            sep = dg.probe_separation(stack, group, p.n, p.T_max, p.min_count, seed=exp.seed)
        if "separation" in which:
            write_text(root / "separation.csv", sep.to_csv())
            tc = dg.crossing_time(sep.steps, sep.q_readout, p.tau)
            summary["separation"] = {"T_max": p.T_max, "n": p.n, "t_cross": dg.NEVER if tc is None else tc,
                                     "flagged_steps": int(sep.flagged.sum()), "collapsed_steps": int(sep.collapse.sum())}
            arts.append("separation.csv")
        if "subspace" in which:
            sub = dg.probe_subspace(sep)
            write_text(root / "subspace.csv", sub.to_csv())
            summary["subspace"] = {"pythagoras_residual": sub.pythagoras_residual(), "flagged_steps": int(sub.flagged.sum())}
            arts.append("subspace.csv")
        if "gain" in which:
            gr = dg.return_word_gain(stack, group, p.max_word_len, seed=exp.seed)
            write_text(root / "gain.csv", gr.to_csv())
            summary["gain"] = {"median": gr.median, "n_words": len(gr.words), "linearized": gr.linearized}
            arts.append("gain.csv")
        write_json(root / "probe.json", _finite(summary))
        RunManifest("probe", exp.to_dict(), [exp.seed], arts + ["probe.json"]).write(root)
        _timing(root, started)
        _say(f"probe {src} -> {root}")
    return EXIT_OK


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


# ---------------------------------------------------------------- analyze


def _separation_csv(run: Path) -> Path | None:
    for cand in (run / "probe" / "separation.csv", run / "separation.csv"):
        if cand.is_file():
            return cand
    return None


def cmd_analyze(args) -> int:
    started = time.perf_counter()
    exp = _experiment(args)
    runs = sorted({Path(p) for pat in args.runs for p in glob.glob(pat) if Path(p).is_dir()})
    entries = []
    skipped = []
    for run in runs:
        csv_path = _separation_csv(run)
        if csv_path is None or not (run / "record.json").is_file():
            skipped.append(str(run))
            continue
        rec = json.loads((run / "record.json").read_text())
        t, q = read_tidy(csv_path)[("q", "readout")]
        min_mp = rec["config"]["L_max"] if args.min_mp is None else args.min_mp
        entries.append(dg.CrossingEntry(run.name, t, q, int(rec["mp"]), int(min_mp)))
    if not entries:
        raise FileNotFoundError("no run directories with record.json and separation.csv matched")
    report = dg.analyze_crossings(entries, tau=exp.probe.tau, seed=exp.seed)
    root = _out_root(args, "analysis")
    d = report.to_dict()
    d["skipped_runs"] = skipped
    write_json(root / "crossings.json", d)
    write_text(root / "crossings.csv", report.to_csv())
    arts = ["crossings.json", "crossings.csv"]
    try:
        write_text(root / "crossings.svg", render_svg(crossing_plot(d)))
        arts.append("crossings.svg")
    except ValueError:
        _say("crossings figure skipped: no finite (T_cross, mp) pairs")
    RunManifest("analyze", exp.to_dict(), [exp.seed], arts).write(root)
    _timing(root, started)
    r = "n/a" if report.pearson_r is None else f"{report.pearson_r:.4f}"
    _say(f"{len(entries)} runs, {report.n_pairs} finite pairs, Pearson r = {r} {report.notice}".rstrip())
    return EXIT_OK


# ---------------------------------------------------------------- verify


def verify_suite(name: str, seed: int = 0) -> dict:
    """Run one exact-construction check and return a JSON-ready result with ``passed``."""
    rng = np.random.default_rng([seed, 90])
    if name == "neutrality":
        reps = [th.verify_affine_neutrality(th.build_exact_tracker(g), 6) for g in ("C2", "C3", "S3")]
        return {"passed": all(r.passed for r in reps), "groups": [r.to_dict() for r in reps]}
    if name == "transport":
        out = []
        for g in ("C2", "C3", "S3"):
            tr = th.build_exact_tracker(g)
            words = enumerate_return_words(tr.group, 6)
            worst = 0.0
            for _ in range(100):
                w = words[rng.integers(len(words))]
                delta = tr.subspace.sample(rng, 0.1)
                worst = max(worst, th.verify_perturbation_transport(tr, delta, w).max_deviation)
            out.append({"group": g, "trials": 100, "worst_deviation": worst, "passed": worst <= th.EXACT_TOL})
        return {"passed": all(o["passed"] for o in out), "groups": out}
    if name == "parity":
        c_e, c_a = rng.standard_normal(4), rng.standard_normal(4)
        inv = th.c2_involution(c_e, c_a)
        delta = inv.subspace.sample(rng, 0.1)
        h = rng.standard_normal(4)
        sq = float(np.abs(inv.apply((1, 1), 0, h) - h).max())
        flip = max(float(np.abs(inv.apply((1,), g, inv.codebook[g] + delta) - (inv.codebook[1 - g] - delta)).max()) for g in (0, 1))
        back = max(float(np.abs(inv.apply((1, 1), g, inv.codebook[g] + delta) - (inv.codebook[g] + delta)).max()) for g in (0, 1))
        worst = max(sq, flip, back)
        return {"passed": worst <= th.EXACT_TOL, "square_identity": sq, "sign_flip": flip, "return": back}
    if name == "budget":
        return budget_sweep(seed)
    if name == "diffusion":
        res = th.diffusive_rms(1.0, 10000, 1000, seed=seed)
        return {"passed": abs(res.slope - 0.5) <= 0.05, "slope": res.slope, "steps": 10000, "trials": 1000}
    if name == "margins":
        ks = list(range(2, 129))
        seps = [th.cyclic_margin(k).separation for k in ks]
        mono = all(b < a for a, b in zip(seps, seps[1:]))
        small = abs(th.cyclic_margin(64).separation / 2 * 64 / math.pi - 1)
        ok = abs(th.cyclic_margin(2).separation - 2) < 1e-12 and abs(th.cyclic_margin(6).separation - 1) < 1e-12
        return {"passed": mono and ok and small < 0.01, "monotone": mono, "small_angle_rel_error_k64": small}
    raise ConfigError(f"unknown verify suite {name!r}; choose from {('all',) + VERIFY_SUITES}")


def budget_pairs(n: int = 20, seed: int = 0):
    """(config, predicted) pairs with non-integer predicted crossings spread over [50, 5000]."""
    rng = np.random.default_rng([seed, 91])
    targets = np.round(np.geomspace(50, 4990, n)) + 0.37
    W = rng.standard_normal((3, 2))
    out = []
    for i, P in enumerate(targets):
        r = 1.0 + 0.5 * i
        C = th.regular_cyclic_codebook(3, r)
        probe = th.BudgetSimConfig(C, W, np.zeros(2))
        u = rng.standard_normal(2)
        u /= np.linalg.norm(W @ u)
        eta = u * 0.5 * probe.separation / P
        out.append(eta)
    return targets, W, out


def budget_sweep(seed: int = 0, noisy_trials: int = 1000) -> dict:
    targets, W, etas = budget_pairs(seed=seed)
    rows = []
    exact = within = True
    for i, (P, eta) in enumerate(zip(targets, etas)):
        C = th.regular_cyclic_codebook(3, 1.0 + 0.5 * i)
        det = th.simulate_error_budget(th.BudgetSimConfig(C, W, eta, 0.0, 0.5, int(2 * P) + 10, 1), seed=seed)
        noisy = th.simulate_error_budget(
            th.BudgetSimConfig(C, W, eta, float(np.linalg.norm(eta)), 0.5, int(3 * P) + 10, noisy_trials), seed=seed + i
        )
        cfg = th.BudgetSimConfig(C, W, eta)
        exact &= det.median == math.ceil(cfg.predicted)
        rel = noisy.median / cfg.predicted - 1
        within &= abs(rel) <= 0.10
        lo, hi = noisy.iqr
        rows.append({"M": cfg.separation, "drift_readout": cfg.drift_gain, "predicted": cfg.predicted,
                     "drift_only": det.median, "noisy_median": noisy.median, "noisy_q25": lo, "noisy_q75": hi, "noisy_rel_error": rel})
    return {"passed": bool(exact and within), "drift_only_exact": bool(exact), "noisy_within_10pct": bool(within), "pairs": rows}


def cmd_verify(args) -> int:
    started = time.perf_counter()
    suites = VERIFY_SUITES if args.suite == "all" else (args.suite,)
    seed = args.seed or 0
    results = {s: verify_suite(s, seed) for s in suites}
    ok = all(r["passed"] for r in results.values())
    root = _out_root(args, "verify")
    write_json(root / "verify.json", {"passed": ok, "suites": results, "seed": seed})
    arts = ["verify.json"]
    if "budget" in results:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(results["budget"]["pairs"][0]), lineterminator="\n")
        w.writeheader()
        for row in results["budget"]["pairs"]:
            w.writerow({k: f"{v:.10g}" for k, v in row.items()})
        write_text(root / "budget_sweep.csv", buf.getvalue())
        arts.append("budget_sweep.csv")
    RunManifest("verify", {"suites": list(suites)}, [seed], arts).write(root)
    _timing(root, started)
    for s, r in results.items():
        _say(f"{'PASS' if r['passed'] else 'FAIL'} {s}")
    return EXIT_OK if ok else EXIT_CHECK


# ---------------------------------------------------------------- figures


def cmd_figures(args) -> int:
    src = Path(args.input)
    root = Path(args.out) if args.out else src
    meta = json.loads((src / "probe.json").read_text()) if (src / "probe.json").is_file() else {}
    mp = meta.get("mp")
    made = []
    jobs = []
    if (src / "perturbation.csv").is_file():
        jobs.append(("perturbation.svg", lambda: perturbation_plot(read_tidy(src / "perturbation.csv"))))
    if (src / "separation.csv").is_file():
        jobs.append(("separation_q.svg", lambda: separation_plots(read_tidy(src / "separation.csv"), mp)[0]))
        jobs.append(("separation_R.svg", lambda: separation_plots(read_tidy(src / "separation.csv"), mp)[1]))
    if (src / "subspace.csv").is_file():
        jobs.append(("subspace.svg", lambda: subspace_plot(read_tidy(src / "subspace.csv"), mp)))
    if (src / "crossings.json").is_file():
        jobs.append(("crossings.svg", lambda: crossing_plot(json.loads((src / "crossings.json").read_text()))))
    for name, build in jobs:
        try:
            write_text(root / name, render_svg(build()))
            made.append(name)
        except (ValueError, KeyError):
            _say(f"{name} skipped: empty trace")
    if not made:
        _say("no traces found")
    for m in made:
        _say(f"wrote {root / m}")
    return EXIT_OK


# ---------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment file")
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./runs)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--profile", choices=("desk", "paper"), default=None)
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="statetrack", description="state-tracking recurrent model laboratory")
    sub = p.add_subparsers(dest="cmd", required=True)
    sub.add_parser("train", parents=[common], help="run one curriculum").set_defaults(fn=cmd_train)
    sub.add_parser("grid", parents=[common], help="run the configured grid").set_defaults(fn=cmd_grid)
    pr = sub.add_parser("probe", parents=[common], help="diagnostic probes on checkpoints")
    pr.add_argument("checkpoint", nargs="+", help="run or checkpoint directories")
    pr.add_argument("--which", action="append", choices=("perturb", "separation", "subspace", "gain"))
    pr.set_defaults(fn=cmd_probe)
    an = sub.add_parser("analyze", parents=[common], help="crossing/correlation analysis over probed runs")
    an.add_argument("runs", nargs="+", help="run directory globs")
    an.add_argument("--min-mp", type=int, default=None, help="minimum mp entering the correlation (default: each run's L_max)")
    an.set_defaults(fn=cmd_analyze)
    ve = sub.add_parser("verify", parents=[common], help="exact theory checks")
    ve.add_argument("suite", nargs="?", default="all", choices=("all",) + VERIFY_SUITES)
    ve.set_defaults(fn=cmd_verify)
    fi = sub.add_parser("figures", parents=[common], help="SVG figures from probe/analysis CSVs")
    fi.add_argument("input", help="directory with probe or analysis outputs")
    fi.set_defaults(fn=cmd_figures)
    sub.add_parser("example-config", help="print an example configuration").set_defaults(fn=lambda a: print(EXAMPLE, end="") or 0)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ResourceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
