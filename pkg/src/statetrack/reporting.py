"""Deterministic SVG line plots, tidy CSV readers and run manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import _atomic_write, config_hash

__version__ = "0.1.0"

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")
GRAY = "#8a8a8a"


@dataclass
class Series:
    x: np.ndarray
    y: np.ndarray
    label: str = ""
    color: str | None = None
    lo: np.ndarray | None = None  # band lower edge
    hi: np.ndarray | None = None
    dashed: bool = False
    markers: bool = False


@dataclass
class Plot:
    title: str
    xlabel: str
    ylabel: str
    series: list[Series] = field(default_factory=list)
    xlog: bool = False
    ylog: bool = False
    hlines: list[tuple[float, str]] = field(default_factory=list)  # dashed reference lines
    vlines: list[tuple[float, str]] = field(default_factory=list)
    width: int = 640
    height: int = 400


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-2:
        return f"{v:.0e}"
    return f"{v:g}"


def _ticks(lo: float, hi: float, log: bool) -> list[float]:
    if log:
        return [10.0**k for k in range(math.floor(lo), math.ceil(hi) + 1) if lo - 1e-9 <= k <= hi + 1e-9]
    span = hi - lo
    if span <= 0:
        return [lo]
    step = 10 ** math.floor(math.log10(span / 5))
    for m in (1, 2, 5, 10):
        if span / (step * m) <= 6:
            step *= m
            break
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


def render_svg(plot: Plot) -> str:
    """Render to an SVG string; identical inputs give identical bytes."""
    W, H = plot.width, plot.height
    L, R, T, B = 70, 20, 36, 50
    xs, ys = [], []
    for s in plot.series:
        for arr, into in ((s.x, xs), (s.y, ys), (s.lo, ys), (s.hi, ys)):
            if arr is None:
                continue
            a = np.asarray(arr, dtype=float)
            a = a[np.isfinite(a)]
            if (plot.xlog and into is xs) or (plot.ylog and into is ys):
                a = a[a > 0]
            into.extend(a.tolist())
    ys += [v for v, _ in plot.hlines if (v > 0 or not plot.ylog)]
    xs += [v for v, _ in plot.vlines if (v > 0 or not plot.xlog)]
    if not xs or not ys:
        raise ValueError("nothing to plot")

    def rng(vals, log):
        v = np.log10(vals) if log else np.asarray(vals)
        lo, hi = float(v.min()), float(v.max())
        if hi == lo:
            lo, hi = lo - 0.5, hi + 0.5
        return lo, hi

    x0, x1 = rng(xs, plot.xlog)
    y0, y1 = rng(ys, plot.ylog)

    def px(v):
        t = math.log10(v) if plot.xlog else v
        return L + (t - x0) / (x1 - x0) * (W - L - R)

    def py(v):
        t = math.log10(v) if plot.ylog else v
        return H - B - (t - y0) / (y1 - y0) * (H - T - B)

    def ok(xv, yv):
        return math.isfinite(xv) and math.isfinite(yv) and (xv > 0 or not plot.xlog) and (yv > 0 or not plot.ylog)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="18" text-anchor="middle" font-size="13">{_esc(plot.title)}</text>',
        f'<rect x="{L}" y="{T}" width="{W - L - R}" height="{H - T - B}" fill="none" stroke="black"/>',
    ]
    for v in _ticks(x0, x1, plot.xlog):
        X = px(v)
        out.append(f'<line x1="{_fmt(X)}" y1="{H - B}" x2="{_fmt(X)}" y2="{H - B + 4}" stroke="black"/>')
        out.append(f'<text x="{_fmt(X)}" y="{H - B + 16}" text-anchor="middle">{_tick_label(v)}</text>')
    for tv in _ticks(y0, y1, plot.ylog):
        Y = py(tv)
        out.append(f'<line x1="{L - 4}" y1="{_fmt(Y)}" x2="{L}" y2="{_fmt(Y)}" stroke="black"/>')
        out.append(f'<text x="{L - 6}" y="{_fmt(Y + 4)}" text-anchor="end">{_tick_label(tv)}</text>')
    out.append(f'<text x="{(L + W - R) / 2:.1f}" y="{H - 12}" text-anchor="middle">{_esc(plot.xlabel)}</text>')
    out.append(f'<text x="16" y="{(T + H - B) / 2:.1f}" text-anchor="middle" transform="rotate(-90 16 {(T + H - B) / 2:.1f})">{_esc(plot.ylabel)}</text>')

    for i, s in enumerate(plot.series):
        color = s.color or PALETTE[i % len(PALETTE)]
        x = np.asarray(s.x, dtype=float)
        if s.lo is not None and s.hi is not None:
            lo, hi = np.asarray(s.lo, dtype=float), np.asarray(s.hi, dtype=float)
            keep = [j for j in range(len(x)) if ok(x[j], lo[j]) and ok(x[j], hi[j])]
            if keep:
                pts = [f"{_fmt(px(x[j]))},{_fmt(py(hi[j]))}" for j in keep] + [f"{_fmt(px(x[j]))},{_fmt(py(lo[j]))}" for j in reversed(keep)]
                out.append(f'<polygon points="{" ".join(pts)}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        y = np.asarray(s.y, dtype=float)
        dash = ' stroke-dasharray="6 4"' if s.dashed else ""
        for run in _runs([j for j in range(len(x)) if ok(x[j], y[j])]):
            if s.markers:
                for j in run:
                    out.append(f'<circle cx="{_fmt(px(x[j]))}" cy="{_fmt(py(y[j]))}" r="3" fill="{color}"/>')
            elif len(run) > 1:
                pts = " ".join(f"{_fmt(px(x[j]))},{_fmt(py(y[j]))}" for j in run)
                out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>')
    for v, label in plot.hlines:
        if v > 0 or not plot.ylog:
            Y = py(v)
            out.append(f'<line x1="{L}" y1="{_fmt(Y)}" x2="{W - R}" y2="{_fmt(Y)}" stroke="black" stroke-dasharray="4 4"/>')
            if label:
                out.append(f'<text x="{W - R - 4}" y="{_fmt(Y - 4)}" text-anchor="end">{_esc(label)}</text>')
    for v, label in plot.vlines:
        if v > 0 or not plot.xlog:
            X = px(v)
            out.append(f'<line x1="{_fmt(X)}" y1="{T}" x2="{_fmt(X)}" y2="{H - B}" stroke="{GRAY}" stroke-dasharray="2 3"/>')
            if label:
                out.append(f'<text x="{_fmt(X + 3)}" y="{T + 12}">{_esc(label)}</text>')
    legend = [(s.label, s.color or PALETTE[i % len(PALETTE)]) for i, s in enumerate(plot.series) if s.label]
    for i, (label, color) in enumerate(legend):
        yy = T + 14 + 14 * i
        out.append(f'<line x1="{L + 8}" y1="{yy - 4}" x2="{L + 26}" y2="{yy - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{L + 30}" y="{yy}">{_esc(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _runs(idx: list[int]) -> list[list[int]]:
    runs: list[list[int]] = []
    for j in idx:
        if runs and runs[-1][-1] == j - 1:
            runs[-1].append(j)
        else:
            runs.append([j])
    return runs


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


# ---------------------------------------------------------------- tidy CSV


def read_tidy(path) -> dict[tuple[str, ...], tuple[np.ndarray, np.ndarray]]:
    """Group a tidy CSV ``t, quantity[, space], value`` into ``{(quantity[, space]): (t, values)}``."""
    rows = list(csv.DictReader(Path(path).open()))
    out: dict[tuple[str, ...], list[tuple[float, float]]] = {}
    for r in rows:
        key = (r["quantity"],) + ((r["space"],) if "space" in r else ())
        out.setdefault(key, []).append((float(r["t"]), float(r["value"])))
    return {k: (np.array([a for a, _ in v]), np.array([b for _, b in v])) for k, v in out.items()}


def perturbation_plot(data, title: str = "perturbation ratio") -> Plot:
    t, med = data[("median_ratio",)]
    _, lo = data[("q25_ratio",)]
    _, hi = data[("q75_ratio",)]
    return Plot(title, "t", "||e_t|| / ||e_t0||", [Series(t, med, "median", lo=lo, hi=hi)], ylog=True, hlines=[(1.0, "")])


def separation_plots(data, mp: float | None = None, tau: float = 0.5, title: str = "separation") -> tuple[Plot, Plot]:
    vl = [(float(mp), f"mp={int(mp)}")] if mp else []
    tq, qr = data[("q", "readout")]
    _, ql = data[("q", "latent")]
    top = Plot(f"{title}: q(t)", "t", "q(t) = R(t)/M(t)",
               [Series(tq, qr, "readout"), Series(tq, ql, "latent", color=GRAY)], xlog=True, ylog=True,
               hlines=[(tau, f"q={tau:g}")], vlines=vl)
    tr, rr = data[("R", "readout")]
    _, rl = data[("R", "latent")]
    bottom = Plot(f"{title}: R(t)", "t", "R(t)", [Series(tr, rr, "readout"), Series(tr, rl, "latent", color=GRAY)],
                  xlog=True, ylog=True, vlines=vl)
    return top, bottom


def subspace_plot(data, mp: float | None = None, title: str = "subspace") -> Plot:
    t, qu = data[("q_U",)]
    _, qp = data[("q_perp",)]
    vl = [(float(mp), f"mp={int(mp)}")] if mp else []
    return Plot(title, "t", "spread / latent separation",
                [Series(t, qu, "q_U"), Series(t, qp, "q_perp", color=GRAY)], ylog=True, hlines=[(0.5, "")], vlines=vl)


def crossing_plot(report_dict: dict) -> Plot:
    pts = [(m["t_cross"], m["mp"]) for m in report_dict["models"] if m["t_cross"] != "∞" and m["mp"] > 0]
    x = np.array([a for a, _ in pts], dtype=float)
    y = np.array([b for _, b in pts], dtype=float)
    r = report_dict.get("pearson_r")
    title = "T_cross vs mp" + (f" (r = {r:.3f})" if r is not None else "")
    return Plot(title, "T_cross", "mp", [Series(x, y, "models", markers=True)], xlog=True, ylog=True)


# ---------------------------------------------------------------- manifest


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list[int]
    artifacts: list[str]  # relative to the manifest directory
    code_version: str = __version__

    def to_json(self, root) -> str:
        root = Path(root)
        files = sorted(set(self.artifacts))
        d = {
            "command": self.command,
            "config_hash": config_hash(self.config),
            "code_version": self.code_version,
            "seeds": self.seeds,
            "artifacts": [{"path": f, "sha256_16": file_digest(root / f)} for f in files if (root / f).is_file()],
            "timing": "timing.txt",
        }
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def write(self, root) -> Path:
        path = Path(root) / "manifest.json"
        _atomic_write(path, self.to_json(root).encode())
        return path


def write_text(path, text: str) -> Path:
    path = Path(path)
    _atomic_write(path, text.encode())
    return path


def write_json(path, obj) -> Path:
    return write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)
