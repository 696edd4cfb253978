"""Curriculum training, length-generalisation evaluation and grid search."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericError
from .groups import Batch, GroupSpec, build_group, sample_batch
from .network import ModelConfig, ModelStack, _atomic_write, config_hash, forward, forward_tensors, init_stack, save_checkpoint

SCHEDULERS = ("fixed", "cosine", "plateau")
EVAL_CHUNK = 250  # sequences per forward pass during evaluation


# ---------------------------------------------------------------- gradients


@dataclass
class GradientSet:
    grads: dict[str, np.ndarray]

    def global_norm(self) -> float:
        return math.sqrt(sum(float((g * g).sum()) for g in self.grads.values()))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.grads[name]


def backward(stack: ModelStack, batch: Batch) -> tuple[float, GradientSet]:
    """Mean per-step cross-entropy over the batch and its exact gradient (full BPTT)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    with ad.Tape() as tape:
        P = {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in stack.params.items()}
        out = forward_tensors(stack.config, P, batch.tokens)
        loss = ad.cross_entropy(out.logits, batch.labels)
        tape.backward(loss)
    grads = {k: (np.zeros_like(v) if P[k].grad is None else np.array(P[k].grad)) for k, v in stack.params.items()}
    return float(loss.value), GradientSet(grads)


def loss_value(stack: ModelStack, batch: Batch) -> float:
    out = forward_tensors(stack.config, stack.params, batch.tokens)
    return float(ad.cross_entropy(out.logits, batch.labels).value)


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    skipped: dict[str, int]  # entries whose probe crossed a kink
    tolerance: float
    max_abs_error: dict[str, float] = field(default_factory=dict)
    max_abs_numeric: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance

    @property
    def global_rel_error(self) -> float:
        """Largest absolute error over all blocks, relative to the largest gradient entry."""
        scale = max(self.max_abs_numeric.values(), default=0.0)
        worst = max(self.max_abs_error.values(), default=0.0)
        return worst / scale if scale > 1e-12 else worst

    @property
    def kink_flagged(self) -> bool:
        return any(self.skipped.values())


def _branches(stack: ModelStack, batch: Batch) -> tuple[float, list[np.ndarray]]:
    with ad.branch_log() as log:
        value = loss_value(stack, batch)
    return value, log


def finite_diff_check(stack: ModelStack, batch: Batch, tolerance: float = 1e-6, step: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients with central differences, entry by entry.

    The error of a parameter block is ``max|analytic - numeric| / max|numeric|``
    over its entries. Entries whose +/- probes change a relu or pair-selector
    branch are skipped and counted.
    """
    _, grads = backward(stack, batch)
    _, base = _branches(stack, batch)
    errs: dict[str, float] = {}
    skipped: dict[str, int] = {}
    abs_err: dict[str, float] = {}
    abs_num: dict[str, float] = {}
    for name, value in stack.params.items():
        numeric = np.zeros_like(value)
        valid = np.ones(value.shape, dtype=bool)
        for idx in np.ndindex(value.shape):
            old = value[idx]
            value[idx] = old + step
            lp, bp = _branches(stack, batch)
            value[idx] = old - step
            lm, bm = _branches(stack, batch)
            value[idx] = old
            if not (_same(base, bp) and _same(base, bm)):
                valid[idx] = False
                continue
            numeric[idx] = (lp - lm) / (2 * step)
        skipped[name] = int((~valid).sum())
        if not valid.any():
            errs[name] = 0.0
            continue
        diff = np.abs(grads[name] - numeric)[valid].max()
        scale = np.abs(numeric[valid]).max()
        errs[name] = float(diff / scale) if scale > 1e-12 else float(diff)
        abs_err[name], abs_num[name] = float(diff), float(scale)
    return GradCheckReport(errs, skipped, tolerance, abs_err, abs_num)


def _same(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def clip_global_norm(grads: GradientSet, max_norm: float | None) -> tuple[GradientSet, float, bool]:
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    norm = grads.global_norm()
    if not math.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    if max_norm is None or max_norm <= 0 or norm <= max_norm:
        return grads, norm, False
    s = max_norm / norm
    return GradientSet({k: g * s for k, g in grads.grads.items()}), norm, True


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray] | GradientSet,
    lr: float,
    weight_decay: float,
    state: AdamState,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> dict[str, np.ndarray]:
    """One AdamW update with decoupled weight decay; returns new parameter arrays."""
    g_all = grads.grads if isinstance(grads, GradientSet) else grads
    if set(g_all) != set(params) or set(state.m) != set(params):
        raise ValueError("gradient/moment trees do not match the parameters")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = {}
    for k, p in params.items():
        g = g_all[k]
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        upd = (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + eps)
        new = p - lr * (upd + weight_decay * p)
        if not np.isfinite(new).all():
            raise NumericError(f"non-finite update in {k}")
        out[k] = new
    return out


class LRSchedule:
    """Learning rate per epoch. ``plateau`` needs :meth:`observe` once per epoch."""

    def __init__(self, kind: str, lr: float, total_epochs: int, patience: int = 5, factor: float = 0.5, floor: float = 1e-3):
        if kind not in SCHEDULERS:
            raise ConfigError(f"unknown scheduler {kind!r}; choose from {SCHEDULERS}")
        self.kind, self.base, self.total = kind, lr, max(total_epochs, 1)
        self.patience, self.factor, self.floor = patience, factor, floor
        self.scale = 1.0
        self._best = -math.inf
        self._stale = 0

    def lr(self, epoch: int) -> float:
        if self.kind == "cosine":
            lo = self.base / 100
            return lo + 0.5 * (self.base - lo) * (1 + math.cos(math.pi * min(epoch, self.total) / self.total))
        return self.base * self.scale

    def observe(self, acc: float) -> bool:
        """Record a stage test accuracy; returns True when the rate was just halved."""
        if self.kind != "plateau":
            return False
        if acc > self._best:
            self._best, self._stale = acc, 0
            return False
        self._stale += 1
        if self._stale >= self.patience:
            self._stale = 0
            self.scale = max(self.scale * self.factor, self.floor)
            return True
        return False

    def new_stage(self) -> None:
        self._best, self._stale = -math.inf, 0


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class TrainConfig:
    model: str = "tanh_rnn"
    group: str = "C2"
    d_model: int = 64
    d_state: int = 32
    depth: int = 1
    activation: str | None = None  # overrides the preset activation
    gate: str | None = None  # overrides the preset gate
    embedding: str = "learned"
    lr: float = 1e-3
    scheduler: str = "fixed"
    weight_decay: float = 0.01
    batch_size: int = 128
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    start_len: int = 2
    promote_threshold: float = 0.95
    promote_patience: int = 5
    L_max: int = 32
    max_total_epochs: int = 500
    fail_window: int = 50
    fail_margin: float = 0.02
    plateau_factor: float = 0.5
    plateau_floor: float = 1e-3
    eval_lengths: tuple[int, ...] = (64, 128, 256, 512)
    pass_threshold: float = 0.90
    n_train: int = 2000
    n_test: int = 500
    n_eval: int = 2000
    generators_only: bool = False

    def __post_init__(self):
        object.__setattr__(self, "eval_lengths", tuple(int(x) for x in self.eval_lengths))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        self.validate()

    def validate(self) -> None:
        ev = self.eval_lengths
        if not ev or any(b <= a for a, b in zip(ev, ev[1:])):
            raise ConfigError("eval_lengths must be non-empty and strictly increasing")
        if ev[0] <= self.L_max:
            raise ConfigError("every eval length must exceed L_max")
        for name in ("promote_threshold", "pass_threshold"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.scheduler not in SCHEDULERS:
            raise ConfigError(f"unknown scheduler {self.scheduler!r}")
        if not 1 <= self.start_len <= self.L_max:
            raise ConfigError("need 1 <= start_len <= L_max")
        for name in ("batch_size", "n_train", "n_test", "n_eval", "max_total_epochs", "promote_patience", "d_model", "d_state"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        base = dict(
            d_model=698, d_state=64, batch_size=256, L_max=60, eval_lengths=tuple(range(100, 1001, 100)),
            n_train=10000, n_test=2000, n_eval=2000, max_total_epochs=500, weight_decay=0.01,
        )
        base.update(kw)
        return cls(**base)

    def model_config(self, n_tokens: int) -> ModelConfig:
        extra = {k: v for k, v in (("activation", self.activation), ("gate", self.gate)) if v is not None}
        return ModelConfig.from_preset(
            self.model, n_tokens, d_model=self.d_model, d_state=self.d_state, depth=self.depth, embedding=self.embedding, **extra
        )

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["eval_lengths"] = list(self.eval_lengths)
        d["betas"] = list(self.betas)
        return d

    def hash(self, seed: int) -> str:
        return config_hash({"config": self.to_dict(), "seed": seed})


def stage_lengths(start: int, L_max: int) -> list[int]:
    """Curriculum lengths: doubling from ``start`` and capped at ``L_max``."""
    out = [start]
    while out[-1] < L_max:
        out.append(min(2 * out[-1], L_max))
    return out


# ---------------------------------------------------------------- evaluation


def accuracy(stack: ModelStack, batch: Batch, chunk: int = EVAL_CHUNK) -> tuple[float, float]:
    """(per-token accuracy, final-token accuracy). Non-finite logits count as wrong."""
    hits = final = 0
    n, T = batch.tokens.shape
    with np.errstate(all="ignore"):
        for s in range(0, n, chunk):
            logits = forward(stack, batch.tokens[s : s + chunk], record_trace=False, check_finite=False).logits
            ok = np.isfinite(logits).all(axis=-1) & (logits.argmax(axis=-1) == batch.labels[s : s + chunk])
            hits += int(ok.sum())
            final += int(ok[:, -1].sum())
    return hits / (n * T), final / n


def max_passing_length(accs: dict[int, float], threshold: float, converged: bool, L_max: int) -> int:
    if not converged:
        return 0
    passing = [L for L, a in accs.items() if a >= threshold]
    return max(passing) if passing else L_max


def evaluate_lengths(
    stack: ModelStack, group: GroupSpec, eval_lengths, n_per_length: int = 2000, *, seed: int = 0,
    converged: bool = True, L_max: int = 32, threshold: float = 0.90, generators_only: bool = False,
) -> tuple[dict[int, float], dict[int, float], int]:
    """Per-length token accuracy, final-token accuracy and mp on fresh sequences."""
    tok, fin = {}, {}
    for L in eval_lengths:
        b = sample_batch(group, n_per_length, int(L), [seed, 2, int(L)], generators_only=generators_only)
        tok[int(L)], fin[int(L)] = accuracy(stack, b)
    return tok, fin, max_passing_length(tok, threshold, converged, L_max)


# ---------------------------------------------------------------- curriculum


@dataclass
class StageRecord:
    length: int
    epochs: int
    final_acc: float
    promoted: bool


@dataclass
class RunRecord:
    config: dict
    seed: int
    status: str  # converged | budget | diverged | stalled
    stages: list[StageRecord]
    epochs: list[dict]
    final_test_acc: float
    eval_acc: dict[int, float]
    eval_final_acc: dict[int, float]
    mp: int
    notes: dict = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "config": self.config,
            "config_hash": config_hash({"config": self.config, "seed": self.seed}),
            "seed": self.seed,
            "status": self.status,
            "stages": [dataclasses.asdict(s) for s in self.stages],
            "final_test_acc": self.final_test_acc,
            "eval_acc": {str(k): v for k, v in self.eval_acc.items()},
            "eval_final_acc": {str(k): v for k, v in self.eval_final_acc.items()},
            "mp": self.mp,
            "notes": self.notes,
        }
        if include_timing:
            d["wall_time"] = self.wall_time
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(
            config=d["config"], seed=d["seed"], status=d["status"],
            stages=[StageRecord(**s) for s in d["stages"]], epochs=d.get("epochs", []),
            final_test_acc=d["final_test_acc"], eval_acc={int(k): v for k, v in d["eval_acc"].items()},
            eval_final_acc={int(k): v for k, v in d["eval_final_acc"].items()}, mp=d["mp"],
            notes=d.get("notes", {}), wall_time=d.get("wall_time", 0.0),
        )

    def epochs_csv(self) -> str:
        buf = io.StringIO()
        cols = ["epoch", "length", "lr", "train_loss", "test_acc", "grad_norm", "clipped_steps"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in self.epochs:
            w.writerow({k: (f"{row[k]:.10g}" if isinstance(row[k], float) else row[k]) for k in cols})
        return buf.getvalue()


class Curriculum:
    """Stage bookkeeping: promotion after ``promote_patience`` epochs at the threshold,
    doubling capped at ``L_max``, and the stall rule."""

    def __init__(self, cfg: TrainConfig, chance: float):
        self.cfg = cfg
        self.chance = chance
        self.lengths = stage_lengths(cfg.start_len, cfg.L_max)
        self.stage = 0
        self.stages: list[StageRecord] = []
        self._streak = self._low = self._epochs = 0

    @property
    def length(self) -> int:
        return self.lengths[self.stage]

    def observe(self, acc: float) -> str:
        """Feed one epoch's test accuracy; returns promote, converged, stalled or continue."""
        cfg = self.cfg
        self._epochs += 1
        self._streak = self._streak + 1 if acc >= cfg.promote_threshold else 0
        self._low = self._low + 1 if acc < self.chance + cfg.fail_margin else 0
        if self._streak >= cfg.promote_patience:
            self.stages.append(StageRecord(self.length, self._epochs, acc, True))
            if self.stage == len(self.lengths) - 1:
                return "converged"
            self.stage += 1
            self._streak = self._low = self._epochs = 0
            return "promote"
        if self._low >= cfg.fail_window:
            self.close(acc)
            return "stalled"
        return "continue"

    def close(self, acc: float) -> None:
        """Record the unfinished current stage."""
        self.stages.append(StageRecord(self.length, self._epochs, acc, False))


def _run_notes(cfg: TrainConfig) -> dict:
    return {
        "init": "W_h orthogonal gain 1; input maps uniform(+-1/sqrt(fan_in)); A_log log-spaced in [-1,-1e-2]; softplus(dt_bias)=0.5; embedding N(0,1)",
        "optimizer": f"AdamW betas={list(cfg.betas)} eps={cfg.eps} wd={cfg.weight_decay} clip={cfg.clip_norm}",
        "scheduler": {
            "fixed": "constant lr",
            "cosine": f"cosine over {cfg.max_total_epochs} epochs to lr/100",
            "plateau": f"x{cfg.plateau_factor} after {cfg.promote_patience} epochs without stage improvement, floor lr*{cfg.plateau_floor}",
        }[cfg.scheduler],
        "metric": "per-token accuracy",
    }


def train_curriculum(cfg: TrainConfig, seed: int, *, group: GroupSpec | None = None, log=None) -> tuple[RunRecord, ModelStack]:
    """Run the doubling curriculum up to ``L_max``, then evaluate on longer sequences."""
    t_start = time.perf_counter()
    group = group or build_group(cfg.group)
    mcfg = cfg.model_config(group.order)
    ss = np.random.SeedSequence(seed)
    init_seq, shuffle_seq = ss.spawn(2)
    stack = init_stack(mcfg, np.random.default_rng(init_seq))
    shuffle_rng = np.random.default_rng(shuffle_seq)
    opt = AdamState.zeros_like(stack.params)
    sched = LRSchedule(cfg.scheduler, cfg.lr, cfg.max_total_epochs, cfg.promote_patience, cfg.plateau_factor, cfg.plateau_floor)
    cur = Curriculum(cfg, 1.0 / group.order)
    T = cur.length
    train, test = _stage_data(group, cfg, seed, cur.stage, T)
    epochs: list[dict] = []
    status = "budget"
    acc = 0.0
    for epoch in range(cfg.max_total_epochs):
        lr = sched.lr(epoch)
        try:
            loss, gnorm, clipped = _train_epoch(stack, opt, train, cfg, lr, shuffle_rng)
        except NumericError as exc:
            status = "diverged"
            cur.close(acc)
            if log:
                log(f"epoch {epoch}: diverged ({exc})")
            break
        acc, _ = accuracy(stack, test)
        epochs.append({"epoch": epoch, "length": T, "lr": lr, "train_loss": loss, "test_acc": acc, "grad_norm": gnorm, "clipped_steps": clipped})
        if log:
            log(f"epoch {epoch} T={T} loss={loss:.4f} acc={acc:.4f}")
        sched.observe(acc)
        event = cur.observe(acc)
        if event == "promote":
            T = cur.length
            train, test = _stage_data(group, cfg, seed, cur.stage, T)
            sched.new_stage()
        elif event in ("converged", "stalled"):
            status = event
            break
    if status == "budget":
        cur.close(acc)
    stages = cur.stages

    converged = status == "converged"
    final_acc = epochs[-1]["test_acc"] if epochs else 0.0
    if converged or status == "budget":
        tok, fin, mp = evaluate_lengths(
            stack, group, cfg.eval_lengths, cfg.n_eval, seed=seed, converged=converged,
            L_max=cfg.L_max, threshold=cfg.pass_threshold, generators_only=cfg.generators_only,
        )
    else:
        tok, fin, mp = {}, {}, 0
    rec = RunRecord(cfg.to_dict(), seed, status, stages, epochs, final_acc, tok, fin, mp, _run_notes(cfg))
    rec.wall_time = time.perf_counter() - t_start
    return rec, stack


def _stage_data(group: GroupSpec, cfg: TrainConfig, seed: int, stage: int, T: int) -> tuple[Batch, Batch]:
    train = sample_batch(group, cfg.n_train, T, [seed, 0, stage], generators_only=cfg.generators_only)
    test = sample_batch(group, cfg.n_test, T, [seed, 1, stage], generators_only=cfg.generators_only)
    return train, test


def _train_epoch(stack: ModelStack, opt: AdamState, train: Batch, cfg: TrainConfig, lr: float, rng) -> tuple[float, float, int]:
    order = rng.permutation(len(train))
    total = 0.0
    gmax = 0.0
    clipped = 0
    for s in range(0, len(order), cfg.batch_size):
        idx = order[s : s + cfg.batch_size]
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = backward(stack, Batch(train.tokens[idx], train.labels[idx]))
        grads, gnorm, was_clipped = clip_global_norm(grads, cfg.clip_norm)
        stack.params = adamw_step(stack.params, grads, lr, cfg.weight_decay, opt, cfg.betas, cfg.eps)
        total += loss * len(idx)
        gmax = max(gmax, gnorm)
        clipped += int(was_clipped)
    return total / len(order), gmax, clipped


def save_run(directory, record: RunRecord, stack: ModelStack | None = None) -> list[Path]:
    """Persist ``record.json``, ``epochs.csv``, a checkpoint and a ``timing.txt`` sidecar."""
    d = Path(directory)
    paths = [d / "record.json", d / "epochs.csv"]
    _atomic_write(paths[0], record.to_json().encode())
    _atomic_write(paths[1], record.epochs_csv().encode())
    if stack is not None:
        save_checkpoint(d / "checkpoint", stack, seed=record.seed, extra={"mp": record.mp, "status": record.status, "group": record.config["group"]})
        paths += [d / "checkpoint" / "params.bin", d / "checkpoint" / "manifest.json"]
    _atomic_write(d / "timing.txt", f"wall_time_s {record.wall_time:.3f}\n".encode())
    return paths


def load_run(directory) -> RunRecord:
    d = Path(directory)
    rec = RunRecord.from_dict(json.loads((d / "record.json").read_text()))
    rows = list(csv.DictReader((d / "epochs.csv").open()))
    rec.epochs = [
        {"epoch": int(r["epoch"]), "length": int(r["length"]), "lr": float(r["lr"]), "train_loss": float(r["train_loss"]),
         "test_acc": float(r["test_acc"]), "grad_norm": float(r["grad_norm"]), "clipped_steps": int(r["clipped_steps"])}
        for r in rows
    ]
    return rec


# ---------------------------------------------------------------- grid


@dataclass
class GridResult:
    model: str
    group: str
    depth: int
    records: list[RunRecord]
    best_index: int

    @property
    def best(self) -> RunRecord:
        return self.records[self.best_index]

    def to_dict(self) -> dict:
        return {
            "model": self.model, "group": self.group, "depth": self.depth, "best_index": self.best_index,
            "best": {"mp": self.best.mp, "final_test_acc": self.best.final_test_acc, "seed": self.best.seed, "config": self.best.config},
            "cells": [{"config_hash": config_hash({"config": r.config, "seed": r.seed}), "seed": r.seed, "mp": r.mp,
                       "final_test_acc": r.final_test_acc, "status": r.status} for r in self.records],
        }


def grid_best(records: list[RunRecord]) -> int:
    """Index of the record maximising ``(mp, final_test_acc)``; the first wins ties."""
    if not records:
        raise ValueError("empty grid")
    keys = [(r.mp, r.final_test_acc) for r in records]
    return max(range(len(keys)), key=lambda i: (keys[i], -i))


def grid_cells(base: TrainConfig, d_states, lrs, schedulers, seeds) -> list[tuple[TrainConfig, int]]:
    return [(base.replace(d_state=int(d), lr=float(lr), scheduler=s), int(seed)) for d in d_states for lr in lrs for s in schedulers for seed in seeds]


def _cell_worker(args) -> dict:
    cfg, seed, out_dir = args
    try:
        rec, stack = train_curriculum(cfg, seed)
    except Exception as exc:  # a failing cell must not abort the grid
        rec = RunRecord(cfg.to_dict(), seed, "error", [], [], 0.0, {}, {}, 0, {"error": f"{type(exc).__name__}: {exc}"})
        stack = None
    if out_dir is not None:
        save_run(Path(out_dir) / f"cell-{cfg.hash(seed)}", rec, stack)
    d = rec.to_dict(include_timing=True)
    d["epochs"] = rec.epochs
    return d


def run_grid(cells: list[tuple[TrainConfig, int]], *, jobs: int = 1, out_dir=None) -> GridResult:
    """Run every (config, seed) cell, in a process pool when ``jobs > 1``."""
    if not cells:
        raise ConfigError("grid is empty")
    args = [(c, s, None if out_dir is None else str(out_dir)) for c, s in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_single_thread) as pool:
            dicts = list(pool.map(_cell_worker, args))
    else:
        dicts = [_cell_worker(a) for a in args]
    records = [RunRecord.from_dict(d) for d in dicts]
    first = cells[0][0]
    return GridResult(first.model, first.group, first.depth, records, grid_best(records))


def _single_thread() -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = "1"
