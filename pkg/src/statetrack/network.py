"""Embedding, pre-norm residual recurrent blocks and the linear readout."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericError
from .operators import (
    ActivationSpec,
    GateSpec,
    InjectionSpec,
    TransitionSpec,
    activate,
    apply_factor,
    gate_input,
    gate_step,
    init_gate,
    init_injection,
    init_transition,
    injection_sequence,
    transition_factor,
)

# (transition, injection, gate, activation) for the models of the main comparison
PRESETS: dict[str, tuple[str, str, str, str]] = {
    "mamba": ("diag_contractive", "mamba_euler", "none", "identity"),
    "negative_mamba": ("diag_signed", "mamba_euler", "none", "identity"),
    "mamba3": ("diag_complex_damped", "mamba3_trapezoid", "none", "identity"),
    "aussm": ("diag_complex_unitary", "mamba_euler", "none", "identity"),
    "simple_aussm": ("diag_complex_unitary_nostep", "linear", "none", "identity"),
    "linear_rnn": ("dense_linear", "linear", "none", "identity"),
    "tanh_rnn": ("dense_linear", "linear", "none", "tanh"),
    "token_gated_rnn": ("dense_linear", "linear", "token", "identity"),
    "state_gated_rnn": ("dense_linear", "linear", "state", "identity"),
}
AFFINE_PRESETS = ("mamba", "negative_mamba", "mamba3", "aussm", "simple_aussm", "linear_rnn", "token_gated_rnn")

LN_EPS = 1e-5


@dataclass(frozen=True)
class RecurrentLayerConfig:
    transition: TransitionSpec
    injection: InjectionSpec
    gate: GateSpec
    activation: ActivationSpec
    state_dim: int
    model_dim: int

    def __post_init__(self):
        if self.transition.state_dim != self.state_dim:
            raise ConfigError("transition state_dim differs from the layer state_dim")
        if self.activation.kind in ("max_pair", "min_pair", "groupsort2") and self.state_dim % 2:
            raise ConfigError(f"{self.activation.kind} needs an even state_dim")
        if self.injection.kind in ("mamba_euler", "mamba3_trapezoid") and self.transition.kind == "dense_linear":
            raise ConfigError(f"{self.injection.kind} injection needs a stepped diagonal transition")
        if self.injection.kind == "mamba3_trapezoid" and self.transition.kind not in (
            "diag_contractive", "diag_signed", "diag_complex_damped", "diag_complex_unitary"
        ):
            raise ConfigError("mamba3_trapezoid injection needs a stepped transition")


@dataclass(frozen=True)
class ModelConfig:
    n_tokens: int
    d_model: int = 64
    d_state: int = 32
    depth: int = 1
    transition: str = "dense_linear"
    injection: str = "linear"
    gate: str = "none"
    activation: str = "tanh"
    embedding: str = "learned"
    readout_bias: bool = False
    preset: str | None = None

    @classmethod
    def from_preset(cls, preset: str, n_tokens: int, **kw) -> "ModelConfig":
        if preset not in PRESETS:
            raise ConfigError(f"unknown model {preset!r}; choose from {sorted(PRESETS)}")
        tr, inj, gate, act = PRESETS[preset]
        kw.setdefault("activation", act)
        kw.setdefault("gate", gate)
        return cls(n_tokens=n_tokens, transition=tr, injection=inj, preset=preset, **kw)

    def layer(self) -> RecurrentLayerConfig:
        return RecurrentLayerConfig(
            TransitionSpec(self.transition, self.d_state),
            InjectionSpec(self.injection),
            GateSpec(self.gate),
            ActivationSpec(self.activation),
            self.d_state,
            self.d_model,
        )

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.embedding not in ("learned", "onehot"):
            raise ConfigError(f"unknown embedding {self.embedding!r}")
        if self.embedding == "onehot" and self.d_model < self.n_tokens:
            raise ConfigError("onehot embedding needs d_model >= n_tokens")
        self.layer()

    @property
    def is_affine(self) -> bool:
        """True when every state update is affine in the previous state."""
        return self.gate in ("none", "token") and self.activation == "identity"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ModelStack:
    config: ModelConfig
    params: dict[str, np.ndarray]

    @property
    def depth(self) -> int:
        return self.config.depth

    @property
    def readout(self) -> np.ndarray:
        return self.params["W_out"]

    def copy(self) -> "ModelStack":
        return ModelStack(self.config, {k: v.copy() for k, v in self.params.items()})


def init_stack(config: ModelConfig, rng) -> ModelStack:
    config.validate()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    layer = config.layer()
    dm, ds = config.d_model, config.d_state
    p: dict[str, np.ndarray] = {}
    if config.embedding == "learned":
        p["embed"] = rng.standard_normal((config.n_tokens, dm))
    for i in range(config.depth):
        pre = f"blocks.{i}."
        blk = {"ln_g": np.ones(dm), "ln_b": np.zeros(dm)}
        blk.update(init_transition(layer.transition, dm, rng))
        blk.update(init_injection(layer.injection, layer.transition, dm, rng))
        blk.update(init_gate(layer.gate, ds, dm, rng))
        blk["W_o"] = rng.uniform(-1, 1, size=(dm, ds)) / np.sqrt(ds)
        p.update({pre + k: v for k, v in blk.items()})
    p["W_out"] = rng.uniform(-1, 1, size=(config.n_tokens, dm)) / np.sqrt(dm)
    if config.readout_bias:
        p["b_out"] = np.zeros(config.n_tokens)
    return ModelStack(config, p)


@dataclass
class RolloutTrace:
    hidden: np.ndarray  # (L, B, T, d_state) operator states h_t per block
    residual_stream: np.ndarray  # (B, T, d_model) what the readout sees
    logits: np.ndarray  # (B, T, |G|)

    @property
    def length(self) -> int:
        return self.logits.shape[1]


@dataclass
class _Override:
    step: int  # 1-based step whose state is replaced
    fn: Callable[[np.ndarray], np.ndarray]


@dataclass
class _ForwardOut:
    logits: ad.Tensor
    hidden: list[ad.Tensor] = field(default_factory=list)
    stream: ad.Tensor | None = None


def _embed(config: ModelConfig, P, tokens: np.ndarray) -> ad.Tensor:
    if config.embedding == "onehot":
        E = np.zeros((config.n_tokens, config.d_model))
        E[np.arange(config.n_tokens), np.arange(config.n_tokens)] = 1.0
        return ad.Tensor(E[tokens])
    return ad.embedding(tokens, P["embed"])


def _block(config: ModelConfig, P, i: int, s: ad.Tensor, override: _Override | None, check: bool) -> ad.Tensor:
    layer = config.layer()
    pre = f"blocks.{i}."
    bp = {k[len(pre):]: v for k, v in P.items() if k.startswith(pre)}
    u = ad.add(ad.mul(ad.layernorm(s, LN_EPS), bp["ln_g"]), bp["ln_b"])
    factor = transition_factor(layer.transition, bp, u)
    inj = ad.unstack(injection_sequence(layer.injection, layer.transition, bp, u, factor), axis=1)
    gpre = gate_input(layer.gate, bp, u)
    gsteps = ad.unstack(gpre, axis=1) if gpre is not None else None
    if factor.dense is not None:
        fsteps = None
    elif factor.diag is not None:
        fsteps = [(d, None, None) for d in ad.unstack(factor.diag, axis=1)]
    else:
        fsteps = [(None, r, m) for r, m in zip(ad.unstack(factor.re, axis=1), ad.unstack(factor.im, axis=1))]
    B, T = s.value.shape[0], s.value.shape[1]
    h = ad.Tensor(np.zeros((B, config.d_state)))
    hs = []
    act = layer.activation.kind
    for t in range(T):
        f_t = factor if fsteps is None else type(factor)(*fsteps[t], None)
        z = apply_factor(f_t, h)
        if gsteps is not None:
            z = ad.mul(gate_step(layer.gate, bp, gsteps[t], h), z)
        h = activate(act, ad.add(z, inj[t]))
        if override is not None and i == 0 and t + 1 == override.step:
            h = ad.Tensor(override.fn(h.value))
        hs.append(h)
    H = ad.stack(hs, axis=1)
    if check and not np.isfinite(H.value).all():
        bad = np.argwhere(~np.isfinite(H.value))[0]
        raise NumericError(f"non-finite state at step {int(bad[1]) + 1} in block {i}")
    return H


def forward_tensors(config: ModelConfig, P, tokens: np.ndarray, override: _Override | None = None, check: bool = True) -> _ForwardOut:
    """Differentiable forward pass; ``P`` maps parameter names to tensors or arrays."""
    tokens = np.asarray(tokens)
    s = _embed(config, P, tokens)
    hidden = []
    for i in range(config.depth):
        H = _block(config, P, i, s, override, check)
        hidden.append(H)
        s = ad.add(s, ad.linear(H, P[f"blocks.{i}.W_o"]))
    logits = ad.linear(s, P["W_out"], P.get("b_out"))
    return _ForwardOut(logits, hidden, s)


def _as_batch(seq) -> tuple[np.ndarray, bool]:
    x = np.asarray(seq, dtype=np.int64)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def forward(stack: ModelStack, seq, record_trace: bool = True, *, check_finite: bool = True, _override: _Override | None = None) -> RolloutTrace:
    """Run the stack on tokens of shape ``(T,)`` or ``(B, T)``.

    Returns per-step logits always; hidden states and the residual stream only
    when ``record_trace`` is set (otherwise those fields are empty arrays).
    """
    x, single = _as_batch(seq)
    if x.size and (x.min() < 0 or x.max() >= stack.config.n_tokens):
        raise IndexError("token outside the vocabulary")
    with np.errstate(all="ignore" if not check_finite else "warn"):
        out = forward_tensors(stack.config, stack.params, x, _override, check_finite)
    logits = out.logits.value
    if record_trace:
        hidden = np.stack([h.value for h in out.hidden])
        stream = out.stream.value
    else:
        hidden = np.empty((0,))
        stream = np.empty((0,))
    if single:
        logits = logits[0]
        if record_trace:
            hidden, stream = hidden[:, 0], stream[0]
    return RolloutTrace(hidden, stream, logits)


def forward_with_state_override(stack: ModelStack, seq, override_step: int, *, state=None, noise=None) -> RolloutTrace:
    """Forward pass that replaces (``state``) or perturbs (``noise``) the block-1
    operator state once, right after step ``override_step`` (1-based) is computed."""
    x, _ = _as_batch(seq)
    if not 1 <= override_step <= x.shape[-1]:
        raise ValueError(f"override step {override_step} outside 1..{x.shape[-1]}")
    if (state is None) == (noise is None):
        raise ValueError("pass exactly one of state= or noise=")
    if state is not None:
        st = np.asarray(state, dtype=float)
        fn = lambda h: np.broadcast_to(st, h.shape).copy()
    else:
        nz = np.asarray(noise, dtype=float)
        fn = lambda h: h + nz
    return forward(stack, seq, True, _override=_Override(override_step, fn))


def decode_nearest_centroid(centroids: np.ndarray, h: np.ndarray, space: str = "latent", W_out: np.ndarray | None = None) -> np.ndarray | int:
    """Index of the nearest centroid (lowest index on ties), in latent or readout space."""
    C = np.asarray(centroids, dtype=float)
    H = np.asarray(h, dtype=float)
    if C.shape[0] < 2:
        raise ValueError("need at least two centroids")
    if space == "readout":
        if W_out is None:
            raise ValueError("readout space needs W_out")
        C, H = C @ W_out.T, H @ W_out.T
    elif space != "latent":
        raise ValueError(f"unknown space {space!r}")
    d2 = ((H[..., None, :] - C) ** 2).sum(axis=-1)
    idx = np.argmin(d2, axis=-1)
    return int(idx) if idx.ndim == 0 else idx


# ---------------------------------------------------------------- checkpoints


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-" + path.name)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(directory, stack: ModelStack, *, seed: int | None = None, extra: dict | None = None) -> Path:
    """Write ``params.bin`` (little-endian float64 blobs) and ``manifest.json``."""
    directory = Path(directory)
    entries = []
    blobs = []
    offset = 0
    for name in sorted(stack.params):
        arr = np.ascontiguousarray(stack.params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float64", "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    cfg = stack.config.to_dict()
    manifest = {
        "format": "statetrack-checkpoint/1",
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "tensors": entries,
    }
    if extra:
        manifest["extra"] = extra
    _atomic_write(directory / "params.bin", b"".join(blobs))
    _atomic_write(directory / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return directory


def load_checkpoint(directory) -> tuple[ModelStack, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    blob = (directory / "params.bin").read_bytes()
    params = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(blob, dtype="<f8", count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        params[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    config = ModelConfig(**manifest["config"])
    return ModelStack(config, params), manifest
