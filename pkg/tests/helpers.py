"""Shared oracles for the test-suite."""

import json
from pathlib import Path

import numpy as np

from statetrack import autodiff as ad
from statetrack.operators import activate


# a config small enough to train, probe and grid in seconds
TINY_TOML = """\
seed = 1

[model]
kind = "tanh_rnn"
d_model = 8
d_state = 4

[task]
group = "C2"

[train]
n_train = 64
n_test = 32
n_eval = 32
batch_size = 32
L_max = 4
eval_lengths = [8, 16]
max_total_epochs = 3

[probe]
n = 20
T = 30
t0 = 5
T_max = 24
max_word_len = 2

[grid]
d_state = [4]
lr = [1e-3]
seeds = [0, 1]
"""


def fd_jacobian(f, z, step=1e-6):
    """Central finite-difference Jacobian of a vector map."""
    z = np.asarray(z, dtype=float)
    cols = []
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = step
        cols.append((f(z + e) - f(z - e)) / (2 * step))
    return np.stack(cols, axis=1)


def tape_jacobian(kind, z):
    """Jacobian of an activation pulled row by row out of the autodiff tape."""
    rows = []
    for i in range(z.size):
        x = ad.Tensor(z, requires_grad=True)
        with ad.Tape() as tape:
            y = activate(kind, x)
            w = np.zeros(z.size)
            w[i] = 1.0
            tape.backward(ad.total(ad.mul(y, w)))
        rows.append(x.grad.copy())
    return np.stack(rows)


def rel_err(a, b):
    """Block-normalised relative error: max |a - b| / max |b|."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))


def away_from_ties(rng, d, gap=1e-2):
    """Random vector whose pairs and signs sit at least ``gap`` from a kink."""
    while True:
        z = rng.standard_normal(d)
        if np.abs(z).min() > gap and np.abs(z[0::2] - z[1::2]).min() > gap:
            return z


def write_synthetic_run(root, name, t_cross, mp, L_max=32, T=2000):
    """Run directory whose readout q(t) = t / (2 t_cross) crosses 0.5 exactly at ``t_cross``."""
    run = Path(root) / name
    (run / "probe").mkdir(parents=True)
    (run / "record.json").write_text(json.dumps({"config": {"L_max": L_max}, "mp": mp}))
    rows = ["t,quantity,space,value"]
    for t in range(1, T + 1):
        q = t / (2 * t_cross)
        rows += [f"{t},R,readout,{q:.10g}", f"{t},M,readout,1", f"{t},q,readout,{q:.10g}", f"{t},q,latent,{q:.10g}"]
    (run / "probe" / "separation.csv").write_text("\n".join(rows) + "\n")
    return run
