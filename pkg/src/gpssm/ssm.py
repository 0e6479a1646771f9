"""Generative state-space model, the kink benchmark, and dataset files."""
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import jax
import numpy as np

from gpssm.gauss import PsdMatrix

KINK_T = 50
KINK_PROCESS_VAR = 0.01
KINK_EMISSION_VAR = 0.1


class EmissionModel(NamedTuple):
    """y_t | x_t ~ N(C x_t + d, R)."""

    C: jax.Array
    d: jax.Array
    R: PsdMatrix

    @classmethod
    def identity(cls, dim: int, variance: float) -> "EmissionModel":
        return cls(np.eye(dim), np.zeros(dim), PsdMatrix.from_diag(np.full(dim, variance)))


class ProcessNoise(NamedTuple):
    Q: PsdMatrix

    @classmethod
    def isotropic(cls, dim: int, variance: float) -> "ProcessNoise":
        return cls(PsdMatrix.from_diag(np.full(dim, variance)))


@dataclass
class Dataset:
    Y: np.ndarray
    X_true: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        if self.Y.shape[0] < 2:
            raise ValueError("a dataset needs at least two time steps")
        if self.X_true is not None:
            self.X_true = np.asarray(self.X_true, dtype=float).reshape(self.Y.shape[0], -1)

    @property
    def T(self) -> int:
        return self.Y.shape[0]

    def save(self, csv_path) -> tuple[Path, Path]:
        """Write ``t,y_0..,x_0..`` rows plus a JSON sidecar next to the CSV."""
        csv_path = Path(csv_path)
        E = self.Y.shape[1]
        D = 0 if self.X_true is None else self.X_true.shape[1]
        header = ["t"] + [f"y_{e}" for e in range(E)] + [f"x_{d}" for d in range(D)]
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for t in range(self.T):
                row = list(self.Y[t]) + ([] if D == 0 else list(self.X_true[t]))
                w.writerow([t] + [repr(float(v)) for v in row])
        meta_path = csv_path.with_suffix(".json")
        meta_path.write_text(json.dumps(self.meta, indent=2, sort_keys=True) + "\n")
        return csv_path, meta_path

    @classmethod
    def load(cls, csv_path) -> "Dataset":
        csv_path = Path(csv_path)
        with open(csv_path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=float)
        ycols = [i for i, h in enumerate(header) if h.startswith("y_")]
        xcols = [i for i, h in enumerate(header) if h.startswith("x_")]
        meta_path = csv_path.with_suffix(".json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return cls(body[:, ycols], body[:, xcols] if xcols else None, meta)


def kink(x):
    """Kink transition: 0.8 + (x + 0.2) * (1 - 5 / (1 + exp(-2x)))."""
    x = np.asarray(x, dtype=float)
    return 0.8 + (x + 0.2) * (1.0 - 5.0 / (1.0 + np.exp(-2.0 * x)))


def simulate(
    f: Callable[[np.ndarray], np.ndarray],
    T: int,
    q: ProcessNoise,
    em: EmissionModel,
    seed: int | None = None,
) -> Dataset:
    """Ancestral sampling: x_1 ~ N(0, I), x_{t+1} ~ N(f(x_t), Q), y_t ~ N(C x_t + d, R)."""
    if T < 2:
        raise ValueError("T must be at least 2")
    rng = np.random.default_rng(seed)
    LQ = np.asarray(q.Q.factor, dtype=float)
    C, d = np.asarray(em.C, dtype=float), np.asarray(em.d, dtype=float)
    LR = np.asarray(em.R.factor, dtype=float)
    D, E = LQ.shape[0], C.shape[0]
    X = np.empty((T, D))
    X[0] = rng.standard_normal(D)
    for t in range(T - 1):
        X[t + 1] = np.reshape(f(X[t]), D) + LQ @ rng.standard_normal(D)
    Y = X @ C.T + d + rng.standard_normal((T, E)) @ LR.T
    meta = {"seed": seed, "T": T, "Q": (LQ @ LQ.T).tolist(), "R": (LR @ LR.T).tolist()}
    return Dataset(Y, X, meta)


def make_kink_dataset(seed: int = 0, T: int = KINK_T) -> Dataset:
    """The 1-D kink benchmark: T = 50, Q = 0.01, R = 0.1, identity emission."""
    ds = simulate(
        kink,
        T,
        ProcessNoise.isotropic(1, KINK_PROCESS_VAR),
        EmissionModel.identity(1, KINK_EMISSION_VAR),
        seed,
    )
    ds.meta.update({"Q": KINK_PROCESS_VAR, "R": KINK_EMISSION_VAR, "C": 1.0, "d": 0.0, "generator": "kink"})
    return ds
