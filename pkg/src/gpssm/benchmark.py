"""Wall-clock scaling of trajectory sampling with sequence length."""
import time
from dataclasses import dataclass

import jax
import numpy as np

from gpssm.gauss import PsdMatrix, chol
from gpssm.kernels import RbfParams, kern_matrix
from gpssm.posterior import ChainParams, ChunkScheme, Variant, draw_base_noises, rollout_batch, sampler_args
from gpssm.sparse_gp import InducingPosterior
from gpssm.ssm import ProcessNoise

DEFAULT_LENGTHS = (50, 100, 200, 400)


@dataclass(frozen=True)
class BenchRow:
    variant: str
    T: int
    tau: int | None
    median_seconds: float


def _problem(T: int, M: int, seed: int):
    rng = np.random.default_rng(seed)
    kernel = RbfParams.default(1)
    Z = np.linspace(-2.0, 2.0, M)[:, None]
    Kzz = np.asarray(kern_matrix(Z, Z, kernel)) + 1e-6 * np.eye(M)
    L = np.asarray(chol(0.01 * Kzz).factor)[None]
    gp = InducingPosterior(Z, rng.standard_normal((M, 1)), PsdMatrix(L), kernel)
    cp = ChainParams(
        np.zeros(1), PsdMatrix.identity(1),
        0.5 * np.ones((T - 1, 1, 1)), 0.1 * rng.standard_normal((T - 1, 1)),
        PsdMatrix(np.full((T - 1, 1, 1), 0.3)),
    )
    return cp, gp, ProcessNoise.isotropic(1, 0.01)


def time_sampling(
    variant, T: int, tau: int | None = None, M: int = 20, repeats: int = 20, seed: int = 0, n_samples: int = 16
) -> float:
    """Median seconds for one compiled draw of ``n_samples`` trajectories.

    Inputs are prepared once, so the per-call Python setup (constant in T)
    does not flatten the measured scaling.
    """
    variant = Variant.parse(variant)
    cp, gp, Q = _problem(T, M, seed)
    scheme = ChunkScheme.single(T, 1) if tau is None else ChunkScheme.uniform(T, tau, dim=1)
    noises = draw_base_noises(jax.random.PRNGKey(seed), T, 1, M, n_samples)
    args = sampler_args(variant, cp, gp, scheme, scheme.plan(), noises, Q)

    def run():
        jax.block_until_ready(rollout_batch(*args))

    run()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def loglog_slope(lengths, seconds) -> float:
    """Least-squares slope of log(seconds) against log(T)."""
    return float(np.polyfit(np.log(lengths), np.log(seconds), 1)[0])


def run_benchmark(
    variants=tuple(Variant)[:4],
    lengths=DEFAULT_LENGTHS,
    taus=(None,),
    M: int = 20,
    repeats: int = 20,
    seed: int = 0,
    n_samples: int = 16,
) -> list[BenchRow]:
    rows = []
    for v in variants:
        v = Variant.parse(v)
        for tau in taus:
            for T in lengths:
                rows.append(BenchRow(v.value, T, tau, time_sampling(v, T, tau, M, repeats, seed, n_samples)))
    return rows


def slopes(rows: list[BenchRow]) -> dict[tuple[str, int | None], float]:
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.variant, r.tau), []).append((r.T, r.median_seconds))
    return {k: loglog_slope(*zip(*sorted(v))) for k, v in groups.items()}
