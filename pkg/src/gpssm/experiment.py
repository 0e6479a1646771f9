"""Shared pieces of the kink study and the tiny-model bound check."""
from dataclasses import dataclass

import numpy as np

from gpssm.elbo import elbo
from gpssm.gauss import PsdMatrix, chol
from gpssm.kernels import RbfParams, kern_matrix
from gpssm.oracle import OracleConfig, log_marginal_quadrature
from gpssm.posterior import ChainParams, Variant, prssm_chain
from gpssm.sparse_gp import InducingPosterior
from gpssm.ssm import EmissionModel, ProcessNoise

DEFAULT_GRID = (-3.0, 1.2, 200)


def covered_mask(grid, X_true) -> np.ndarray:
    """Grid points inside the range of states that were actually transitioned from."""
    grid = np.asarray(grid, dtype=float).reshape(-1)
    src = np.asarray(X_true, dtype=float)[:-1].reshape(-1)
    return (grid >= src.min()) & (grid <= src.max())


def transition_metrics(mean, std, truth=None, mask=None) -> dict:
    """Band width (4 std, i.e. the full +-2 sd band), 2-sigma coverage and RMSE.

    Coverage and RMSE need ``truth``; they are ``None`` without it.
    """
    mean, std = np.asarray(mean).reshape(-1), np.asarray(std).reshape(-1)
    mask = np.ones(mean.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("no grid points inside the data-covered region")
    out = {"mean_band_width": float(np.mean(4.0 * std[mask])), "n_points": int(mask.sum())}
    if truth is None:
        out.update(coverage2sigma=None, rmse_vs_true=None)
    else:
        err = np.asarray(truth).reshape(-1)[mask] - mean[mask]
        out["coverage2sigma"] = float(np.mean(np.abs(err) <= 2.0 * std[mask]))
        out["rmse_vs_true"] = float(np.sqrt(np.mean(err**2)))
    return out


@dataclass
class BoundProblem:
    """A random 1-D, T = 2 model with everything needed for elbo and the oracle."""

    variant: Variant
    cp: ChainParams
    gp: InducingPosterior
    em: EmissionModel
    Q: ProcessNoise
    Y: np.ndarray
    oracle: OracleConfig

    def describe(self) -> dict:
        return {
            "variant": self.variant.value,
            "Y": self.Y.ravel().tolist(),
            "Q": self.oracle.Q,
            "R": self.oracle.R,
            "kernel_variance": self.oracle.variance,
            "lengthscale": self.oracle.lengthscale,
            "Z": np.asarray(self.gp.Z).ravel().tolist(),
        }


def random_bound_problem(rng: np.random.Generator, variant) -> BoundProblem:
    variant = Variant.parse(variant)
    var, ell = rng.uniform(0.3, 2.0), rng.uniform(0.4, 2.0)
    Qv, Rv = rng.uniform(0.01, 0.5), rng.uniform(0.05, 0.5)
    M = int(rng.integers(1, 4))
    kernel = RbfParams(np.array(var), np.array([ell]))
    Z = np.sort(rng.uniform(-2, 2, M))[:, None]
    Kzz = np.asarray(kern_matrix(Z, Z, kernel))
    L = np.asarray(chol(rng.uniform(0.05, 1.0) * Kzz + 1e-6 * np.eye(M)).factor)
    gp = InducingPosterior(Z, rng.normal(0, 1, (M, 1)), PsdMatrix(L[None]), kernel)
    Q = ProcessNoise.isotropic(1, Qv)
    Y = rng.normal(0, 1, (2, 1))
    # q(x) near the data keeps the bound from being trivially loose
    m1 = Y[0] / (1 + Rv) + rng.normal(0, 0.2, 1)
    P1 = PsdMatrix(np.array([[np.sqrt(rng.uniform(0.5, 2.0) * Rv / (1 + Rv))]]))
    if variant == Variant.PRSSM:
        cp = prssm_chain(2, Q.Q)._replace(m1=m1, P1=P1)
    else:
        cp = ChainParams(
            m1, P1, rng.normal(0, 0.3, (1, 1, 1)), Y[1:] + rng.normal(0, 0.2, (1, 1)),
            PsdMatrix(np.array([[[np.sqrt(rng.uniform(0.5, 2.0) * Rv)]]])),
        )
    return BoundProblem(variant, cp, gp, EmissionModel.identity(1, Rv), Q, Y,
                        OracleConfig(variance=var, lengthscale=ell, Q=Qv, R=Rv))


def bound_check(variants=tuple(Variant), n_configs: int = 20, n_samples: int = 10_000, seed: int = 0) -> list[dict]:
    """ELBO - 3 stderr against exact log p(Y) on random T = 2 models."""
    rows = []
    for vi, v in enumerate(variants):
        rng = np.random.default_rng([seed, vi])
        for i in range(n_configs):
            p = random_bound_problem(rng, v)
            est = elbo(p.variant, p.cp, p.gp, p.em, p.Q, p.Y, S=n_samples, seed=seed * 1000 + i)
            exact = log_marginal_quadrature(p.oracle, p.Y)
            lower = est.value - 3.0 * est.stderr
            rows.append({
                **p.describe(), "config": i, "elbo": est.value, "stderr": est.stderr,
                "log_evidence": exact, "violation": bool(lower > exact),
            })
    return rows
