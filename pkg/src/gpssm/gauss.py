"""Dense Gaussian primitives on lower-triangular factors.

Every covariance is carried as its Cholesky factor; dense inverses are never
formed. All functions are traceable by JAX so they can sit inside jitted,
differentiated objectives. Checks that need concrete values (symmetry,
factorization failure) only run eagerly.
"""
from typing import Callable, NamedTuple, Sequence

import jax
import jax.numpy as jnp
import numpy as np
from jax import lax
from jax.scipy.linalg import solve_triangular
from scipy import integrate

LOG_2PI = float(np.log(2.0 * np.pi))

JITTER_START = 1e-9
JITTER_MAX = 1e-3


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Cholesky factorization failed even at the maximum jitter."""


class NonConvergence(RuntimeError):
    """Adaptive quadrature exhausted its refinement budget."""


class PsdMatrix(NamedTuple):
    """Positive definite matrix stored by its lower Cholesky factor.

    ``factor`` may carry leading batch dimensions, in which case ``jitter``
    has matching batch shape.
    """

    factor: jax.Array
    jitter: jax.Array | float = 0.0

    @property
    def dim(self) -> int:
        return self.factor.shape[-1]

    @property
    def matrix(self) -> jax.Array:
        return self.factor @ jnp.swapaxes(self.factor, -1, -2)

    def logdet(self) -> jax.Array:
        return 2.0 * jnp.sum(jnp.log(jnp.diagonal(self.factor, axis1=-2, axis2=-1)), axis=-1)

    @classmethod
    def from_diag(cls, variances) -> "PsdMatrix":
        return cls(jnp.diag(jnp.sqrt(jnp.asarray(variances, dtype=float))))

    @classmethod
    def identity(cls, dim: int) -> "PsdMatrix":
        return cls(jnp.eye(dim))


class GaussianMoments(NamedTuple):
    mean: jax.Array
    cov: PsdMatrix


def _is_concrete(*arrays) -> bool:
    return not any(isinstance(a, jax.core.Tracer) for a in arrays)


def _escalated_jitter(matrix, jitter_start, jitter_max):
    # The jitter level is picked on a gradient-free copy; the factor below
    # stays differentiable in ``matrix``.
    m = lax.stop_gradient(matrix)
    n = m.shape[-1]
    eye = jnp.eye(n, dtype=m.dtype)
    scale = jnp.mean(jnp.diagonal(m))
    scale = jnp.where(scale > 0, scale, 1.0)

    def ok(j):
        return jnp.all(jnp.isfinite(jnp.linalg.cholesky(m + j * eye)))

    def cond(state):
        j, good = state
        return (~good) & (j < jitter_max * scale)

    def body(state):
        j, _ = state
        j = jnp.where(j == 0.0, jitter_start * scale, 10.0 * j)
        return j, ok(j)

    j, _ = lax.while_loop(cond, body, (jnp.zeros((), m.dtype), ok(jnp.zeros((), m.dtype))))
    return j


def chol(
    matrix,
    jitter_start: float = JITTER_START,
    jitter_max: float = JITTER_MAX,
) -> PsdMatrix:
    """Factor a symmetric matrix, adding diagonal jitter only when needed.

    No jitter is tried first. On failure the jitter starts at
    ``jitter_start`` times the mean diagonal and grows tenfold up to
    ``jitter_max`` times the mean diagonal. Leading batch dimensions are
    factored independently.
    """
    matrix = jnp.asarray(matrix, dtype=float)
    if matrix.ndim < 2 or matrix.shape[-1] != matrix.shape[-2]:
        raise ValueError(f"chol needs a square matrix, got shape {matrix.shape}")
    if _is_concrete(matrix):
        asym = float(jnp.max(jnp.abs(matrix - jnp.swapaxes(matrix, -1, -2)), initial=0.0))
        scale = float(jnp.max(jnp.abs(matrix), initial=0.0))
        if asym > 1e-8 * max(scale, 1e-300):
            raise ValueError(f"chol needs a symmetric matrix (asymmetry {asym:.3g})")

    sym = 0.5 * (matrix + jnp.swapaxes(matrix, -1, -2))

    def one(m):
        j = _escalated_jitter(m, jitter_start, jitter_max)
        return jnp.linalg.cholesky(m + j * jnp.eye(m.shape[-1], dtype=m.dtype)), j

    f = one
    for _ in range(sym.ndim - 2):
        f = jax.vmap(f)
    factor, jitter = f(sym)

    if _is_concrete(factor) and not bool(jnp.all(jnp.isfinite(factor))):
        raise NotPositiveDefinite(
            f"matrix of dim {sym.shape[-1]} is not positive definite at jitter "
            f"{jitter_max:g} x mean diagonal"
        )
    return PsdMatrix(factor, jitter)


def gauss_kl(q: GaussianMoments, p: GaussianMoments) -> jax.Array:
    """KL(q || p) between two multivariate normals."""
    k = q.cov.dim
    if p.cov.dim != k or q.mean.shape[-1] != k or p.mean.shape[-1] != k:
        raise ValueError("gauss_kl: dimension mismatch")
    lp = p.cov.factor
    a = solve_triangular(lp, q.cov.factor, lower=True)
    r = solve_triangular(lp, p.mean - q.mean, lower=True)
    return 0.5 * (jnp.sum(a * a) + jnp.sum(r * r) - k + p.cov.logdet() - q.cov.logdet())


def mvn_logpdf(x, g: GaussianMoments) -> jax.Array:
    x = jnp.asarray(x, dtype=float)
    if x.shape[-1] != g.cov.dim:
        raise ValueError("mvn_logpdf: dimension mismatch")
    r = solve_triangular(g.cov.factor, x - g.mean, lower=True)
    return -0.5 * (g.cov.dim * LOG_2PI + g.cov.logdet() + jnp.sum(r * r))


def mvn_transform(g: GaussianMoments, base_noise) -> jax.Array:
    """Reparameterized draw: mean + factor @ base_noise."""
    return g.mean + g.cov.factor @ jnp.asarray(base_noise, dtype=float)


def quad_1d(
    integrand: Callable[[float], float],
    interval: Sequence[float],
    tol: float = 1e-10,
    points: Sequence[float] | None = None,
    limit: int = 500,
) -> float:
    """Adaptive Gauss-Kronrod quadrature with an absolute error target."""
    lo, hi = interval
    value, err, info, *msg = integrate.quad(
        integrand, lo, hi, epsabs=tol, epsrel=0.0, limit=limit, points=points, full_output=1
    )
    if msg or err > tol:
        raise NonConvergence(f"quad_1d did not reach tol={tol:g} (estimated error {err:.3g})")
    return float(value)
