"""Inducing-point variational GP and the sequential full-GP conditioner.

Outputs are independent GPs that share one RBF kernel. The transition
function maps R^D to R^D, so ``mu_u`` is ``(M, D)`` and ``Sigma_u`` holds
one ``M x M`` factor per output dimension.
"""
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.linalg import solve_triangular

from gpssm.gauss import GaussianMoments, NotPositiveDefinite, PsdMatrix, _is_concrete, chol, gauss_kl
from gpssm.kernels import RbfParams, kern, kern_matrix

# Diagonal noise on sites added by the conditioner, relative to the signal variance.
COND_JITTER = 1e-8
MIN_SEPARATION = 1e-6


class InducingPosterior(NamedTuple):
    Z: jax.Array
    mu_u: jax.Array
    Sigma_u: PsdMatrix
    kernel: RbfParams
    # inducing-prior diagonal noise, relative to the signal variance
    jitter: jax.Array | float = 0.0

    @property
    def n_inducing(self) -> int:
        return self.Z.shape[0]

    @property
    def output_dim(self) -> int:
        return self.mu_u.shape[1]


def separate_inducing_inputs(Z, min_separation: float = MIN_SEPARATION):
    """Nudge duplicated inducing inputs apart along the first axis."""
    Z = np.array(Z, dtype=float, copy=True)
    for i in range(1, len(Z)):
        while np.min(np.max(np.abs(Z[:i] - Z[i]), axis=1)) < min_separation:
            Z[i, 0] += min_separation
    return Z


def kzz(q: InducingPosterior) -> PsdMatrix:
    K = kern_matrix(q.Z, q.Z, q.kernel)
    return chol(K + q.jitter * q.kernel.variance * jnp.eye(q.n_inducing))


class GPCache(NamedTuple):
    """Per-evaluation quantities shared by every test input."""

    Lzz: PsdMatrix
    beta: jax.Array  # Lzz^-1 mu_u, (M, D)
    G: jax.Array  # Lzz^-1 L_Sigma_d, (D, M, M)


def make_cache(q: InducingPosterior) -> GPCache:
    Lzz = kzz(q)
    beta = solve_triangular(Lzz.factor, q.mu_u, lower=True)
    G = jax.vmap(lambda L: solve_triangular(Lzz.factor, L, lower=True))(q.Sigma_u.factor)
    return GPCache(Lzz, beta, G)


def _whiten(q: InducingPosterior, cache: GPCache, x):
    kx = kern(q.Z, x, q.kernel)
    return solve_triangular(cache.Lzz.factor, kx, lower=True)


def marginal_stats(q: InducingPosterior, cache: GPCache, x):
    """Mean and per-output variance of q(f(x)) under the sparse posterior."""
    w = _whiten(q, cache, x)
    mean = w @ cache.beta
    gw = jnp.einsum("dmk,m->dk", cache.G, w)
    var = q.kernel.variance - w @ w + jnp.sum(gw * gw, axis=-1)
    return mean, jnp.maximum(var, 0.0)


def conditional_stats(q: InducingPosterior, cache: GPCache, gamma, x):
    """Mean and variance of f(x) | u, with ``gamma = Lzz^-1 u``."""
    w = _whiten(q, cache, x)
    var = jnp.maximum(q.kernel.variance - w @ w, 0.0)
    return w @ gamma, jnp.full((gamma.shape[1],), var)


def _diag_moments(mean, var) -> GaussianMoments:
    return GaussianMoments(mean, PsdMatrix(jnp.diag(jnp.sqrt(var))))


def predict_marginal(q: InducingPosterior, x) -> GaussianMoments:
    """q(f(x)) with mean K_xZ K_ZZ^-1 mu_u and the sparse marginal variance."""
    x = jnp.asarray(x, dtype=float)
    mean, var = marginal_stats(q, make_cache(q), x)
    return _diag_moments(mean, var)


def predict_marginal_batch(q: InducingPosterior, X):
    """Vectorised ``predict_marginal`` returning ``(mean, var)`` of shape ``(n, D)``."""
    cache = make_cache(q)
    X = jnp.atleast_2d(jnp.asarray(X, dtype=float))
    return jax.vmap(lambda x: marginal_stats(q, cache, x))(X)


def conditional_given_u(q: InducingPosterior, u, x) -> GaussianMoments:
    cache = make_cache(q)
    gamma = solve_triangular(cache.Lzz.factor, jnp.asarray(u, dtype=float), lower=True)
    mean, var = conditional_stats(q, cache, gamma, jnp.asarray(x, dtype=float))
    return _diag_moments(mean, var)


def sample_u(q: InducingPosterior, base_noise) -> jax.Array:
    noise = jnp.asarray(base_noise, dtype=float)
    return q.mu_u + jnp.einsum("dmk,kd->md", q.Sigma_u.factor, noise)


def kl_u(q: InducingPosterior, Lzz: PsdMatrix | None = None) -> jax.Array:
    """KL(q(u) || p(u)) summed over output dimensions, p(u) = N(0, K_ZZ)."""
    Lzz = kzz(q) if Lzz is None else Lzz
    prior = GaussianMoments(jnp.zeros(q.n_inducing), Lzz)
    kls = jax.vmap(lambda m, L: gauss_kl(GaussianMoments(m, PsdMatrix(L)), prior), in_axes=(1, 0))(
        q.mu_u, q.Sigma_u.factor
    )
    return jnp.sum(kls)


class SequentialConditioner(NamedTuple):
    """Growing set of (site, value) pairs with an incrementally grown factor.

    Arrays are preallocated to ``capacity`` rows; only the first ``size``
    rows are live. Rows past ``size`` are ignored, so a reset is just
    ``size = n_fixed``.
    """

    sites: jax.Array
    values: jax.Array
    factor: jax.Array
    whitened: jax.Array  # factor^-1 values
    size: jax.Array
    n_fixed: jax.Array
    kernel: RbfParams
    jitter: jax.Array

    @property
    def capacity(self) -> int:
        return self.sites.shape[0]


def cond_init(q: InducingPosterior, u, capacity: int | None = None, Lzz: PsdMatrix | None = None):
    """Seed a conditioner with sites Z and values u."""
    M, D = q.Z.shape
    capacity = M + 128 if capacity is None else capacity
    if capacity < M:
        raise ValueError("capacity must be at least the number of inducing points")
    Lzz = kzz(q) if Lzz is None else Lzz
    u = jnp.asarray(u, dtype=float)
    Dout = u.shape[1]
    factor = jnp.eye(capacity).at[:M, :M].set(Lzz.factor)
    whitened = jnp.zeros((capacity, Dout)).at[:M].set(solve_triangular(Lzz.factor, u, lower=True))
    return SequentialConditioner(
        sites=jnp.zeros((capacity, D)).at[:M].set(q.Z),
        values=jnp.zeros((capacity, Dout)).at[:M].set(u),
        factor=factor,
        whitened=whitened,
        size=jnp.asarray(M),
        n_fixed=jnp.asarray(M),
        kernel=q.kernel,
        jitter=jnp.maximum(Lzz.jitter, COND_JITTER * q.kernel.variance),
    )


def _grow(c: SequentialConditioner) -> SequentialConditioner:
    n, extra = c.capacity, max(c.capacity, 16)
    D, Dout = c.sites.shape[1], c.values.shape[1]
    return c._replace(
        sites=jnp.concatenate([c.sites, jnp.zeros((extra, D))]),
        values=jnp.concatenate([c.values, jnp.zeros((extra, Dout))]),
        factor=jnp.eye(n + extra).at[:n, :n].set(c.factor),
        whitened=jnp.concatenate([c.whitened, jnp.zeros((extra, Dout))]),
    )


def cond_extend(c: SequentialConditioner, x, base_noise):
    """Draw f(x) from the exact GP conditional on all live sites and append it.

    One triangular solve against the live factor, O(n^2) in the site count.
    """
    x = jnp.asarray(x, dtype=float)
    noise = jnp.asarray(base_noise, dtype=float)
    if _is_concrete(c.size) and int(c.size) >= c.capacity:
        c = _grow(c)
    n = c.size
    live = jnp.arange(c.capacity) < n
    kx = jnp.where(live, kern(c.sites, x, c.kernel), 0.0)
    v = jnp.where(live, solve_triangular(c.factor, kx, lower=True), 0.0)
    mean = v @ c.whitened
    s2 = c.kernel.variance + c.jitter - v @ v
    if _is_concrete(s2) and float(s2) <= 0.0:
        raise NotPositiveDefinite(f"conditional variance underflowed ({float(s2):.3g})")
    s = jnp.sqrt(jnp.maximum(s2, 1e-2 * c.jitter))
    f = mean + s * noise
    c = c._replace(
        sites=c.sites.at[n].set(x),
        values=c.values.at[n].set(f),
        factor=c.factor.at[n].set(v.at[n].set(s)),
        whitened=c.whitened.at[n].set(noise),
        size=n + 1,
    )
    return f, c


def cond_reset(c: SequentialConditioner) -> SequentialConditioner:
    """Drop every site appended since ``cond_init``; keeps (Z, u)."""
    return c._replace(size=c.n_fixed)
