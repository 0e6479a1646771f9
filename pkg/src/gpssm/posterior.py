"""Approximate posteriors over latent trajectories and their samplers.

Every variant draws ``x_{t+1}`` from ``N(A_t f_t + b_t, S_t*)`` where the
choice of ``f_t`` and ``S_t*`` defines the variant:

==========================  ==========================  ===========================
variant                     f_t                         S_t*
==========================  ==========================  ===========================
``factorised_linear``       x_t                         S_t
``factorised_nonlinear``    mean of q(f(x_t))           S_t + A_t C_f(x_t) A_t^T
``u_factorised``            mean of f(x_t) | u          S_t + A_t C_{f|u}(x_t) A_t^T
``non_factorised``          f(x_t), drawn sequentially  S_t
``prssm``                   f(x_t), drawn sequentially  Q (prior transition)
==========================  ==========================  ===========================

Chunk boundaries are handled uniformly: the state opening a chunk is a
"transition" with ``A = 0``, ``b = m_c`` and ``S = P_c``, so it ignores its
predecessor, and the sequential conditioner is reset to (Z, u) there.
"""
from dataclasses import dataclass
from enum import Enum
from functools import partial
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
from jax import lax
from jax.scipy.linalg import solve_triangular

from gpssm.gauss import GaussianMoments, PsdMatrix
from gpssm.sparse_gp import (
    GPCache,
    InducingPosterior,
    cond_extend,
    cond_init,
    cond_reset,
    conditional_stats,
    make_cache,
    marginal_stats,
    sample_u,
)


class Variant(str, Enum):
    FACTORISED_LINEAR = "factorised_linear"
    FACTORISED_NONLINEAR = "factorised_nonlinear"
    U_FACTORISED = "u_factorised"
    NON_FACTORISED = "non_factorised"
    PRSSM = "prssm"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"1": cls.FACTORISED_LINEAR, "2": cls.FACTORISED_NONLINEAR, "3": cls.U_FACTORISED,
                   "4": cls.NON_FACTORISED, "pr_ssm": cls.PRSSM}
        if key in aliases:
            return aliases[key]
        for v in cls:
            if key in (v.value, v.name.lower()):
                return v
        raise ValueError(f"unknown variant {value!r}; choose from {[v.value for v in cls]}")

    @property
    def sequential(self) -> bool:
        """Draws f(x_t) through the sequential full-GP conditioner."""
        return self in (Variant.NON_FACTORISED, Variant.PRSSM)

    @property
    def draws_u(self) -> bool:
        return self in (Variant.U_FACTORISED, Variant.NON_FACTORISED, Variant.PRSSM)


class ChainParams(NamedTuple):
    """Moments of q(x_1) and the per-step free parameters A_t, b_t, S_t."""

    m1: jax.Array
    P1: PsdMatrix
    A: jax.Array  # (T-1, D, D)
    b: jax.Array  # (T-1, D)
    S: PsdMatrix  # factor (T-1, D, D)

    @property
    def T(self) -> int:
        return self.A.shape[0] + 1

    @property
    def dim(self) -> int:
        return self.m1.shape[0]


def prssm_chain(T: int, Q) -> ChainParams:
    """Chain whose transitions are the prior ones, N(f(x_t), Q).

    Use with ``Variant.PRSSM``, which ignores A, b, S apart from chunk
    openings and always reads Q from the model.
    """
    LQ = jnp.asarray(Q.factor if isinstance(Q, PsdMatrix) else Q.Q.factor)
    D = LQ.shape[0]
    return ChainParams(
        m1=jnp.zeros(D),
        P1=PsdMatrix.identity(D),
        A=jnp.tile(jnp.eye(D), (T - 1, 1, 1)),
        b=jnp.zeros((T - 1, D)),
        S=PsdMatrix(jnp.tile(LQ, (T - 1, 1, 1))),
    )


@dataclass
class ChunkScheme:
    """Partition of 0..T-1 into chunks with explicit opening marginals.

    ``starts`` are zero-based chunk start indices beginning with 0.
    ``init_mean``/``init_cov`` hold q(x_start) for every chunk after the
    first; the first chunk opens with q(x_1) from the chain.
    """

    starts: tuple
    T: int
    init_mean: jax.Array
    init_cov: PsdMatrix

    def __post_init__(self):
        self.starts = tuple(int(s) for s in self.starts)
        s = self.starts
        if not s or s[0] != 0 or any(b <= a for a, b in zip(s, s[1:])) or s[-1] >= self.T:
            raise ValueError(f"invalid chunk starts {s} for T={self.T}")
        if np.shape(self.init_mean)[0] != len(s) - 1:
            raise ValueError("need one opening marginal per chunk after the first")

    @classmethod
    def uniform(cls, T: int, tau: int, init_mean=None, init_cov=None, dim: int = 1) -> "ChunkScheme":
        if tau < 1:
            raise ValueError("chunk length must be >= 1")
        starts = tuple(range(0, T, tau))
        n = len(starts) - 1
        if init_mean is None:
            init_mean = jnp.zeros((n, dim))
        if init_cov is None:
            init_cov = PsdMatrix(jnp.tile(jnp.eye(dim), (n, 1, 1)))
        return cls(starts, T, jnp.asarray(init_mean, dtype=float).reshape(n, dim), init_cov)

    @classmethod
    def single(cls, T: int, dim: int = 1) -> "ChunkScheme":
        return cls.uniform(T, T, dim=dim)

    @property
    def n_chunks(self) -> int:
        return len(self.starts)

    @property
    def bounds(self) -> list[tuple[int, int]]:
        ends = self.starts[1:] + (self.T,)
        return list(zip(self.starts, ends))

    @property
    def lengths(self) -> list[int]:
        return [b - a for a, b in self.bounds]

    @property
    def max_length(self) -> int:
        return max(self.lengths)

    def start_mask(self) -> np.ndarray:
        m = np.zeros(self.T, dtype=bool)
        m[list(self.starts)] = True
        return m

    def capacity(self, n_inducing: int, retain_sites: bool = False, plan_length: int = 0) -> int:
        """Conditioner rows needed: one per visited step on top of Z."""
        return n_inducing + (max(self.T, plan_length) if retain_sites else self.max_length)

    def plan(self, chunks=None) -> "Plan":
        """Visiting order for the given chunk subset (all chunks by default).

        Subsets are padded to ``k * max_length`` steps; padding steps are
        flagged invalid and marked as chunk openings so they never grow
        the conditioner.
        """
        if chunks is None:
            times = np.arange(self.T)
            return Plan(times, self.start_mask(), np.ones(self.T, dtype=bool))
        chunks = sorted(int(c) for c in chunks)
        if not chunks or chunks[0] < 0 or chunks[-1] >= self.n_chunks or len(set(chunks)) != len(chunks):
            raise ValueError(f"invalid chunk subset {chunks}")
        times, starts = [], []
        for c in chunks:
            a, b = self.bounds[c]
            times.extend(range(a, b))
            starts.extend([True] + [False] * (b - a - 1))
        valid = [True] * len(times)
        pad = len(chunks) * self.max_length - len(times)
        times.extend([0] * pad)
        starts.extend([True] * pad)
        valid.extend([False] * pad)
        return Plan(np.array(times), np.array(starts), np.array(valid))


class Plan(NamedTuple):
    times: np.ndarray
    starts: np.ndarray
    valid: np.ndarray


class TrajectorySample(NamedTuple):
    """Draws of one or many trajectories (leading sample axis when batched).

    ``f_mean``/``f_var`` describe f(x_t) as the variant sees it: a draw
    with zero variance for the sequential variants, Gaussian moments for the
    factorised ones.
    """

    x: jax.Array
    f_mean: jax.Array
    f_var: jax.Array
    u: jax.Array | None
    times: jax.Array
    valid: jax.Array
    base_noises: dict
    scale: float = 1.0


def draw_base_noises(key, T: int, D: int, M: int, n_samples: int | None = None) -> dict:
    """Standard-normal inputs for reparameterized sampling.

    Sample ``s`` uses ``fold_in(key, s)`` so its noise does not depend on how
    many samples are drawn alongside it.
    """
    def one(k):
        kx, kf, ku = jax.random.split(k, 3)
        return {
            "x": jax.random.normal(kx, (T, D)),
            "f": jax.random.normal(kf, (T, D)),
            "u": jax.random.normal(ku, (M, D)),
        }

    if n_samples is None:
        return one(key)
    keys = jax.vmap(lambda s: jax.random.fold_in(key, s))(jnp.arange(n_samples))
    return jax.vmap(one)(keys)


def _as_key(seed):
    if isinstance(seed, jax.Array) and jnp.issubdtype(seed.dtype, jax.dtypes.prng_key):
        return seed
    if isinstance(seed, jax.Array) and seed.dtype == jnp.uint32:
        return seed
    return jax.random.PRNGKey(0 if seed is None else int(seed))


def effective_chain(variant: Variant, cp: ChainParams, LQ, scheme: ChunkScheme | None = None):
    """Parameters of the factor that generates x_t, indexed by t = 0..T-1.

    Row 0 is q(x_1) written as a transition with A = 0; chunk openings are
    overwritten the same way with their own marginals.
    """
    D = cp.dim
    T = cp.T
    if variant == Variant.PRSSM:
        A = jnp.tile(jnp.eye(D), (T - 1, 1, 1))
        b = jnp.zeros((T - 1, D))
        L = jnp.tile(LQ, (T - 1, 1, 1))
    else:
        A, b, L = cp.A, cp.b, cp.S.factor
    A = jnp.concatenate([jnp.zeros((1, D, D)), A])
    b = jnp.concatenate([cp.m1[None], b])
    L = jnp.concatenate([cp.P1.factor[None], L])
    if scheme is not None and scheme.n_chunks > 1:
        idx = np.array(scheme.starts[1:])
        A = A.at[idx].set(0.0)
        b = b.at[idx].set(scheme.init_mean)
        L = L.at[idx].set(scheme.init_cov.factor)
    return A, b, L


def _combined_factor(L, A, V):
    cov = L @ L.T + (A * V) @ A.T
    return jnp.linalg.cholesky(0.5 * (cov + cov.T))


def _rollout(variant, capacity, reset, plan, eff, gp, cache, noises):
    """Sample one trajectory along ``plan``; returns per-step x, f-mean, f-var, u."""
    A_in, b_in, L_in = eff
    times, starts, valid = plan
    D = b_in.shape[1]
    u = sample_u(gp, noises["u"]) if variant.draws_u else None
    gamma = solve_triangular(cache.Lzz.factor, u, lower=True) if variant == Variant.U_FACTORISED else None
    cond = cond_init(gp, u, capacity, cache.Lzz) if variant.sequential else None

    def step(carry, inp):
        x_prev, m_prev, v_prev, c = carry
        t, start = inp
        A, b, L = A_in[t], b_in[t], L_in[t]
        if variant == Variant.FACTORISED_LINEAR:
            mean, Lc = A @ x_prev + b, L
        elif variant in (Variant.FACTORISED_NONLINEAR, Variant.U_FACTORISED):
            mean, Lc = A @ m_prev + b, _combined_factor(L, A, v_prev)
        else:
            mean, Lc = A @ m_prev + b, L
        x = mean + Lc @ noises["x"][t]
        if variant in (Variant.FACTORISED_LINEAR, Variant.FACTORISED_NONLINEAR):
            m, v = marginal_stats(gp, cache, x)
        elif variant == Variant.U_FACTORISED:
            m, v = conditional_stats(gp, cache, gamma, x)
        else:
            if reset:
                c = jax.tree_util.tree_map(lambda r, k: jnp.where(start, r, k), cond_reset(c), c)
            m, c = cond_extend(c, x, noises["f"][t])
            v = jnp.zeros(D)
        return (x, m, v, c), (x, m, v)

    zeros = jnp.zeros(D)
    _, (xs, ms, vs) = lax.scan(step, (zeros, zeros, zeros, cond), (times, starts))
    return xs, ms, vs, u


@partial(jax.jit, static_argnames=("variant", "capacity", "reset"))
def rollout_batch(variant, capacity, reset, plan, eff, gp, noises):
    """Jitted, vmapped sampler over the leading axis of ``noises``."""
    cache = make_cache(gp)
    return jax.vmap(lambda nz: _rollout(variant, capacity, reset, plan, eff, gp, cache, nz))(noises)


def _moments_from_rows(variant, A, b, L, x, m, v):
    if variant == Variant.FACTORISED_LINEAR:
        return A @ x + b, L
    if variant in (Variant.FACTORISED_NONLINEAR, Variant.U_FACTORISED):
        return A @ m + b, _combined_factor(L, A, v)
    return A @ m + b, L


def transition_moments(variant, t: int, x_t, cp: ChainParams, gp: InducingPosterior, Q=None, u=None, f=None):
    """q(x_{t+1} | ...) for zero-based step ``t`` of the chain.

    ``u`` is required by ``u_factorised``; ``f`` (the draw of f(x_t)) by the
    sequential variants; ``Q`` by ``prssm``.
    """
    variant = Variant.parse(variant)
    x_t = jnp.asarray(x_t, dtype=float)
    if variant == Variant.U_FACTORISED and u is None:
        raise ValueError("u_factorised transitions need the inducing draw u")
    if variant.sequential and f is None:
        raise ValueError(f"{variant.value} transitions need the function draw f(x_t)")
    if variant == Variant.PRSSM:
        if Q is None:
            raise ValueError("prssm transitions need the process noise Q")
        LQ = Q.factor if isinstance(Q, PsdMatrix) else Q.Q.factor
        return GaussianMoments(jnp.asarray(f, dtype=float), PsdMatrix(jnp.asarray(LQ)))
    A, b, L = cp.A[t], cp.b[t], cp.S.factor[t]
    m = v = None
    if variant in (Variant.FACTORISED_LINEAR, Variant.FACTORISED_NONLINEAR):
        m, v = marginal_stats(gp, make_cache(gp), x_t)
    elif variant == Variant.U_FACTORISED:
        cache = make_cache(gp)
        gamma = solve_triangular(cache.Lzz.factor, jnp.asarray(u, dtype=float), lower=True)
        m, v = conditional_stats(gp, cache, gamma, x_t)
    else:
        m = jnp.asarray(f, dtype=float)
    mean, Lc = _moments_from_rows(variant, A, b, L, x_t, m, v)
    return GaussianMoments(mean, PsdMatrix(Lc))


def _noises_for(base_noises, seed, T, D, M, n_samples):
    if base_noises is None:
        base_noises = draw_base_noises(_as_key(seed), T, D, M, n_samples)
    nz = {k: jnp.asarray(v, dtype=float) for k, v in base_noises.items()}
    single = nz["x"].ndim == 2
    if single:
        nz = jax.tree_util.tree_map(lambda a: a[None], nz)
    return nz, single


def _process_factor(variant, Q, D):
    if Q is None:
        if variant == Variant.PRSSM:
            raise ValueError("prssm sampling needs the process noise Q")
        return jnp.eye(D)
    return jnp.asarray(Q.factor if isinstance(Q, PsdMatrix) else Q.Q.factor, dtype=float)


def sampler_args(variant, cp, gp, scheme, plan, noises, Q=None, retain_sites=False) -> tuple:
    """Positional arguments of ``rollout_batch`` for a prepared plan and noise batch."""
    LQ = _process_factor(variant, Q, cp.dim)
    eff = effective_chain(variant, cp, LQ, scheme)
    capacity = scheme.capacity(gp.n_inducing, retain_sites, len(plan.times))
    plan_j = tuple(jnp.asarray(a) for a in plan)
    return variant, capacity, not retain_sites, plan_j, eff, gp, noises


def sample_chunked(
    variant,
    cp: ChainParams,
    gp: InducingPosterior,
    scheme: ChunkScheme,
    base_noises: dict | None = None,
    seed=0,
    Q=None,
    chunks=None,
    minibatch: int | None = None,
    n_samples: int | None = None,
    retain_sites: bool = False,
) -> TrajectorySample:
    """Sample along a chunk scheme, optionally over a subset of chunks.

    ``chunks`` selects chunk indices explicitly; ``minibatch=k`` draws k
    chunks uniformly without replacement from ``seed``. The returned
    ``scale`` (total chunks / sampled chunks) reweights per-chunk sums.
    ``retain_sites`` keeps conditioner sites across chunk boundaries.
    """
    variant = Variant.parse(variant)
    if scheme.T != cp.T:
        raise ValueError(f"scheme covers T={scheme.T} but the chain has T={cp.T}")
    if minibatch is not None:
        if chunks is not None:
            raise ValueError("pass either chunks or minibatch, not both")
        rng = np.random.default_rng(None if seed is None else int(seed))
        chunks = sorted(rng.choice(scheme.n_chunks, size=minibatch, replace=False).tolist())
    n_sel = scheme.n_chunks if chunks is None else len(chunks)
    plan = scheme.plan(None if chunks is None or n_sel == scheme.n_chunks else chunks)
    noises, single = _noises_for(base_noises, seed, cp.T, cp.dim, gp.n_inducing, n_samples)
    args = sampler_args(variant, cp, gp, scheme, plan, noises, Q, retain_sites)
    xs, ms, vs, u = rollout_batch(*args)
    sample = TrajectorySample(
        x=xs, f_mean=ms, f_var=vs, u=u,
        times=jnp.asarray(plan.times), valid=jnp.asarray(plan.valid),
        base_noises=noises, scale=scheme.n_chunks / n_sel,
    )
    if single:
        sample = sample._replace(
            x=xs[0], f_mean=ms[0], f_var=vs[0], u=None if u is None else u[0],
            base_noises=jax.tree_util.tree_map(lambda a: a[0], noises),
        )
    return sample


def sample_trajectory(
    variant,
    cp: ChainParams,
    gp: InducingPosterior,
    T: int | None = None,
    base_noises: dict | None = None,
    seed=0,
    Q=None,
    n_samples: int | None = None,
) -> TrajectorySample:
    """Forward-sample q(X | f) in one piece.

    All randomness enters through ``base_noises`` (drawn from ``seed`` when
    omitted), so the result is a deterministic, differentiable function of
    the variational parameters.
    """
    if T is not None and T != cp.T:
        raise ValueError(f"chain parameters are sized for T={cp.T}, got T={T}")
    return sample_chunked(variant, cp, gp, ChunkScheme.single(cp.T, cp.dim), base_noises, seed, Q,
                          n_samples=n_samples)


def linear_chain_marginals(cp: ChainParams):
    """Exact q(x_t) moments of the factorised-linear chain (no chunking)."""
    def step(carry, inp):
        m, P = carry
        A, b, L = inp
        m, P = A @ m + b, A @ P @ A.T + L @ L.T
        return (m, P), (m, P)

    P1 = cp.P1.matrix
    _, (ms, Ps) = lax.scan(step, (cp.m1, P1), (cp.A, cp.b, cp.S.factor))
    return jnp.concatenate([cp.m1[None], ms]), jnp.concatenate([P1[None], Ps])
