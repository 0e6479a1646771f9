"""Monte Carlo evidence lower bound with a per-term breakdown.

    ELBO = sum_t E[log p(y_t | x_t)] - KL[q(u) || p(u)] - KL[q(x_1) || p(x_1)]
           - sum_t E[KL[q(x_{t+1} | f, x_t) || p(x_{t+1} | f, x_t)]]

For the variants whose transition depends on f only through Gaussian
moments ``(m, V)`` of f(x_t), the inner expectation over f is closed form:

    E_{f ~ N(m, V)} KL[N(a, S) || N(f, Q)] = KL[N(a, S) || N(m, Q)] + tr(Q^-1 V) / 2
"""
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from gpssm.gauss import LOG_2PI, GaussianMoments, PsdMatrix, gauss_kl
from gpssm.posterior import (
    ChainParams,
    ChunkScheme,
    TrajectorySample,
    Variant,
    _as_key,
    _moments_from_rows,
    _process_factor,
    _rollout,
    draw_base_noises,
    effective_chain,
)
from gpssm.sparse_gp import InducingPosterior, kl_u, make_cache
from gpssm.ssm import EmissionModel


@dataclass(frozen=True)
class ElboEstimate:
    loglik: float
    kl_u: float
    kl_x1: float
    transition_kl: float
    stderr: float
    n_samples: int
    minibatch_scale: float = 1.0
    value: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "value", self.loglik - self.kl_u - self.kl_x1 - self.transition_kl)

    def as_dict(self) -> dict:
        return {
            "elbo": self.value,
            "loglik": self.loglik,
            "kl_u": self.kl_u,
            "kl_x1": self.kl_x1,
            "trans_kl": self.transition_kl,
            "stderr": self.stderr,
            "n_samples": self.n_samples,
            "minibatch_scale": self.minibatch_scale,
        }


def _step_loglik(em: EmissionModel, y, x):
    r = jax.scipy.linalg.solve_triangular(em.R.factor, y - em.C @ x - em.d, lower=True)
    return -0.5 * (y.shape[0] * LOG_2PI + em.R.logdet() + r @ r)


def expected_kl_to_noisy_f(q: GaussianMoments, f_mean, f_var, LQ) -> jax.Array:
    """E_{f ~ N(f_mean, diag f_var)} KL[q || N(f, Q)] in closed form; ``LQ`` is chol(Q)."""
    kl = gauss_kl(q, GaussianMoments(f_mean, PsdMatrix(LQ)))
    Qinv_diag = jnp.sum(jax.scipy.linalg.solve_triangular(LQ, jnp.eye(LQ.shape[0]), lower=True) ** 2, axis=0)
    return kl + 0.5 * jnp.sum(Qinv_diag * f_var)


def _step_transition_kl(variant, eff, LQ, x, m, v, nxt):
    A_in, b_in, L_in = eff
    a, Lc = _moments_from_rows(variant, A_in[nxt], b_in[nxt], L_in[nxt], x, m, v)
    return expected_kl_to_noisy_f(GaussianMoments(a, PsdMatrix(Lc)), m, v, LQ)


def _sample_terms(variant, T, eff, start_mask, em, LQ, Y, x, m, v, times, valid):
    """Summed log-likelihood and transition KL of one trajectory draw."""
    ll = jax.vmap(lambda t, xt: _step_loglik(em, Y[t], xt))(times, x)
    ll = jnp.sum(jnp.where(valid, ll, 0.0))
    nxt = jnp.minimum(times + 1, T - 1)
    kl = jax.vmap(lambda xt, mt, vt, n: _step_transition_kl(variant, eff, LQ, xt, mt, vt, n))(x, m, v, nxt)
    mask = valid & (times < T - 1)
    if variant == Variant.PRSSM:
        # q-transitions equal the prior except where a chunk opens
        mask = mask & start_mask[nxt]
    kl = jnp.sum(jnp.where(mask, kl, 0.0))
    return ll, kl


def elbo_terms(variant, capacity, reset, plan, eff, start_mask, gp, em, LQ, Y, noises):
    """Per-sample (loglik, transition KL) arrays plus the global KL terms.

    Traceable; ``variant``, ``capacity`` and ``reset`` must be static.
    """
    T = Y.shape[0]
    cache = make_cache(gp)
    times, _, valid = plan

    def one(nz):
        x, m, v, _ = _rollout(variant, capacity, reset, plan, eff, gp, cache, nz)
        return _sample_terms(variant, T, eff, start_mask, em, LQ, Y, x, m, v, times, valid)

    ll, tr = jax.vmap(one)(noises)
    _, m1, L1 = eff[0][0], eff[1][0], eff[2][0]
    D = m1.shape[0]
    kl_x1 = gauss_kl(GaussianMoments(m1, PsdMatrix(L1)), GaussianMoments(jnp.zeros(D), PsdMatrix(jnp.eye(D))))
    return ll, tr, kl_u(gp, cache.Lzz), kl_x1


_elbo_terms_jit = jax.jit(elbo_terms, static_argnames=("variant", "capacity", "reset"))


def estimate_from_terms(ll, tr, klu, klx1, scale: float = 1.0) -> ElboEstimate:
    ll = np.asarray(ll, dtype=float)
    tr = np.asarray(tr, dtype=float)
    S = ll.shape[0]
    per_sample = scale * (ll - tr)
    stderr = float(np.std(per_sample, ddof=1) / np.sqrt(S)) if S > 1 else 0.0
    return ElboEstimate(
        loglik=float(scale * np.mean(ll)),
        kl_u=float(klu),
        kl_x1=float(klx1),
        transition_kl=float(scale * np.mean(tr)),
        stderr=stderr,
        n_samples=S,
        minibatch_scale=float(scale),
    )


def _em_arrays(em: EmissionModel) -> EmissionModel:
    return EmissionModel(jnp.asarray(em.C, dtype=float), jnp.asarray(em.d, dtype=float),
                         PsdMatrix(jnp.asarray(em.R.factor, dtype=float)))


def elbo(
    variant,
    cp: ChainParams,
    gp: InducingPosterior,
    em: EmissionModel,
    Q,
    Y,
    S: int = 10,
    scheme: ChunkScheme | None = None,
    minibatch: int | None = None,
    chunks=None,
    seed=0,
    base_noises: dict | None = None,
    retain_sites: bool = False,
) -> ElboEstimate:
    """Reparameterized Monte Carlo estimate of the bound from S trajectories.

    With a chunk subset (``chunks`` or ``minibatch=k``) the per-chunk
    log-likelihood and transition-KL sums are scaled by n_chunks / k; the
    two global KL terms are never scaled.
    """
    variant = Variant.parse(variant)
    Y = jnp.atleast_2d(jnp.asarray(Y, dtype=float))
    T, D, M = cp.T, cp.dim, gp.n_inducing
    if Y.shape[0] != T:
        raise ValueError(f"Y has {Y.shape[0]} rows but the chain has T={T}")
    if S < 1:
        raise ValueError("S must be >= 1")
    scheme = ChunkScheme.single(T, D) if scheme is None else scheme
    if minibatch is not None:
        if chunks is not None:
            raise ValueError("pass either chunks or minibatch, not both")
        rng = np.random.default_rng(None if seed is None else int(seed))
        chunks = sorted(rng.choice(scheme.n_chunks, size=minibatch, replace=False).tolist())
    if chunks is not None and len(chunks) == scheme.n_chunks:
        chunks = None
    n_sel = scheme.n_chunks if chunks is None else len(chunks)
    plan = scheme.plan(chunks)
    LQ = _process_factor(variant, Q, D)
    eff = effective_chain(variant, cp, LQ, scheme)
    if base_noises is None:
        noises = draw_base_noises(_as_key(seed), T, D, M, S)
    else:
        noises = {k: jnp.asarray(v, dtype=float) for k, v in base_noises.items()}
        if noises["x"].ndim == 2:
            noises = jax.tree_util.tree_map(lambda a: a[None], noises)
    ll, tr, klu, klx1 = _elbo_terms_jit(
        variant, scheme.capacity(M, retain_sites, len(plan.times)), not retain_sites,
        tuple(jnp.asarray(a) for a in plan), eff, jnp.asarray(scheme.start_mask()),
        gp, _em_arrays(em), LQ, Y, noises,
    )
    return estimate_from_terms(ll, tr, klu, klx1, scheme.n_chunks / n_sel)


def _batched(samples: TrajectorySample) -> TrajectorySample:
    if samples.x.ndim == 2:
        return samples._replace(
            x=samples.x[None], f_mean=samples.f_mean[None], f_var=samples.f_var[None],
        )
    return samples


def expected_loglik(samples: TrajectorySample, em: EmissionModel, Y) -> float:
    """Average over draws of sum_t log N(y_t; C x_t + d, R), scaled for minibatches."""
    s = _batched(samples)
    Y = jnp.atleast_2d(jnp.asarray(Y, dtype=float))
    em = _em_arrays(em)

    def one(x):
        ll = jax.vmap(lambda t, xt: _step_loglik(em, Y[t], xt))(s.times, x)
        return jnp.sum(jnp.where(s.valid, ll, 0.0))

    return float(samples.scale * jnp.mean(jax.vmap(one)(s.x)))


def expected_transition_kl(
    variant,
    samples: TrajectorySample,
    cp: ChainParams,
    gp: InducingPosterior,
    Q,
    scheme: ChunkScheme | None = None,
) -> float:
    """Average over draws of the summed transition KL terms."""
    variant = Variant.parse(variant)
    s = _batched(samples)
    T, D = cp.T, cp.dim
    scheme = ChunkScheme.single(T, D) if scheme is None else scheme
    LQ = _process_factor(variant, Q, D)
    eff = effective_chain(variant, cp, LQ, scheme)
    start_mask = jnp.asarray(scheme.start_mask())
    Y = jnp.zeros((T, 1))
    em = EmissionModel(jnp.zeros((1, D)), jnp.zeros(1), PsdMatrix(jnp.eye(1)))

    def one(x, m, v):
        return _sample_terms(variant, T, eff, start_mask, em, LQ, Y, x, m, v, s.times, s.valid)[1]

    return float(samples.scale * jnp.mean(jax.vmap(one)(s.x, s.f_mean, s.f_var)))
