"""Parameter packing, pathwise gradients, and the stochastic training loop.

All free parameters live in one flat unconstrained vector. Positive scalars
pass through ``exp``; covariance factors are lower-triangular with a
log-parameterized diagonal (``tril``), or diagonal only (``diag``).
"""
import logging
from dataclasses import asdict, dataclass, field, replace
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from gpssm.elbo import ElboEstimate, elbo_terms
from gpssm.gauss import PsdMatrix, chol
from gpssm.kernels import RbfParams, kern_matrix
from gpssm.posterior import ChainParams, ChunkScheme, Variant, draw_base_noises, effective_chain
from gpssm.sparse_gp import InducingPosterior, separate_inducing_inputs
from gpssm.ssm import Dataset, EmissionModel

logger = logging.getLogger(__name__)

TRANSFORMS = ("none", "log", "tril", "diag")


class DivergenceError(RuntimeError):
    """The ELBO collapsed far below its starting value."""


@dataclass(frozen=True)
class ModelSpec:
    """Static shape and structure of a model; hashable so it can key jit caches."""

    variant: Variant
    T: int
    D: int
    E: int
    M: int
    chunk_starts: tuple | None = None
    tied: bool = False
    full_S: bool = False
    retain_sites: bool = False
    inducing_jitter: float = 0.0

    @property
    def n_steps(self) -> int:
        return 1 if self.tied else self.T - 1

    @property
    def chunked(self) -> bool:
        return self.chunk_starts is not None and len(self.chunk_starts) > 1

    def scheme(self, chunk_mean=None, chunk_cov=None) -> ChunkScheme:
        """Chunk scheme; opening marginals default to N(0, I) when not given."""
        if not self.chunked:
            return ChunkScheme.single(self.T, self.D)
        n = len(self.chunk_starts) - 1
        if chunk_mean is None:
            chunk_mean = jnp.zeros((n, self.D))
        if chunk_cov is None:
            chunk_cov = jnp.tile(jnp.eye(self.D), (n, 1, 1))
        return ChunkScheme(self.chunk_starts, self.T, chunk_mean, PsdMatrix(chunk_cov))

    def transforms(self) -> dict:
        t = {
            "kernel.variance": "log",
            "kernel.lengthscales": "log",
            "Z": "none",
            "mu_u": "none",
            "Sigma_u": "tril",
            "m1": "none",
            "P1": "tril",
            "A": "none",
            "b": "none",
            "S": "tril" if self.full_S else "diag",
            "Q": "diag",
            "R": "diag",
            "C": "none",
            "d": "none",
        }
        if self.chunked:
            t["chunk_mean"] = "none"
            t["chunk_cov"] = "tril"
        return t


@dataclass
class ParamVector:
    """Flat unconstrained parameters with a named slice layout.

    ``layout`` entries are ``(name, start, stop, shape, transform)``.
    """

    flat: np.ndarray
    layout: tuple
    spec: ModelSpec | None = None

    @property
    def names(self) -> list[str]:
        return [e[0] for e in self.layout]

    def slice(self, name: str) -> slice:
        for n, a, b, _, _ in self.layout:
            if n == name:
                return slice(a, b)
        raise KeyError(name)

    @property
    def constraint_map(self) -> dict:
        return {n: tr for n, _, _, _, tr in self.layout}

    def name_of(self, index: int) -> str:
        for n, a, b, _, _ in self.layout:
            if a <= index < b:
                return n
        raise IndexError(index)

    def copy(self) -> "ParamVector":
        return replace(self, flat=np.array(self.flat, copy=True))


def _tril_count(n: int) -> int:
    return n * (n + 1) // 2


def _encode(value: np.ndarray, transform: str) -> np.ndarray:
    if transform == "none":
        return value.ravel()
    if transform == "log":
        return np.log(value).ravel()
    n = value.shape[-1]
    diag = np.log(np.diagonal(value, axis1=-2, axis2=-1))
    if transform == "diag":
        return diag.ravel()
    rows, cols = np.tril_indices(n)
    lower = value[..., rows, cols].copy()
    lower[..., rows == cols] = diag
    return lower.ravel()


def _decode(flat, shape: tuple, transform: str):
    if transform == "none":
        return flat.reshape(shape)
    if transform == "log":
        return jnp.exp(flat).reshape(shape)
    n = shape[-1]
    batch = shape[:-2]
    if transform == "diag":
        d = jnp.exp(flat.reshape(batch + (n,)))
        return d[..., :, None] * jnp.eye(n)
    rows, cols = np.tril_indices(n)
    vals = flat.reshape(batch + (_tril_count(n),))
    vals = jnp.where(rows == cols, jnp.exp(vals), vals)
    return jnp.zeros(shape).at[..., rows, cols].set(vals)


def _size(shape: tuple, transform: str) -> int:
    if transform in ("none", "log"):
        return int(np.prod(shape, dtype=int))
    batch = int(np.prod(shape[:-2], dtype=int))
    return batch * (shape[-1] if transform == "diag" else _tril_count(shape[-1]))


def pack(params: dict, transforms: dict, spec: ModelSpec | None = None) -> ParamVector:
    """Constrained named parameters -> flat unconstrained vector."""
    chunks, layout, pos = [], [], 0
    for name, tr in transforms.items():
        if tr not in TRANSFORMS:
            raise ValueError(f"unknown transform {tr!r} for {name}")
        value = np.asarray(params[name], dtype=float)
        with np.errstate(invalid="ignore", divide="ignore"):
            enc = _encode(value, tr)
        if not np.all(np.isfinite(enc)):
            raise ValueError(f"parameter {name!r} has non-finite or out-of-domain entries")
        layout.append((name, pos, pos + enc.size, tuple(value.shape), tr))
        chunks.append(enc)
        pos += enc.size
    return ParamVector(np.concatenate(chunks) if chunks else np.zeros(0), tuple(layout), spec)


def unpack_flat(flat, layout: tuple) -> dict:
    """Traceable inverse of ``pack`` on a raw flat array."""
    return {name: _decode(flat[a:b], shape, tr) for name, a, b, shape, tr in layout}


def unpack(pv: ParamVector) -> dict:
    if not np.all(np.isfinite(pv.flat)):
        bad = sorted({pv.name_of(i) for i in np.flatnonzero(~np.isfinite(pv.flat))})
        raise ValueError(f"non-finite entries in {bad}")
    return {k: np.asarray(v) for k, v in unpack_flat(jnp.asarray(pv.flat), pv.layout).items()}


def build_model(params: dict, spec: ModelSpec):
    """Named constrained parameters -> (chain, inducing posterior, emission, Q factor, scheme)."""
    kernel = RbfParams(params["kernel.variance"], params["kernel.lengthscales"])
    gp = InducingPosterior(params["Z"], params["mu_u"], PsdMatrix(params["Sigma_u"]), kernel, spec.inducing_jitter)
    A, b, S = params["A"], params["b"], params["S"]
    if spec.tied:
        A = jnp.broadcast_to(A, (spec.T - 1,) + A.shape[1:])
        b = jnp.broadcast_to(b, (spec.T - 1,) + b.shape[1:])
        S = jnp.broadcast_to(S, (spec.T - 1,) + S.shape[1:])
    cp = ChainParams(params["m1"], PsdMatrix(params["P1"]), A, b, PsdMatrix(S))
    em = EmissionModel(params["C"], params["d"], PsdMatrix(params["R"]))
    scheme = spec.scheme(params.get("chunk_mean"), params.get("chunk_cov"))
    return cp, gp, em, params["Q"], scheme


def _objective_terms(flat, noises, Y, plan, layout, spec):
    params = unpack_flat(flat, layout)
    cp, gp, em, LQ, scheme = build_model(params, spec)
    eff = effective_chain(spec.variant, cp, LQ, scheme)
    capacity = scheme.capacity(spec.M, spec.retain_sites, plan[0].shape[0])
    start_mask = jnp.asarray(scheme.start_mask())
    return elbo_terms(spec.variant, capacity, not spec.retain_sites, plan, eff, start_mask, gp, em, LQ, Y, noises)


def _objective(flat, noises, Y, plan, scale, layout, spec):
    ll, tr, klu, klx1 = _objective_terms(flat, noises, Y, plan, layout, spec)
    return scale * jnp.mean(ll - tr) - klu - klx1, (ll, tr, klu, klx1)


_value_and_grad = jax.jit(
    jax.value_and_grad(_objective, has_aux=True), static_argnames=("layout", "spec")
)
_value = jax.jit(_objective, static_argnames=("layout", "spec"))


@dataclass
class ElboProblem:
    """Everything besides the parameters that the frozen-noise ELBO needs."""

    spec: ModelSpec
    Y: np.ndarray
    n_samples: int = 10
    chunks: tuple | None = None

    def plan(self, chunks=None):
        scheme = self.spec.scheme()
        chunks = self.chunks if chunks is None else chunks
        if chunks is not None and len(chunks) == scheme.n_chunks:
            chunks = None
        n_sel = scheme.n_chunks if chunks is None else len(chunks)
        return tuple(jnp.asarray(a) for a in scheme.plan(chunks)), scheme.n_chunks / n_sel

    def noises(self, seed) -> dict:
        key = seed if isinstance(seed, jax.Array) else jax.random.PRNGKey(int(seed))
        return draw_base_noises(key, self.spec.T, self.spec.D, self.spec.M, self.n_samples)


def elbo_value(pv: ParamVector, noises: dict, problem: ElboProblem) -> float:
    """Deterministic ELBO estimate for frozen base noises."""
    plan, scale = problem.plan()
    val, _ = _value(jnp.asarray(pv.flat), noises, jnp.asarray(problem.Y), plan, scale,
                    layout=pv.layout, spec=problem.spec)
    return float(val)


def _term(flat, noises, Y, plan, scale, layout, spec, term):
    ll, tr, klu, klx1 = _objective_terms(flat, noises, Y, plan, layout, spec)
    return {"loglik": scale * jnp.mean(ll), "trans_kl": scale * jnp.mean(tr), "kl_u": klu, "kl_x1": klx1}[term]


_term_grad = jax.jit(jax.grad(_term), static_argnames=("layout", "spec", "term"))


def grad_elbo(pv: ParamVector, noises: dict, problem: ElboProblem, term: str = "elbo") -> np.ndarray:
    """Exact gradient of the frozen-noise ELBO with respect to ``pv.flat``.

    ``term`` picks a single component instead: loglik, trans_kl, kl_u or kl_x1.
    """
    plan, scale = problem.plan()
    args = (jnp.asarray(pv.flat), noises, jnp.asarray(problem.Y), plan, scale)
    if term == "elbo":
        (_, _), g = _value_and_grad(*args, layout=pv.layout, spec=problem.spec)
    elif term in ("loglik", "trans_kl", "kl_u", "kl_x1"):
        g = _term_grad(*args, layout=pv.layout, spec=problem.spec, term=term)
    else:
        raise ValueError(f"unknown ELBO term {term!r}")
    g = np.asarray(g)
    if not np.all(np.isfinite(g)):
        bad = sorted({pv.name_of(i) for i in np.flatnonzero(~np.isfinite(g))})
        raise FloatingPointError(f"non-finite ELBO gradient in {bad}")
    return g


def fd_gradient(pv: ParamVector, coordinate: int, h: float, noises: dict, problem: ElboProblem) -> float:
    """Central difference of the frozen-noise ELBO; ``h`` is relative to max(1, |theta_i|)."""
    step = h * max(1.0, abs(float(pv.flat[coordinate])))
    plus, minus = pv.copy(), pv.copy()
    plus.flat[coordinate] += step
    minus.flat[coordinate] -= step
    return (elbo_value(plus, noises, problem) - elbo_value(minus, noises, problem)) / (2.0 * step)


@dataclass
class FitConfig:
    n_inducing: int = 20
    n_iter: int = 3000
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    n_samples: int = 10
    chunk_length: int | None = None
    minibatch_chunks: int | None = None
    frozen: tuple = ("C", "d", "R")
    tied: bool = False
    full_S: bool = False
    retain_sites: bool = False
    kernel_variance: float = 1.0
    kernel_lengthscale: float = 1.0
    process_noise: float = 0.1
    emission_noise: float | None = None
    sigma_u_scale: float = 0.1
    inducing_jitter: float = 1e-4
    smoothing_window: int = 50
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frozen"] = list(self.frozen)
        return d


@dataclass
class FitTrace:
    estimates: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.estimates)

    @property
    def values(self) -> np.ndarray:
        return np.array([e.value for e in self.estimates])

    def smoothed(self, window: int = 50) -> np.ndarray:
        v = self.values
        if v.size == 0:
            return v
        c = np.cumsum(np.insert(v, 0, 0.0))
        lo = np.maximum(np.arange(1, v.size + 1) - window, 0)
        return (c[1:] - c[lo]) / (np.arange(1, v.size + 1) - lo)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iter,elbo,loglik,kl_u,kl_x1,trans_kl,stderr,grad_norm\n")
            for i, (e, g) in enumerate(zip(self.estimates, self.grad_norms)):
                fh.write(f"{i},{e.value!r},{e.loglik!r},{e.kl_u!r},{e.kl_x1!r},"
                         f"{e.transition_kl!r},{e.stderr!r},{g!r}\n")
        return path


def default_emission(dataset: Dataset, D: int, config: FitConfig) -> EmissionModel:
    E = dataset.Y.shape[1]
    if D != E:
        raise ValueError("default identity emission needs latent_dim == observation dim")
    r = config.emission_noise
    if r is None:
        r = float(np.asarray(dataset.meta.get("R", 0.1)).ravel()[0])
    return EmissionModel.identity(E, r)


def init_params(Y: np.ndarray, spec: ModelSpec, em: EmissionModel, config: FitConfig) -> dict:
    """Data-anchored starting point: A_t = 0, b_t = lifted y_{t+1}, identity-function q(u)."""
    Y = np.asarray(Y, dtype=float)
    C, d = np.asarray(em.C, dtype=float), np.asarray(em.d, dtype=float)
    R = np.asarray(em.R.matrix, dtype=float)
    Cp = np.linalg.pinv(C)
    Xproxy = (Y - d) @ Cp.T
    D, M, T = spec.D, spec.M, spec.T
    lo, hi = Xproxy.min(axis=0) - 1.0, Xproxy.max(axis=0) + 1.0
    Z = separate_inducing_inputs(np.linspace(lo, hi, M))
    kernel = RbfParams(config.kernel_variance, np.full(D, config.kernel_lengthscale))
    Lzz = np.asarray(chol(kern_matrix(Z, Z, kernel) + spec.inducing_jitter * config.kernel_variance * np.eye(M)).factor)
    Q = config.process_noise * np.eye(D)
    Rlat = np.diag(np.diag(Cp @ R @ Cp.T))
    S = np.linalg.cholesky(np.diag(np.diag(Rlat + Q)))
    P1 = np.linalg.cholesky(Rlat)
    n = spec.n_steps
    params = {
        "kernel.variance": np.asarray(config.kernel_variance, dtype=float),
        "kernel.lengthscales": np.full(D, config.kernel_lengthscale, dtype=float),
        "Z": Z,
        "mu_u": Z.copy(),
        "Sigma_u": np.tile(np.sqrt(config.sigma_u_scale) * Lzz, (D, 1, 1)),
        "m1": Xproxy[0],
        "P1": P1,
        "A": np.zeros((n, D, D)),
        "b": Xproxy[1:] if not spec.tied else Xproxy[1:].mean(axis=0, keepdims=True),
        "S": np.tile(S, (n, 1, 1)),
        "Q": np.sqrt(Q),
        "R": np.asarray(em.R.factor, dtype=float),
        "C": C,
        "d": d,
    }
    if spec.chunked:
        starts = list(spec.chunk_starts[1:])
        params["chunk_mean"] = Xproxy[starts]
        params["chunk_cov"] = np.tile(P1, (len(starts), 1, 1))
    return params


def make_spec(Y: np.ndarray, variant, config: FitConfig, D: int | None = None) -> ModelSpec:
    T, E = np.atleast_2d(Y).shape
    starts = None
    if config.chunk_length is not None and config.chunk_length < T:
        starts = tuple(range(0, T, int(config.chunk_length)))
    return ModelSpec(
        variant=Variant.parse(variant), T=T, D=E if D is None else D, E=E, M=config.n_inducing,
        chunk_starts=starts, tied=config.tied, full_S=config.full_S, retain_sites=config.retain_sites,
        inducing_jitter=config.inducing_jitter,
    )


def _frozen_mask(pv: ParamVector, frozen) -> np.ndarray:
    mask = np.zeros(pv.flat.size, dtype=bool)
    for name in frozen:
        if name == "kernel":
            for sub in ("kernel.variance", "kernel.lengthscales"):
                mask[pv.slice(sub)] = True
        elif name in pv.names:
            mask[pv.slice(name)] = True
        else:
            raise KeyError(f"cannot freeze unknown parameter {name!r}")
    return mask


@partial(jax.jit, static_argnames=("layout", "spec"))
def _adam_step(flat, m, v, it, key, Y, plan, scale, frozen, hyper, layout, spec, n_samples_arr):
    lr, b1, b2, eps = hyper
    noises = draw_base_noises(key, spec.T, spec.D, spec.M, n_samples_arr.shape[0])
    (val, (ll, tr, klu, klx1)), g = jax.value_and_grad(_objective, has_aux=True)(
        flat, noises, Y, plan, scale, layout, spec
    )
    g = jnp.where(frozen, 0.0, g)
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mhat = m / (1 - b1 ** it)
    vhat = v / (1 - b2 ** it)
    step = jnp.where(frozen, 0.0, lr * mhat / (jnp.sqrt(vhat) + eps))
    per_sample = scale * (ll - tr)
    S = ll.shape[0]
    stderr = jnp.where(S > 1, jnp.std(per_sample, ddof=1) / jnp.sqrt(S), 0.0)
    stats = jnp.stack([scale * jnp.mean(ll), klu, klx1, scale * jnp.mean(tr), stderr,
                       jnp.linalg.norm(g), jnp.linalg.norm(step), jnp.all(jnp.isfinite(g))])
    return jnp.where(frozen, flat, flat + step), m, v, stats, g


def fit(dataset: Dataset, variant, config: FitConfig | None = None, emission: EmissionModel | None = None,
        latent_dim: int | None = None, init: ParamVector | None = None):
    """Stochastic gradient ascent on the ELBO with fresh base noises every iteration.

    Returns the parameters with the best smoothed ELBO and the full trace.
    """
    config = FitConfig() if config is None else config
    Y = np.atleast_2d(np.asarray(dataset.Y, dtype=float))
    spec = make_spec(Y, variant, config, latent_dim)
    if init is None:
        em = default_emission(dataset, spec.D, config) if emission is None else emission
        pv = pack(init_params(Y, spec, em, config), spec.transforms(), spec)
    else:
        pv = init.copy()
        spec = pv.spec
    trace = FitTrace()
    if config.n_iter <= 0:
        return pv, trace

    frozen = jnp.asarray(_frozen_mask(pv, config.frozen))
    problem = ElboProblem(spec, Y, config.n_samples)
    scheme_chunks = len(spec.chunk_starts) if spec.chunked else 1
    k = config.minibatch_chunks
    if k is not None and not 1 <= k <= scheme_chunks:
        raise ValueError(f"minibatch_chunks must lie in [1, {scheme_chunks}]")
    rng = np.random.default_rng(config.seed)
    base_key = jax.random.PRNGKey(config.seed)
    hyper = jnp.array([config.learning_rate, config.beta1, config.beta2, config.epsilon])
    n_samples_arr = jnp.zeros(config.n_samples)
    Yj = jnp.asarray(Y)

    flat = jnp.asarray(pv.flat)
    m = jnp.zeros_like(flat)
    v = jnp.zeros_like(flat)
    best_flat, best_score = pv.flat.copy(), -np.inf
    window = max(1, config.smoothing_window)
    recent: list[float] = []
    init_value, bad_run = None, 0
    queue: list[int] = []
    full_plan = problem.plan()

    for it in range(1, config.n_iter + 1):
        if k is None or k == scheme_chunks:
            plan, scale = full_plan
        else:
            if len(queue) < k:
                queue = rng.permutation(scheme_chunks).tolist()
            chunks, queue = sorted(queue[:k]), queue[k:]
            plan, scale = problem.plan(tuple(chunks))
        key = jax.random.fold_in(base_key, it)
        new_flat, m, v, stats, g = _adam_step(flat, m, v, it, key, Yj, plan, scale, frozen, hyper,
                                              pv.layout, spec, n_samples_arr)
        ll, klu, klx1, tr, se, gnorm, snorm, finite = np.asarray(stats).tolist()
        if not finite:
            gn = np.asarray(g)
            bad = sorted({pv.name_of(i) for i in np.flatnonzero(~np.isfinite(gn))})
            raise FloatingPointError(f"non-finite ELBO gradient at iteration {it} in {bad}")
        est = ElboEstimate(ll, klu, klx1, tr, se, config.n_samples, scale)
        trace.estimates.append(est)
        trace.grad_norms.append(gnorm)
        trace.step_norms.append(snorm)

        # the estimate belongs to the parameters before this step
        recent.append(est.value)
        if len(recent) > window:
            recent.pop(0)
        score = float(np.mean(recent))
        if score > best_score:
            best_score, best_flat = score, np.asarray(flat).copy()

        if init_value is None:
            init_value = est.value
        if est.value < init_value - 10.0 * abs(init_value):
            bad_run += 1
            if bad_run >= 100:
                raise DivergenceError(f"ELBO diverged at iteration {it} ({est.value:.4g} vs start {init_value:.4g})")
        else:
            bad_run = 0
        flat = new_flat
        if it % 500 == 0:
            logger.info("iter %d  elbo %.4f  (smoothed %.4f)", it, est.value, score)

    out = ParamVector(best_flat, pv.layout, spec)
    return out, trace
