"""Brute-force numerical references for tiny 1-D GPSSMs.

Everything here is plain numpy/scipy on purpose: these values are used to
check the JAX code paths, so they must not share any of them.
"""
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp, roots_legendre

from gpssm.gauss import LOG_2PI, quad_1d
from gpssm.kernels import RbfParams


@dataclass(frozen=True)
class OracleConfig:
    """1-D GPSSM with C = 1, d = 0, x_1 ~ N(0, 1) and an RBF transition prior."""

    variance: float = 1.0
    lengthscale: float = 1.0
    Q: float = 0.01
    R: float = 0.1
    tol: float = 1e-10
    n_sd: float = 10.0
    grid: int = 400
    check_grid: int = 200

    def __post_init__(self):
        for name in ("variance", "lengthscale", "Q", "R", "tol", "n_sd"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.check_grid < 2 or self.grid < 2:
            raise ValueError("quadrature grids need at least 2 nodes per axis")

    @classmethod
    def from_kernel(cls, kernel: RbfParams, Q: float, R: float, **kw) -> "OracleConfig":
        return cls(float(np.ravel(kernel.variance)[0]), float(np.ravel(kernel.lengthscales)[0]), Q, R, **kw)

    def k(self, a, b):
        a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
        return self.variance * np.exp(-0.5 * ((a - b) / self.lengthscale) ** 2)


def _lognorm(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


def _x1_window(cfg: OracleConfig, y1: float):
    # posterior of x_1 given y_1 alone
    var = cfg.R / (1.0 + cfg.R)
    centre, sd = y1 / (1.0 + cfg.R), np.sqrt(var)
    return centre - cfg.n_sd * sd, centre + cfg.n_sd * sd


def _x2_window(cfg: OracleConfig, y2: float):
    prior = cfg.variance + cfg.Q
    var = prior * cfg.R / (prior + cfg.R)
    centre, sd = y2 * prior / (prior + cfg.R), np.sqrt(var)
    return centre - cfg.n_sd * sd, centre + cfg.n_sd * sd


def _log_integrand_t2(cfg: OracleConfig, Y, x1):
    y1, y2 = Y
    v2 = cfg.k(x1, x1) + cfg.Q + cfg.R
    return _lognorm(x1, 0.0, 1.0) + _lognorm(y1, x1, cfg.R) + _lognorm(y2, 0.0, v2)


def _log_integrand_t3(cfg: OracleConfig, Y, x1, x2):
    y1, y2, y3 = Y
    k11, k22, k12 = cfg.k(x1, x1), cfg.k(x2, x2), cfg.k(x1, x2)
    # (x_2, y_3) | x_1, with x_2 = f(x_1) + e_1 and y_3 = f(x_2) + e_2 + r_3
    a, c, b = k11 + cfg.Q, k22 + cfg.Q + cfg.R, k12
    det = a * c - b * b
    quad = (c * x2 * x2 - 2 * b * x2 * y3 + a * y3 * y3) / det
    pair = -0.5 * (2 * LOG_2PI + np.log(det) + quad)
    return _lognorm(x1, 0.0, 1.0) + _lognorm(y1, x1, cfg.R) + _lognorm(y2, x2, cfg.R) + pair


def _gl_log_integral(logf, window1, window2, n):
    nodes, weights = roots_legendre(n)
    (a1, b1), (a2, b2) = window1, window2
    x1 = 0.5 * (b1 - a1) * nodes + 0.5 * (b1 + a1)
    x2 = 0.5 * (b2 - a2) * nodes + 0.5 * (b2 + a2)
    logw = np.log(weights)[:, None] + np.log(weights)[None, :]
    vals = logf(x1[:, None], x2[None, :]) + logw
    return float(logsumexp(vals) + np.log(0.25 * (b1 - a1) * (b2 - a2)))


@dataclass
class QuadratureResult:
    log_evidence: float
    error_estimate: float
    method: str
    window: list = field(default_factory=list)


def log_marginal_quadrature(cfg: OracleConfig, Y, points=None, return_details: bool = False):
    """Exact log p(Y) for T = 2 (adaptive quadrature) or T = 3 (tensor Gauss-Legendre).

    ``points`` are optional break points inside the x_1 window for T = 2.
    """
    Y = np.asarray(Y, dtype=float).reshape(-1)
    T = Y.shape[0]
    if T == 2:
        window = _x1_window(cfg, Y[0])
        mid = np.linspace(*window, 401)
        shift = float(np.max(_log_integrand_t2(cfg, Y, mid)))
        # integrand rescaled to peak at 1 so the absolute tolerance is meaningful
        val = quad_1d(lambda x: np.exp(_log_integrand_t2(cfg, Y, x) - shift), window, cfg.tol, points=points)
        if not val > 0:
            raise ValueError("integrand vanished over the quadrature window")
        res = QuadratureResult(float(np.log(val) + shift), cfg.tol / val, "adaptive_gauss_kronrod", list(window))
    elif T == 3:
        w1, w2 = _x1_window(cfg, Y[0]), _x2_window(cfg, Y[1])
        fine = _gl_log_integral(lambda a, b: _log_integrand_t3(cfg, Y, a, b), w1, w2, cfg.grid)
        coarse = _gl_log_integral(lambda a, b: _log_integrand_t3(cfg, Y, a, b), w1, w2, cfg.check_grid)
        res = QuadratureResult(fine, abs(fine - coarse), f"gauss_legendre_{cfg.grid}x{cfg.grid}", [list(w1), list(w2)])
    else:
        raise ValueError(f"quadrature oracle supports T in {{2, 3}}, got T={T}")
    return res if return_details else res.log_evidence


def linear_gaussian_log_evidence(Y, Q: float, R: float, transition: float = 0.0) -> float:
    """log p(Y) of x_1 ~ N(0, 1), x_{t+1} = a x_t + N(0, Q), y_t = x_t + N(0, R)."""
    Y = np.asarray(Y, dtype=float).reshape(-1)
    T = Y.shape[0]
    cov = np.empty((T, T))
    var = np.empty(T)
    var[0] = 1.0
    for t in range(1, T):
        var[t] = transition**2 * var[t - 1] + Q
    for s in range(T):
        for t in range(T):
            lo, hi = min(s, t), max(s, t)
            cov[s, t] = transition ** (hi - lo) * var[lo]
    cov += R * np.eye(T)
    sign, logdet = np.linalg.slogdet(cov)
    return float(-0.5 * (T * LOG_2PI + logdet + Y @ np.linalg.solve(cov, Y)))


@dataclass
class NonMarkovReport:
    """Conditional densities q(x_3 | x_2, x_1) at two values of x_1."""

    x1_pair: tuple
    x2: float
    x3: list
    densities: list
    max_deviation: float
    inputs: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _fitc_conditional_density(cfg: OracleConfig, z, mu, sigma2, x1, x2, x3, tol):
    """q(x_3 | x_2, x_1) when each f(x_t) | u is drawn independently and u ~ N(mu, sigma2)."""
    kzz = cfg.k(z, z)

    def coeffs(x):
        kxz = cfg.k(x, z)
        return kxz / kzz, cfg.k(x, x) - kxz**2 / kzz + cfg.Q

    a1, v1 = coeffs(x1)
    a2, v2 = coeffs(x2)
    x3 = np.asarray(x3, dtype=float)
    if sigma2 == 0.0:
        return np.exp(_lognorm(x3, a2 * mu, v2))
    sd = np.sqrt(sigma2)
    window = (mu - cfg.n_sd * sd, mu + cfg.n_sd * sd)

    def weight(u):
        return np.exp(_lognorm(u, mu, sigma2) + _lognorm(x2, a1 * u, v1))

    norm = quad_1d(weight, window, tol)
    out = np.empty_like(x3)
    for i, x in enumerate(x3):
        out[i] = quad_1d(lambda u: weight(u) * np.exp(_lognorm(x, a2 * u, v2)), window, tol) / norm
    return out


def fitc_nonmarkov_check(
    cfg: OracleConfig | None = None,
    z: float = 0.0,
    mu: float = 0.0,
    sigma2: float = 1.0,
    x1_pair=(-1.0, 0.0),
    x2: float = 0.5,
    x3_grid=None,
) -> NonMarkovReport:
    """Largest gap between q(x_3 | x_2, x_1) at two x_1 values with one inducing point.

    A Markov q(X) makes the two curves identical; a positive deviation shows
    that marginalising u couples x_3 to x_1.
    """
    cfg = OracleConfig() if cfg is None else cfg
    if sigma2 < 0:
        raise ValueError("sigma2 must be non-negative")
    x3 = np.linspace(-3.0, 3.0, 121) if x3_grid is None else np.asarray(x3_grid, dtype=float)
    tol = min(cfg.tol, 1e-12)
    dens = [_fitc_conditional_density(cfg, z, mu, sigma2, x1, x2, x3, tol) for x1 in x1_pair]
    return NonMarkovReport(
        x1_pair=tuple(float(v) for v in x1_pair),
        x2=float(x2),
        x3=x3.tolist(),
        densities=[d.tolist() for d in dens],
        max_deviation=float(np.max(np.abs(dens[0] - dens[1]))),
        inputs={"z": z, "mu": mu, "sigma2": sigma2, **asdict(cfg)},
    )
