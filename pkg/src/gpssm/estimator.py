"""scikit-learn style front end for fitting a GPSSM to one observed sequence."""
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from gpssm.elbo import ElboEstimate, elbo
from gpssm.optim import FitConfig, build_model, fit, unpack
from gpssm.posterior import Variant, sample_chunked
from gpssm.sparse_gp import predict_marginal_batch
from gpssm.ssm import Dataset, EmissionModel, ProcessNoise
from gpssm.gauss import PsdMatrix


class GPSSM(BaseEstimator):
    """Gaussian process state-space model fitted by stochastic variational inference.

    ``fit`` takes a ``(T, E)`` observation sequence. ``predict`` evaluates
    the learned transition function q(f(x)) at ``(n, D)`` latent inputs;
    ``transform`` returns posterior latent-state means for the fitted
    sequence.

    Parameters
    ----------
    variant : str
        One of ``factorised_linear``, ``factorised_nonlinear``,
        ``u_factorised``, ``non_factorised`` or ``prssm``.
    n_inducing : int
        Number of inducing points M.
    chunk_length : int, optional
        Cut q(X | f) into chunks of this length.
    minibatch_chunks : int, optional
        Number of chunks sampled per iteration (doubly stochastic).
    emission : EmissionModel, optional
        Observation model; defaults to identity with variance
        ``emission_noise`` (0.1 when unset).
    """

    def __init__(
        self,
        variant="u_factorised",
        n_inducing=20,
        latent_dim=None,
        n_iter=3000,
        learning_rate=1e-2,
        n_samples=10,
        chunk_length=None,
        minibatch_chunks=None,
        learn_kernel=True,
        learn_inducing_inputs=True,
        learn_process_noise=True,
        learn_emission=False,
        emission=None,
        process_noise=0.1,
        emission_noise=None,
        kernel_variance=1.0,
        kernel_lengthscale=1.0,
        inducing_jitter=1e-4,
        full_S=False,
        tied=False,
        retain_sites=False,
        random_state=0,
    ):
        self.variant = variant
        self.n_inducing = n_inducing
        self.latent_dim = latent_dim
        self.n_iter = n_iter
        self.learning_rate = learning_rate
        self.n_samples = n_samples
        self.chunk_length = chunk_length
        self.minibatch_chunks = minibatch_chunks
        self.learn_kernel = learn_kernel
        self.learn_inducing_inputs = learn_inducing_inputs
        self.learn_process_noise = learn_process_noise
        self.learn_emission = learn_emission
        self.emission = emission
        self.process_noise = process_noise
        self.emission_noise = emission_noise
        self.kernel_variance = kernel_variance
        self.kernel_lengthscale = kernel_lengthscale
        self.inducing_jitter = inducing_jitter
        self.full_S = full_S
        self.tied = tied
        self.retain_sites = retain_sites
        self.random_state = random_state

    def fit_config(self) -> FitConfig:
        frozen = []
        if not self.learn_kernel:
            frozen.append("kernel")
        if not self.learn_inducing_inputs:
            frozen.append("Z")
        if not self.learn_process_noise:
            frozen.append("Q")
        if not self.learn_emission:
            frozen.extend(["C", "d", "R"])
        return FitConfig(
            n_inducing=self.n_inducing,
            n_iter=self.n_iter,
            learning_rate=self.learning_rate,
            n_samples=self.n_samples,
            chunk_length=self.chunk_length,
            minibatch_chunks=self.minibatch_chunks,
            frozen=tuple(frozen),
            tied=self.tied,
            full_S=self.full_S,
            retain_sites=self.retain_sites,
            kernel_variance=self.kernel_variance,
            kernel_lengthscale=self.kernel_lengthscale,
            process_noise=self.process_noise,
            emission_noise=self.emission_noise,
            inducing_jitter=self.inducing_jitter,
            seed=0 if self.random_state is None else int(self.random_state),
        )

    def fit(self, Y, y=None):
        Y = check_array(Y, ensure_min_samples=2)
        Variant.parse(self.variant)
        self.params_, self.trace_ = fit(Dataset(Y), self.variant, self.fit_config(), self.emission, self.latent_dim)
        self._set_model()
        self.Y_ = Y
        self.n_features_in_ = Y.shape[1]
        return self

    def _set_model(self):
        self.spec_ = self.params_.spec
        params = unpack(self.params_)
        cp, gp, em, LQ, scheme = build_model(params, self.spec_)
        self.chain_params_ = cp
        self.inducing_posterior_ = gp
        self.emission_ = EmissionModel(em.C, em.d, em.R)
        self.process_noise_ = ProcessNoise(PsdMatrix(LQ))
        self.chunk_scheme_ = scheme

    def predict(self, X, return_std=False):
        """Mean (and std) of the learned transition function at ``X``."""
        check_is_fitted(self, "params_")
        X = check_array(X)
        if X.shape[1] != self.spec_.D:
            raise ValueError(f"X has {X.shape[1]} columns, expected latent dim {self.spec_.D}")
        mean, var = predict_marginal_batch(self.inducing_posterior_, X)
        mean = np.asarray(mean)
        if return_std:
            return mean, np.sqrt(np.asarray(var))
        return mean

    def sample_trajectories(self, n_samples=1000, random_state=None):
        check_is_fitted(self, "params_")
        seed = self.random_state if random_state is None else random_state
        return sample_chunked(
            self.spec_.variant, self.chain_params_, self.inducing_posterior_, self.chunk_scheme_,
            seed=seed, Q=self.process_noise_, n_samples=n_samples, retain_sites=self.spec_.retain_sites,
        )

    def transform(self, Y, n_samples=1000):
        """Posterior means E_q[x_t] for the sequence the model was fitted to."""
        check_is_fitted(self, "params_")
        Y = check_array(Y, ensure_min_samples=2)
        if Y.shape != self.Y_.shape or not np.allclose(Y, self.Y_):
            raise ValueError("transform only supports the sequence passed to fit")
        return np.asarray(self.sample_trajectories(n_samples).x.mean(axis=0))

    def pairwise_marginals(self, n_samples=1000, random_state=None):
        """Sample moments of (x_t, x_{t+1}): means ``(T-1, 2D)``, covariances ``(T-1, 2D, 2D)``."""
        x = np.asarray(self.sample_trajectories(n_samples, random_state).x)
        pairs = np.concatenate([x[:, :-1], x[:, 1:]], axis=-1)
        means = pairs.mean(axis=0)
        centred = pairs - means
        covs = np.einsum("sti,stj->tij", centred, centred) / (x.shape[0] - 1)
        return means, covs

    def elbo(self, n_samples=1000, seed=None) -> ElboEstimate:
        check_is_fitted(self, "params_")
        return elbo(
            self.spec_.variant, self.chain_params_, self.inducing_posterior_, self.emission_,
            self.process_noise_, self.Y_, S=n_samples, scheme=self.chunk_scheme_,
            seed=self.random_state if seed is None else seed, retain_sites=self.spec_.retain_sites,
        )

    def score(self, Y, y=None, n_samples=1000):
        """ELBO estimate for the fitted sequence (higher is better)."""
        self.transform(Y, n_samples=2)
        return self.elbo(n_samples).value
