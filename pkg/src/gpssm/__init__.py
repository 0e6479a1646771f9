"""Variational inference for Gaussian process state-space models."""
import jax

jax.config.update("jax_enable_x64", True)

from gpssm.gauss import (  # noqa: E402
    GaussianMoments,
    NonConvergence,
    NotPositiveDefinite,
    PsdMatrix,
    chol,
    gauss_kl,
    mvn_logpdf,
    mvn_transform,
    quad_1d,
)
from gpssm.kernels import RbfParams, kern, kern_diag, kern_matrix  # noqa: E402
from gpssm.sparse_gp import (  # noqa: E402
    InducingPosterior,
    SequentialConditioner,
    cond_extend,
    cond_init,
    cond_reset,
    conditional_given_u,
    kl_u,
    predict_marginal,
    sample_u,
)
from gpssm.ssm import (  # noqa: E402
    Dataset,
    EmissionModel,
    ProcessNoise,
    kink,
    make_kink_dataset,
    simulate,
)
from gpssm.posterior import (  # noqa: E402
    ChainParams,
    ChunkScheme,
    TrajectorySample,
    Variant,
    prssm_chain,
    sample_chunked,
    sample_trajectory,
    transition_moments,
)
from gpssm.elbo import ElboEstimate, elbo, expected_loglik, expected_transition_kl  # noqa: E402
from gpssm.optim import FitConfig, ParamVector, fd_gradient, fit, grad_elbo, pack, unpack  # noqa: E402
from gpssm.estimator import GPSSM  # noqa: E402

__version__ = "0.1.0"
