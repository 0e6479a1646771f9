"""Squared-exponential (RBF) covariance with per-dimension lengthscales."""
from typing import NamedTuple

import jax
import jax.numpy as jnp


class RbfParams(NamedTuple):
    variance: jax.Array | float
    lengthscales: jax.Array

    @classmethod
    def default(cls, input_dim: int) -> "RbfParams":
        return cls(jnp.asarray(1.0), jnp.ones(input_dim))


def kern(x, x2, p: RbfParams) -> jax.Array:
    r = (jnp.asarray(x, dtype=float) - jnp.asarray(x2, dtype=float)) / p.lengthscales
    return p.variance * jnp.exp(-0.5 * jnp.sum(r * r, axis=-1))


def kern_matrix(Xa, Xb, p: RbfParams) -> jax.Array:
    a = jnp.atleast_2d(jnp.asarray(Xa, dtype=float)) / p.lengthscales
    b = jnp.atleast_2d(jnp.asarray(Xb, dtype=float)) / p.lengthscales
    d = a[:, None, :] - b[None, :, :]
    return p.variance * jnp.exp(-0.5 * jnp.sum(d * d, axis=-1))


def kern_diag(Xa, p: RbfParams) -> jax.Array:
    n = jnp.atleast_2d(jnp.asarray(Xa)).shape[0]
    return jnp.full((n,), p.variance, dtype=float)
