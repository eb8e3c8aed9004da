"""RBF covariance with automatic relevance determination."""

import numpy as np

from . import ndcore as nd
from .errors import DimensionError


class RbfArdKernel:
    """k(x, x') = σ² exp(-½ Σ_i (x_i - x'_i)² / ℓ_i²).

    Lengthscales and variance are stored unconstrained and mapped through
    softplus, so every value of the raw parameters is valid.
    """

    def __init__(self, input_dim, lengthscale=1.0, variance=1.0, name="kernel"):
        self.input_dim = int(input_dim)
        ls = np.broadcast_to(np.asarray(lengthscale, dtype=float), (self.input_dim,))
        self.raw_lengthscale = nd.Tensor(nd.softplus_inverse(ls), requires_grad=True,
                                         name=f"{name}.raw_lengthscale")
        self.raw_variance = nd.Tensor(nd.softplus_inverse(variance), requires_grad=True,
                                      name=f"{name}.raw_variance")

    @property
    def lengthscale(self):
        return nd.softplus(self.raw_lengthscale)

    @property
    def variance(self):
        return nd.softplus(self.raw_variance)

    def parameters(self):
        return [self.raw_lengthscale, self.raw_variance]

    def _check(self, X):
        if X.shape[-1] != self.input_dim:
            raise DimensionError(
                f"kernel expects inputs of dimension {self.input_dim}, got {X.shape[-1]}")

    def eval(self, x, x2):
        x, x2 = nd.as_tensor(x), nd.as_tensor(x2)
        if x.shape != (self.input_dim,) or x2.shape != (self.input_dim,):
            raise DimensionError(
                f"eval expects two vectors of length {self.input_dim}, got {x.shape}, {x2.shape}")
        r = (x - x2) / self.lengthscale
        return self.variance * nd.exp(-0.5 * nd.sum(nd.square(r)))

    def gram(self, X, Z):
        """n×m covariance between rows of ``X`` and rows of ``Z``.

        ``gram(X, X)`` forms differences explicitly so its diagonal is exactly
        σ²; cross-covariances use the cheaper |a|² + |b|² − 2abᵀ expansion.
        """
        X, Z = nd.as_tensor(X), nd.as_tensor(Z)
        self._check(X)
        self._check(Z)
        ls = self.lengthscale
        if X is Z or X.shape[0] * Z.shape[0] * self.input_dim <= 4096:
            diff = (nd.expand_dims(X, -2) - nd.expand_dims(Z, -3)) / ls
            sq = nd.sum(nd.square(diff), axis=-1)
        else:
            a, b = X / ls, Z / ls
            cross = nd.matmul(a, b.mT)
            sq = (nd.expand_dims(nd.sum(nd.square(a), axis=-1), -1)
                  + nd.expand_dims(nd.sum(nd.square(b), axis=-1), -2) - 2.0 * cross)
            sq = nd.maximum(sq, 0.0)
        return self.variance * nd.exp(-0.5 * sq)

    def diag(self, X):
        """k(x, x) for every row; exactly σ²."""
        X = nd.as_tensor(X)
        self._check(X)
        return nd.broadcast_to(self.variance, X.shape[:-1])
