"""Sparse variational GP layer with independent outputs sharing one kernel.

All outputs use the same univariate Gram matrix k(Z, Z); the Kronecker
form k ⊗ I_P is never materialised. The parameterisation is unwhitened:
q(u_p) = N(m_p, S_p) with S_p = L_p L_pᵀ.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.cluster.vq import kmeans2

from . import ndcore as nd
from .errors import ContractError, DimensionError, NumericalError

NEGATIVE_VARIANCE_TOL = 1e-12


@dataclass
class MarginalGaussian:
    """Per-point Gaussian marginals.

    Either ``var`` (independent outputs, n×P) or ``cov`` (n×P×P) is set;
    ``factor`` (n×P×K) is an optional square root with cov = factor factorᵀ.
    """

    mean: nd.Tensor
    var: Optional[nd.Tensor] = None
    cov: Optional[nd.Tensor] = None
    factor: Optional[nd.Tensor] = None


@dataclass
class Projection:
    """Quantities of a conditional that depend only on the kernel, Z and X."""

    chol: nd.Tensor   # chol k(Z, Z), M×M
    A: nd.Tensor      # chol⁻¹ k(Z, X), M×n
    alpha: nd.Tensor  # k(Z, Z)⁻¹ k(Z, X), M×n
    kdiag: nd.Tensor  # k(x, x), n


def kmeans_inducing(X, num_inducing, seed=0):
    """Inducing inputs from k-means centroids of the rows of ``X``."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] <= num_inducing:
        return X.copy()
    rng = np.random.default_rng(seed)
    centroids, _ = kmeans2(X, num_inducing, minit="++", seed=rng)
    return centroids


class SvgpLayer:
    def __init__(self, Z, num_outputs, kernel, fixed_prior_covariance=False,
                 jitter=nd.DEFAULT_JITTER, name="layer"):
        if isinstance(Z, nd.Tensor):
            self.Z = Z
        else:
            self.Z = nd.Tensor(np.array(Z, dtype=float), requires_grad=True, name=f"{name}.Z")
        if self.Z.ndim != 2 or self.Z.shape[1] != kernel.input_dim:
            raise DimensionError(f"Z must be M×{kernel.input_dim}, got {self.Z.shape}")
        self.kernel = kernel
        self.num_outputs = int(num_outputs)
        self.fixed_prior_covariance = bool(fixed_prior_covariance)
        self.jitter = jitter
        self.name = name
        M = self.Z.shape[0]
        self.q_mu = nd.Tensor(np.zeros((M, self.num_outputs)), requires_grad=True,
                              name=f"{name}.q_mu")
        self.q_sqrt = None
        if not self.fixed_prior_covariance:
            self.q_sqrt = nd.Tensor(np.zeros((self.num_outputs, M, M)), requires_grad=True,
                                    name=f"{name}.q_sqrt")
            self.reset_to_prior()

    @property
    def num_inducing(self):
        return self.Z.shape[0]

    @property
    def input_dim(self):
        return self.Z.shape[1]

    def own_parameters(self):
        """Variational parameters only (Z and the kernel may be shared)."""
        return [self.q_mu] + ([self.q_sqrt] if self.q_sqrt is not None else [])

    def parameters(self):
        return [self.Z] + self.kernel.parameters() + self.own_parameters()

    def reset_to_prior(self):
        """Set S_p = k(Z, Z) for every output, so that KL(q‖p) = 0 when m = 0."""
        if self.q_sqrt is None:
            return
        L = self.prior_chol().value
        self.q_sqrt.value = np.broadcast_to(L, self.q_sqrt.shape).copy()

    def S_chol(self):
        return nd.tril(self.q_sqrt)

    def prior_chol(self):
        return nd.cholesky(self.kernel.gram(self.Z, self.Z), self.jitter)

    def project(self, X, chol=None):
        X = nd.as_tensor(X)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise DimensionError(f"{self.name}: inputs must be n×{self.input_dim}, got {X.shape}")
        if chol is None:
            chol = self.prior_chol()
        Kzx = self.kernel.gram(self.Z, X)
        A = nd.triangular_solve(chol, Kzx)
        alpha = nd.triangular_solve(chol, A, transpose=True)
        return Projection(chol=chol, A=A, alpha=alpha, kdiag=self.kernel.diag(X))

    def mean(self, proj):
        return nd.matmul(proj.alpha.mT, self.q_mu)

    def variance(self, proj):
        """k(x,x) + α(x)ᵀ(S_p − K)α(x) per point and output, shape n×P."""
        n = proj.kdiag.shape[0]
        if self.fixed_prior_covariance:
            # S = K makes the correction vanish identically
            return nd.broadcast_to(nd.expand_dims(proj.kdiag, -1), (n, self.num_outputs))
        reduction = nd.sum(nd.square(proj.A), axis=0)
        LtA = nd.matmul(self.S_chol().mT, nd.expand_dims(proj.alpha, 0))  # P×M×n
        added = nd.sum(nd.square(LtA), axis=1)                           # P×n
        return nd.expand_dims(proj.kdiag - reduction, -1) + added.mT

    def conditional(self, X, chol=None):
        proj = self.project(X, chol)
        return MarginalGaussian(mean=self.mean(proj), var=self.variance(proj))

    def kl(self, chol=None):
        if self.fixed_prior_covariance:
            return kl_fixed_cov(self, chol)
        return kl_full(self, chol)

    def state(self):
        return {p.name: p.value for p in self.parameters()}


def kl_full(layer, chol=None):
    """Σ_p KL(N(m_p, S_p) ‖ N(0, K))."""
    if layer.fixed_prior_covariance:
        raise ContractError("kl_full needs a free variational covariance")
    if chol is None:
        chol = layer.prior_chol()
    M, P = layer.num_inducing, layer.num_outputs
    S_chol = layer.S_chol()
    trace = nd.sum(nd.square(nd.triangular_solve(chol, S_chol)))
    mahal = nd.sum(nd.square(nd.triangular_solve(chol, layer.q_mu)))
    logdet_K = nd.cholesky_logdet(chol)
    logdet_S = nd.sum(nd.log(nd.square(nd.diagonal(S_chol))))
    return 0.5 * (trace + mahal - M * P + P * logdet_K - logdet_S)


def kl_fixed_cov(layer, chol=None):
    """½ Σ_p m_pᵀ K⁻¹ m_p, the KL when q and the prior share covariance K."""
    if not layer.fixed_prior_covariance:
        raise ContractError("kl_fixed_cov applies to layers with fixed prior covariance")
    if chol is None:
        chol = layer.prior_chol()
    return 0.5 * nd.sum(nd.square(nd.triangular_solve(chol, layer.q_mu)))


def sample_marginal(mg, noise):
    """Reparameterised draw: mean + sqrt(var)·noise (or a full-covariance root)."""
    noise = nd.as_tensor(noise)
    if mg.factor is not None:
        return mg.mean + nd.sum(mg.factor * nd.expand_dims(noise, -2), axis=-1)
    if mg.cov is not None:
        root = nd.cholesky(mg.cov)
        return mg.mean + nd.sum(root * nd.expand_dims(noise, -2), axis=-1)
    if noise.shape != mg.var.shape:
        raise DimensionError(f"noise shape {noise.shape} does not match {mg.var.shape}")
    lowest = float(np.min(mg.var.value)) if mg.var.size else 0.0
    if lowest < -NEGATIVE_VARIANCE_TOL:
        raise NumericalError(f"negative marginal variance {lowest:g}")
    return mg.mean + nd.sqrt(nd.maximum(mg.var, 0.0)) * noise
