"""Low-rank Wishart-process diffusion.

Σ(x) = L J(x) J(x)ᵀ Lᵀ + Λ where J(x) is ρ×ν with entries drawn from
independent GPs sharing the drift field's kernel and inducing inputs, L is
D×ρ with unit row norms and Λ is a positive diagonal.
"""

import numpy as np

from . import ndcore as nd
from .errors import ContractError
from .svgp import SvgpLayer, sample_marginal, MarginalGaussian

ROW_NORM_FLOOR = 1e-12


def row_normalize(L_raw):
    """Divide each row by its Euclidean norm."""
    L_raw = nd.as_tensor(L_raw)
    norms = np.sqrt(np.sum(L_raw.value ** 2, axis=-1))
    bad = np.flatnonzero(norms < ROW_NORM_FLOOR)
    if bad.size:
        raise ContractError(f"row {int(bad[0])} of L has (near) zero norm")
    return L_raw / nd.sqrt(nd.sum(nd.square(L_raw), axis=-1, keepdims=True))


class WishartDiffusion:
    """Diffusion coefficient with a Wishart-process prior.

    ``flow_layer`` supplies the kernel and inducing inputs, which the ρ·ν
    matrix-entry GPs reuse (the same parameter objects, not copies).
    """

    def __init__(self, flow_layer, rank=5, nu=None, lambda_init=1e-3, use_lambda=True,
                 learn_lambda=True, seed=0, name="wishart"):
        D = flow_layer.input_dim
        self.dim = D
        self.rank = int(rank)
        self.nu = self.rank if nu is None else int(nu)
        if self.rank < 1 or self.nu < 1:
            raise ContractError("rank and nu must be positive")
        rng = np.random.default_rng(seed)
        self.L_raw = nd.Tensor(rng.standard_normal((D, self.rank)), requires_grad=True,
                               name=f"{name}.L_raw")
        self.use_lambda = bool(use_lambda)
        self.learn_lambda = bool(learn_lambda) and self.use_lambda
        self.lambda_raw = nd.Tensor(nd.softplus_inverse(np.full(D, lambda_init)),
                                    requires_grad=self.learn_lambda, name=f"{name}.lambda_raw")
        self.J_layer = SvgpLayer(flow_layer.Z, self.rank * self.nu, flow_layer.kernel,
                                 fixed_prior_covariance=False, jitter=flow_layer.jitter,
                                 name=f"{name}.J")

    def own_parameters(self):
        params = [self.L_raw] + self.J_layer.own_parameters()
        if self.learn_lambda:
            params.append(self.lambda_raw)
        return params

    @property
    def L(self):
        return row_normalize(self.L_raw)

    def lambda_diag(self):
        """Diagonal of Λ (a length-D tensor), or None when disabled."""
        if not self.use_lambda:
            return None
        return nd.softplus(self.lambda_raw)

    def J_marginal(self, X=None, proj=None, chol=None):
        if proj is None:
            proj = self.J_layer.project(X, chol)
        return MarginalGaussian(mean=self.J_layer.mean(proj), var=self.J_layer.variance(proj))

    def sample_sqrt_sigma(self, X=None, noise=None, proj=None, chol=None):
        """Sample the square-root factors L·J(x), one D×ν matrix per row of X.

        ``noise`` is standard normal of shape n×ρ×ν. Returns the n×D×ν factor
        stack and the Λ diagonal (None when the white-noise term is off).
        """
        mg = self.J_marginal(X, proj, chol)
        n = mg.mean.shape[0]
        noise = nd.as_tensor(noise)
        if noise.shape != (n, self.rank, self.nu):
            raise ContractError(f"noise must have shape {(n, self.rank, self.nu)}, got {noise.shape}")
        J = sample_marginal(mg, nd.reshape(noise, (n, self.rank * self.nu)))
        J = nd.reshape(J, (n, self.rank, self.nu))
        return nd.matmul(self.L, J), self.lambda_diag()

    def sigma(self, X, noise):
        """Full Σ(x) = (LJ)(LJ)ᵀ + Λ, n×D×D."""
        factor, lam = self.sample_sqrt_sigma(X, noise)
        out = nd.matmul(factor, factor.mT)
        if lam is not None:
            out = out + nd.diag_embed(lam)
        return out

    def kl(self, chol=None):
        return self.J_layer.kl(chol)


def rank_projection_check(w, R, X, noise):
    """Samples of R Σ(x) Rᵀ for a fixed r×D matrix R."""
    R = nd.as_tensor(R)
    if R.ndim != 2 or R.shape[1] != w.dim:
        raise ContractError(f"R must be r×{w.dim}")
    if np.linalg.matrix_rank(R.value) < R.shape[0]:
        raise ContractError("R must have full row rank")
    sig = w.sigma(X, noise)
    return nd.matmul(nd.matmul(R, sig), R.T)
