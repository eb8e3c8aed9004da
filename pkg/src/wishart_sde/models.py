"""Regression models: inputs pushed through an SDE flow into a final GP layer.

Four variants share one code path:

* ``SGP``      no flow; the final layer sees the raw inputs.
* ``NoNoise``  deterministic flow (drift only).
* ``DiffGP``   diagonal diffusion from the flow GP's own marginal variance.
* ``DiffWGP``  diffusion from a low-rank Wishart process.
"""

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .errors import ContractError
from .kernels import RbfArdKernel
from .sdeflow import Coefficients, FieldSampler, FlowConfig, NoiseStream, integrate
from .svgp import MarginalGaussian, SvgpLayer, kmeans_inducing
from .wishart import WishartDiffusion

VARIANTS = ("SGP", "NoNoise", "DiffGP", "DiffWGP")
LOG_2PI = math.log(2.0 * math.pi)


def parse_variant(tag):
    for v in VARIANTS:
        if v.lower() == str(tag).lower():
            return v
    raise ContractError(f"unknown variant {tag!r}; expected one of {', '.join(VARIANTS)}")


@dataclass
class ElboBreakdown:
    """ELBO terms. ``total = scale·expected_loglik − kl_g − c²·kl_f − c·kl_sigma``."""

    expected_loglik: nd.Tensor
    kl_g: nd.Tensor
    kl_f: nd.Tensor
    kl_sigma: nd.Tensor
    total: nd.Tensor
    scale: float = 1.0
    anneal: float = 1.0

    def as_floats(self):
        return {
            "elbo": self.total.item(),
            "expected_loglik": self.expected_loglik.item(),
            "kl_g": self.kl_g.item(),
            "kl_f": self.kl_f.item(),
            "kl_sigma": self.kl_sigma.item(),
        }


def assemble_elbo(ell, kl_g, kl_f, kl_sigma, c, scale):
    if not 0.0 <= c <= 1.0:
        raise ContractError(f"anneal coefficient must lie in [0, 1], got {c}")
    total = scale * ell - kl_g - (c * c) * kl_f - c * kl_sigma
    return ElboBreakdown(ell, kl_g, kl_f, kl_sigma, total, scale, c)


def expected_loglik(g, y, noise_var):
    """MC average of Σ_i E_q(g_i)[log N(y_i; g_i, σ²I)].

    ``g`` holds marginals with mean/var of shape S×n×η (one slice per flow
    sample); the Gaussian expectation over g is exact:
    log N(y; μ, σ²) − var/(2σ²).
    """
    noise_var = nd.as_tensor(noise_var)
    if np.any(noise_var.value <= 0):
        raise ContractError("observation noise variance must be positive")
    y = nd.as_tensor(y)
    mean = g.mean
    if mean.ndim == 2:
        mean = nd.expand_dims(mean, 0)
    var = g.var if g.var.ndim == 3 else nd.expand_dims(g.var, 0)
    if tuple(mean.shape[1:]) != tuple(y.shape):
        raise ContractError(f"targets of shape {y.shape} do not match predictions {mean.shape}")
    resid = nd.square(y - mean) + var
    per = -0.5 * LOG_2PI - 0.5 * nd.log(noise_var) - 0.5 * resid / noise_var
    return nd.sum(per) / mean.shape[0]


def gaussian_logpdf(y, mean, var):
    """Elementwise log N(y; mean, var) on plain arrays."""
    return -0.5 * (LOG_2PI + np.log(var) + (y - mean) ** 2 / var)


@dataclass
class Prediction:
    """Gaussian-mixture predictive over MC flow samples (component axis first)."""

    component_mean: np.ndarray  # S×n×η
    component_var: np.ndarray   # S×n×η, includes observation noise

    @property
    def mean(self):
        return self.component_mean.mean(axis=0)

    @property
    def var(self):
        second = (self.component_var + self.component_mean ** 2).mean(axis=0)
        return second - self.mean ** 2

    def component_logpdf(self, y):
        """S×n log densities of each point under each component."""
        return gaussian_logpdf(np.asarray(y)[None], self.component_mean,
                               self.component_var).sum(axis=-1)

    def logpdf(self, y):
        """Per-point log of the mixture density, length n."""
        comp = self.component_logpdf(y)
        top = comp.max(axis=0)
        return top + np.log(np.mean(np.exp(comp - top), axis=0))


class RegressionModel:
    def __init__(self, variant, Z, output_dim=1, flow_cfg=None, rank=5, nu=None,
                 Z_g=None, noise_init=0.1, flow_variance=1e-5, lambda_init=1e-3,
                 use_lambda=True, learn_lambda=True, jitter=nd.DEFAULT_JITTER, seed=0):
        self.variant = parse_variant(variant)
        Z = np.asarray(Z, dtype=float)
        self.input_dim = Z.shape[1]
        self.output_dim = int(output_dim)
        self.flow_cfg = flow_cfg or FlowConfig()
        D = self.input_dim
        Z_g = Z if Z_g is None else np.asarray(Z_g, dtype=float)
        self.g_layer = SvgpLayer(Z_g, self.output_dim, RbfArdKernel(D, name="g.kernel"),
                                 jitter=jitter, name="g")
        self.likelihood_noise_raw = nd.Tensor(nd.softplus_inverse(noise_init), requires_grad=True,
                                              name="likelihood.noise_raw")
        self.flow_layer = None
        self.diffusion = None
        if self.variant != "SGP":
            kernel = RbfArdKernel(D, variance=flow_variance, name="flow.kernel")
            self.flow_layer = SvgpLayer(Z, D, kernel,
                                        fixed_prior_covariance=self.variant != "DiffGP",
                                        jitter=jitter, name="flow")
        if self.variant == "DiffWGP":
            self.diffusion = WishartDiffusion(self.flow_layer, rank=rank, nu=nu,
                                              lambda_init=lambda_init, use_lambda=use_lambda,
                                              learn_lambda=learn_lambda, seed=seed)

    # ---------------------------------------------------------- parameters

    @property
    def rank(self):
        return self.diffusion.rank if self.diffusion is not None else None

    @property
    def noise_var(self):
        return nd.softplus(self.likelihood_noise_raw)

    def g_parameters(self):
        return self.g_layer.parameters() + [self.likelihood_noise_raw]

    def flow_parameters(self):
        if self.flow_layer is None:
            return []
        params = self.flow_layer.parameters()
        if self.diffusion is not None:
            params += self.diffusion.own_parameters()
        return params

    def named_parameters(self):
        out = OrderedDict()
        seen = set()
        for p in self.g_parameters() + self.flow_parameters():
            if id(p) not in seen and p.requires_grad:
                seen.add(id(p))
                out[p.name] = p
        return out

    # ---------------------------------------------------------------- flow

    def field(self, chol=None):
        """The flow's FieldSampler; ``chol`` is the shared chol k_f(Z, Z)."""
        layer, diffusion = self.flow_layer, self.diffusion
        D = self.input_dim
        if chol is None:
            chol = layer.prior_chol()

        if self.variant == "NoNoise":
            def evaluate(x, nj):
                return Coefficients(layer.mean(layer.project(x, chol)))
            return FieldSampler(evaluate, D)

        if self.variant == "DiffGP":
            def evaluate(x, nj):
                proj = layer.project(x, chol)
                root = nd.sqrt(nd.maximum(layer.variance(proj), 0.0))
                return Coefficients(layer.mean(proj), diag=root)
            return FieldSampler(evaluate, D, diagonal=True)

        def evaluate(x, nj):
            proj = layer.project(x, chol)
            factor, lam = diffusion.sample_sqrt_sigma(proj=proj, noise=nj)
            diag = None if lam is None else nd.sqrt(lam)
            return Coefficients(layer.mean(proj), factor=factor, diag=diag)
        return FieldSampler(evaluate, D, noise_shape=(diffusion.rank, diffusion.nu),
                            factor_cols=diffusion.nu, diagonal=diffusion.use_lambda)

    def terminal_states(self, X, noise, mc_samples=None, chol=None):
        """x_T for each MC sample, S×n×D (SGP returns X itself with S = 1)."""
        X = nd.as_tensor(X)
        if not np.all(np.isfinite(X.value)):
            raise ContractError("inputs must be finite")
        if self.variant == "SGP":
            return nd.expand_dims(X, 0)
        cfg = self.flow_cfg
        if mc_samples is not None:
            cfg = FlowConfig(cfg.horizon, cfg.num_steps, mc_samples)
        return integrate(X, self.field(chol), cfg, noise)

    def forward(self, X, noise, mc_samples=None, chol=None):
        """Marginals of g(x_T): mean and var of shape S×n×η."""
        xT = self.terminal_states(X, noise, mc_samples, chol)
        S, n, D = xT.shape
        mg = self.g_layer.conditional(nd.reshape(xT, (S * n, D)))
        return MarginalGaussian(mean=nd.reshape(mg.mean, (S, n, self.output_dim)),
                                var=nd.reshape(mg.var, (S, n, self.output_dim)))

    # ---------------------------------------------------------------- ELBO

    def kl_terms(self, chol=None):
        zero = nd.Tensor(0.0)
        kl_g = self.g_layer.kl()
        if self.flow_layer is None:
            return kl_g, zero, zero
        if chol is None:
            chol = self.flow_layer.prior_chol()
        kl_f = self.flow_layer.kl(chol)
        kl_sigma = self.diffusion.kl(chol) if self.diffusion is not None else zero
        return kl_g, kl_f, kl_sigma

    def elbo(self, X, y, c=1.0, noise=None, scale=1.0, mc_samples=None):
        noise = noise if noise is not None else NoiseStream(0)
        chol = self.flow_layer.prior_chol() if self.flow_layer is not None else None
        g = self.forward(X, noise, mc_samples, chol)
        ell = expected_loglik(g, y, self.noise_var)
        return assemble_elbo(ell, *self.kl_terms(chol), c=c, scale=scale)

    @staticmethod
    def _arrays(data):
        if isinstance(data, tuple):
            return data
        return data.X, data.y

    def num_units(self, data):
        return self._arrays(data)[0].shape[0]

    def minibatch_elbo(self, data, idx, c, noise):
        """ELBO on rows ``idx`` with the likelihood scaled by N / |batch|."""
        X, y = self._arrays(data)
        scale = X.shape[0] / len(idx)
        return self.elbo(X[idx], y[idx], c=c, noise=noise, scale=scale)

    # ----------------------------------------------------------- prediction

    def predict(self, X, n_samples=25, noise=None):
        noise = noise if noise is not None else NoiseStream(0)
        g = self.forward(X, noise, mc_samples=n_samples)
        var = g.var.value + self.noise_var.value
        return Prediction(g.mean.value.copy(), var)


def build_regression_model(variant, X, output_dim=1, num_inducing=100, seed=0, **kwargs):
    """Model with k-means inducing inputs drawn from the training inputs."""
    Z = kmeans_inducing(X, num_inducing, seed=seed)
    return RegressionModel(variant, Z, output_dim=output_dim, seed=seed, **kwargs)
