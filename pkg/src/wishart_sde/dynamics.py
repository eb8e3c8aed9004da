"""Latent SDE dynamics with structured observation noise.

    x_t follows the flow SDE,   y_t ~ N(g(x_t), A Σ(x_t) Aᵀ + Λ_obs).

The observation density is evaluated through the matrix determinant lemma
and the Woodbury identity, so B = AΣAᵀ + Λ is never formed.
"""

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ndcore as nd
from .errors import ContractError
from .kernels import RbfArdKernel
from .models import LOG_2PI, assemble_elbo
from .sdeflow import Coefficients, FieldSampler, NoiseStream, simulate
from .svgp import SvgpLayer, kmeans_inducing
from .wishart import WishartDiffusion

DYNAMICS_VARIANTS = ("wishart", "diagonal", "nodrift")
OBSERVATION = 2


@dataclass
class SequenceBatch:
    times: np.ndarray
    observations: np.ndarray
    mask: Optional[np.ndarray] = None
    sequence_id: int = 0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.observations = np.asarray(self.observations, dtype=float)
        if self.observations.ndim != 2 or self.observations.shape[0] != self.times.shape[0]:
            raise ContractError("observations must be len(times)×η")
        if np.any(np.diff(self.times) <= 0):
            raise ContractError("times must be strictly increasing")
        if self.mask is None:
            self.mask = np.ones(self.observations.shape, dtype=bool)

    def __len__(self):
        return self.times.shape[0]


def windows(ds, length=64):
    """Cut a time series into contiguous, non-overlapping training sequences."""
    if length < 1:
        raise ContractError("window length must be positive")
    out = []
    for k, start in enumerate(range(0, len(ds), length)):
        stop = min(start + length, len(ds))
        out.append(SequenceBatch(ds.times[start:stop], ds.Y[start:stop], ds.mask[start:stop], k))
    return out


def _full_factor(factor, diag):
    """Stack a D×K factor and a diagonal root into one D×(K+D) factor."""
    parts = []
    if factor is not None:
        parts.append(factor)
    if diag is not None:
        d = diag
        if d.ndim == 1:
            d = nd.expand_dims(d, 0)
        parts.append(nd.diag_embed(d))
    if not parts:
        return None
    if len(parts) == 1:
        return parts[0]
    n = max(p.shape[0] for p in parts)
    parts = [p if p.shape[0] == n else nd.broadcast_to(p, (n,) + p.shape[1:]) for p in parts]
    return nd.concatenate(parts, axis=-1)


def obs_loglik(y, g, factor, A, lam, var_g=None):
    """log N(y; g, (AF)(AF)ᵀ + Λ), batched over leading rows.

    ``y`` and ``g`` are n×η (or length η), ``factor`` n×D×K (or D×K, or None),
    ``A`` η×D and ``lam`` the η diagonal entries of Λ. With ``var_g`` the value
    is the expectation over g ~ N(g, diag var_g), which subtracts
    ½ Σ_j var_j (B⁻¹)_jj.
    """
    y, g, lam = nd.as_tensor(y), nd.as_tensor(g), nd.as_tensor(lam)
    if np.any(lam.value <= 0):
        raise ContractError("Λ must be positive elementwise")
    single = y.ndim == 1
    if single:
        y, g = nd.expand_dims(y, 0), nd.expand_dims(g, 0)
        if var_g is not None:
            var_g = nd.expand_dims(nd.as_tensor(var_g), 0)
        if factor is not None:
            factor = nd.expand_dims(nd.as_tensor(factor), 0)
    eta = y.shape[-1]
    r = y - g
    inv_lam = 1.0 / lam
    quad = nd.sum(nd.square(r) * inv_lam, axis=-1)
    logdet = nd.sum(nd.log(lam))
    diag_binv = nd.broadcast_to(inv_lam, r.shape)
    if factor is not None:
        W = nd.matmul(nd.as_tensor(A), nd.as_tensor(factor))              # n×η×K
        K = W.shape[-1]
        WtLi = nd.swapaxes(W, -1, -2) * nd.expand_dims(inv_lam, 0)          # n×K×η
        C = nd.eye(K) + nd.matmul(WtLi, W)
        Lc = nd.cholesky(C, jitter=0.0)
        logdet = logdet + nd.cholesky_logdet(Lc)
        v = nd.triangular_solve(Lc, nd.matmul(WtLi, nd.expand_dims(r, -1)))
        quad = quad - nd.sum(nd.square(v), axis=(-2, -1))
        if var_g is not None:
            Mx = nd.triangular_solve(Lc, WtLi)
            diag_binv = diag_binv - nd.sum(nd.square(Mx), axis=-2)
    out = -0.5 * eta * LOG_2PI - 0.5 * logdet - 0.5 * quad
    if var_g is not None:
        out = out - 0.5 * nd.sum(nd.as_tensor(var_g) * diag_binv, axis=-1)
    return out[0] if single else out


def obs_loglik_dense(y, g, factor, A, lam):
    """Reference log N(y; g, B) with B formed explicitly (plain numpy)."""
    y, g, lam = np.asarray(y, float), np.asarray(g, float), np.asarray(lam, float)
    B = np.diag(lam)
    if factor is not None:
        W = np.asarray(A) @ np.asarray(factor)
        B = B + W @ W.T
    L = np.linalg.cholesky(B)
    z = np.linalg.solve(L, y - g)
    return -0.5 * len(y) * LOG_2PI - np.sum(np.log(np.diag(L))) - 0.5 * z @ z


def _orthonormal(rows, cols, rng):
    q, _ = np.linalg.qr(rng.standard_normal((max(rows, cols), max(rows, cols))))
    return q[:rows, :cols]


class DynamicalModel:
    """Latent SDE whose observations carry state-dependent correlated noise.

    ``variant`` is ``wishart`` (Wishart diffusion), ``diagonal`` (learned
    diagonal diffusion with A fixed to the identity) or ``nodrift`` (Wishart
    diffusion, drift held at zero). ``g`` is ``"identity"`` (latent dimension
    equal to η) or ``"gp"``. With an identity map the initial state is the
    first observation of each sequence (``x0_mode="pinv"`` uses A⁺y₀ instead);
    with a GP map it is a free parameter per training sequence.
    """

    def __init__(self, obs_dim, Z, variant="wishart", g="identity", rank=None, nu=None,
                 max_step=1.0, mc_samples=5, flow_variance=0.1, lengthscale=1.0,
                 lambda_init=0.05, lambda_obs_init=0.05, num_sequences=1, Z_g=None,
                 x0_mode="observation", jitter=nd.DEFAULT_JITTER, seed=0):
        if variant not in DYNAMICS_VARIANTS:
            raise ContractError(f"unknown dynamics variant {variant!r}; "
                                f"expected one of {', '.join(DYNAMICS_VARIANTS)}")
        if g not in ("identity", "gp"):
            raise ContractError("g must be 'identity' or 'gp'")
        if x0_mode not in ("observation", "pinv"):
            raise ContractError("x0_mode must be 'observation' or 'pinv'")
        Z = np.asarray(Z, dtype=float)
        self.variant, self.g_kind, self.x0_mode = variant, g, x0_mode
        self.obs_dim = int(obs_dim)
        self.latent_dim = D = Z.shape[1]
        if g == "identity" and D != self.obs_dim:
            raise ContractError("an identity observation map needs latent dim == obs dim")
        if variant == "diagonal" and D != self.obs_dim:
            raise ContractError("the diagonal variant fixes A = I and needs latent dim == obs dim")
        if max_step <= 0 or mc_samples < 1:
            raise ContractError("max_step and mc_samples must be positive")
        self.max_step = float(max_step)
        self.mc_samples = int(mc_samples)
        rng = np.random.default_rng([seed, 11])

        kernel = RbfArdKernel(D, lengthscale=lengthscale, variance=flow_variance,
                              name="flow.kernel")
        self.flow_layer = SvgpLayer(Z, D, kernel, fixed_prior_covariance=True, jitter=jitter,
                                    name="flow")
        self.diffusion = None
        self.lambda_flow_raw = None
        if variant == "diagonal":
            self.lambda_flow_raw = nd.Tensor(nd.softplus_inverse(np.full(D, lambda_init)),
                                             requires_grad=True, name="flow.lambda_raw")
            self.A = nd.Tensor(np.eye(D), name="A")
        else:
            rank = D if rank is None else rank
            self.diffusion = WishartDiffusion(self.flow_layer, rank=rank, nu=nu,
                                              lambda_init=lambda_init, seed=seed)
            self.A = nd.Tensor(_orthonormal(self.obs_dim, D, rng), requires_grad=True, name="A")
        self.lambda_obs_raw = nd.Tensor(nd.softplus_inverse(np.full(self.obs_dim, lambda_obs_init)),
                                        requires_grad=True, name="lambda_obs_raw")
        self.g_layer = None
        self.x0 = None
        if g == "gp":
            Z_g = Z if Z_g is None else np.asarray(Z_g, dtype=float)
            self.g_layer = SvgpLayer(Z_g, self.obs_dim, RbfArdKernel(D, name="g.kernel"),
                                     jitter=jitter, name="g")
            self.x0 = nd.Tensor(np.zeros((num_sequences, D)), requires_grad=True, name="x0")

    # ---------------------------------------------------------- parameters

    @property
    def lambda_obs(self):
        return nd.softplus(self.lambda_obs_raw)

    def g_parameters(self):
        params = [self.lambda_obs_raw]
        if self.g_layer is not None:
            params = self.g_layer.parameters() + [self.x0] + params
        return params

    def flow_parameters(self):
        params = list(self.flow_layer.parameters())
        if self.variant == "nodrift":
            params = [p for p in params if p is not self.flow_layer.q_mu]
        if self.diffusion is not None:
            params += self.diffusion.own_parameters()
        else:
            params.append(self.lambda_flow_raw)
        if self.A.requires_grad:
            params.append(self.A)
        return params

    def named_parameters(self):
        out = OrderedDict()
        for p in self.g_parameters() + self.flow_parameters():
            if p.requires_grad and p.name not in out:
                out[p.name] = p
        return out

    # ---------------------------------------------------------------- flow

    def field(self, chol=None):
        layer, D = self.flow_layer, self.latent_dim
        if chol is None:
            chol = layer.prior_chol()
        zero_drift = self.variant == "nodrift"

        if self.variant == "diagonal":
            root = nd.sqrt(nd.softplus(self.lambda_flow_raw))

            def evaluate(x, nj):
                return Coefficients(layer.mean(layer.project(x, chol)), diag=root)
            return FieldSampler(evaluate, D, diagonal=True)

        w = self.diffusion

        def evaluate(x, nj):
            proj = layer.project(x, chol)
            factor, lam = w.sample_sqrt_sigma(proj=proj, noise=nj)
            drift = nd.Tensor(np.zeros((x.shape[0], D))) if zero_drift else layer.mean(proj)
            return Coefficients(drift, factor=factor, diag=None if lam is None else nd.sqrt(lam))
        return FieldSampler(evaluate, D, noise_shape=(w.rank, w.nu), factor_cols=w.nu,
                            diagonal=w.use_lambda)

    def initial_state(self, batch):
        if self.g_layer is not None:
            if not 0 <= batch.sequence_id < self.x0.shape[0]:
                raise ContractError(f"no initial state for sequence {batch.sequence_id}")
            return nd.getitem(self.x0, slice(batch.sequence_id, batch.sequence_id + 1))
        y0 = batch.observations[:1]
        if self.x0_mode == "pinv":
            y0 = y0 @ np.linalg.pinv(self.A.value).T
        return nd.Tensor(y0)

    def observe(self, x, coef):
        """Mean, variance (None for identity g) and B-factor at states ``x``."""
        if self.g_layer is None:
            mean, var = x, None
        else:
            mg = self.g_layer.conditional(x)
            mean, var = mg.mean, mg.var
        return mean, var, _full_factor(coef.factor, coef.diag)

    def state_loglik(self, y, x, coef):
        """Per-row expected log density of ``y`` (broadcast) at states ``x``."""
        mean, var, F = self.observe(x, coef)
        yb = nd.Tensor(np.broadcast_to(np.asarray(y, dtype=float), mean.shape))
        return obs_loglik(yb, mean, F, self.A, self.lambda_obs, var_g=var)

    # ---------------------------------------------------------------- ELBO

    def kl_terms(self, chol=None):
        zero = nd.Tensor(0.0)
        kl_g = self.g_layer.kl() if self.g_layer is not None else zero
        if chol is None:
            chol = self.flow_layer.prior_chol()
        kl_f = self.flow_layer.kl(chol) if self.variant != "nodrift" else zero
        kl_sigma = self.diffusion.kl(chol) if self.diffusion is not None else zero
        return kl_g, kl_f, kl_sigma

    def group_loglik(self, group, noise, chol=None, mc_samples=None):
        """Σ over sequences and times of the MC-averaged expected observation log density.

        Every sequence in ``group`` must share one relative time grid; they are
        integrated side by side as rows of a single state matrix.
        """
        S = self.mc_samples if mc_samples is None else mc_samples
        grid = group[0].times - group[0].times[0]
        for b in group[1:]:
            if len(b) != len(grid) or not np.array_equal(b.times - b.times[0], grid):
                raise ContractError("sequences in a group must share a relative time grid")
        x0 = nd.concatenate([self.initial_state(b) for b in group], axis=0)
        obs = np.stack([b.observations for b in group], axis=1)         # T×n×η
        obs = np.concatenate([obs] * S, axis=1)                         # sample-major rows
        terms = []

        def record(i, x, coef):
            terms.append(nd.sum(self.state_loglik(obs[i], x, coef)) / S)

        simulate(x0, self.field(chol), grid if len(grid) > 1 else [0.0], self.max_step,
                 noise, samples=S, record=record)
        return nd.sum(nd.stack(terms))

    def sequence_loglik(self, batch, noise, chol=None, mc_samples=None):
        return self.group_loglik([batch], noise, chol, mc_samples)

    def sequence_elbo(self, batch, c=1.0, noise=None, scale=1.0, mc_samples=None):
        return self.batch_elbo([batch], c, noise, scale, mc_samples)

    def batch_elbo(self, batches, c=1.0, noise=None, scale=1.0, mc_samples=None):
        """ELBO over several sequences; those with a common time grid share one rollout."""
        noise = noise if noise is not None else NoiseStream(0)
        chol = self.flow_layer.prior_chol()
        groups = OrderedDict()
        for b in batches:
            key = (len(b), (b.times - b.times[0]).tobytes())
            groups.setdefault(key, []).append(b)
        ell = nd.sum(nd.stack([self.group_loglik(g, noise.child(g[0].sequence_id), chol,
                                                 mc_samples) for g in groups.values()]))
        return assemble_elbo(ell, *self.kl_terms(chol), c=c, scale=scale)

    def num_units(self, data):
        return len(data)

    def minibatch_elbo(self, data, idx, c, noise):
        total = sum(len(b) for b in data)
        chosen = [data[i] for i in idx]
        scale = total / sum(len(b) for b in chosen)
        return self.batch_elbo(chosen, c, noise, scale)


@dataclass
class ForecastResult:
    times: np.ndarray              # H forecast times
    latent: np.ndarray             # n_sims×H×D
    observed: np.ndarray           # n_sims×H×η sampled observations
    loglik: Optional[np.ndarray] = None   # n_sims×H per-simulation log densities
    extra: dict = field(default_factory=dict)

    @property
    def mean(self):
        return self.loglik.mean(axis=0)

    @property
    def stderr(self):
        n = self.loglik.shape[0]
        if n == 1:
            return np.zeros(self.loglik.shape[1])
        centred = self.loglik - self.loglik.mean(axis=0)
        return np.sqrt(np.sum(centred ** 2, axis=0) / (n - 1) / n)

    @property
    def mixture(self):
        """log of the mean density across simulations, per time."""
        top = self.loglik.max(axis=0)
        return top + np.log(np.mean(np.exp(self.loglik - top), axis=0))


def forecast(model, context, horizon, n_sims=50, noise=None, truth=None, step=1.0):
    """Roll the SDE forward from the end of ``context`` for ``horizon`` time units.

    The grid is every ``step`` after the last context time (or the times of
    ``truth`` inside the horizon). With ``truth`` the per-simulation
    log density of each held-out observation is returned as well.
    """
    if not horizon > 0:
        raise ContractError("horizon must be positive")
    if n_sims < 1:
        raise ContractError("n_sims must be positive")
    noise = noise if noise is not None else NoiseStream(0)
    t_end = context.times[-1]
    if truth is not None:
        keep = (truth.times > t_end) & (truth.times <= t_end + horizon + 1e-9)
        grid = truth.times[keep]
        targets = truth.observations[keep]
        if grid.size == 0:
            raise ContractError("no held-out observations inside the horizon")
    else:
        grid = t_end + step * np.arange(1, int(math.floor(horizon / step + 1e-9)) + 1)
        targets = None

    if model.g_layer is None:
        x0, times, skip = nd.Tensor(context.observations[-1:]), np.concatenate([[t_end], grid]), 1
        if model.x0_mode == "pinv":
            x0 = nd.Tensor(context.observations[-1:] @ np.linalg.pinv(model.A.value).T)
    else:
        x0 = model.initial_state(context)
        times = np.concatenate([context.times, grid])
        skip = len(context)

    H, D, eta = grid.size, model.latent_dim, model.obs_dim
    latent = np.empty((n_sims, H, D))
    observed = np.empty((n_sims, H, eta))
    loglik = np.empty((n_sims, H)) if targets is not None else None
    A, lam = model.A.value, model.lambda_obs.value

    def record(i, x, coef):
        if i < skip:
            return
        h = i - skip
        mean, var, F = model.observe(x, coef)
        latent[:, h] = x.value
        b1 = noise.normal((n_sims, eta), OBSERVATION, h)
        draw = mean.value + np.sqrt(lam) * b1
        if var is not None:
            draw = draw + np.sqrt(var.value) * noise.normal((n_sims, eta), OBSERVATION + 1, h)
        if F is not None:
            Fv = np.broadcast_to(F.value, (n_sims,) + F.shape[-2:])
            b2 = noise.normal((n_sims, Fv.shape[-1]), OBSERVATION + 2, h)
            draw = draw + np.einsum("ed,sdk,sk->se", A, Fv, b2)
        observed[:, h] = draw
        if targets is not None:
            yb = np.broadcast_to(targets[h], mean.shape)
            ll = obs_loglik(yb, mean, F, A, lam) if var is None else _predictive_loglik(
                yb, mean, var, F, A, lam)
            loglik[:, h] = ll.value

    field_ = model.field()
    # one independent path per simulation: the sample index keys the noise
    simulate(x0, field_, times, model.max_step, noise, samples=n_sims, record=record)
    return ForecastResult(grid, latent, observed, loglik)


def _predictive_loglik(y, mean, var, F, A, lam):
    """log N(y; mean, B + diag var): g's marginal variance joins B as extra factor columns."""
    root = nd.diag_embed(nd.sqrt(nd.maximum(var, 0.0)))
    if F is not None:
        AF = nd.matmul(nd.Tensor(A), F)
        AF = nd.broadcast_to(AF, root.shape[:1] + AF.shape[1:])
        root = nd.concatenate([AF, root], axis=-1)
    return obs_loglik(y, mean, root, np.eye(y.shape[-1]), lam)


def cross_correlation_density(trajectories, dim_i, dim_j, bins=20, value_range=None):
    """Joint histogram of two observed coordinates over simulations and times.

    ``trajectories`` is n_sims×H×η. Returns ``(density, counts, edges_i,
    edges_j)``; ``density`` sums to one.
    """
    traj = np.asarray(trajectories, dtype=float)
    if traj.ndim == 2:
        traj = traj[:, None, :]
    if traj.shape[0] < 2:
        raise ContractError("need at least two simulations")
    a, b = traj[..., dim_i].ravel(), traj[..., dim_j].ravel()
    counts, ei, ej = np.histogram2d(a, b, bins=bins, range=value_range)
    return counts / counts.sum(), counts, ei, ej


def build_dynamical_model(variant, train, num_inducing=50, seed=0, **kwargs):
    """Model for a TimeSeriesDataset (or list of SequenceBatch) with k-means inducing inputs."""
    Y = train.Y if hasattr(train, "Y") else np.concatenate([b.observations for b in train])
    Z = kmeans_inducing(Y, num_inducing, seed=seed)
    return DynamicalModel(Y.shape[1], Z, variant=variant, seed=seed, **kwargs)
