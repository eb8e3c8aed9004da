"""Euler–Maruyama integration of a state-dependent random field.

    x ← x + μ(x)·Δ + √Δ · (F(x)·b + d(x) ⊙ b')

where F is a (possibly absent) full square-root factor and d a (possibly
absent) diagonal square root. All randomness comes from a
:class:`NoiseStream`, keyed by (seed, context..., kind, sample, step), so a
path is reproducible regardless of how samples are batched.
"""

import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from . import ndcore as nd
from .errors import ContractError, DivergenceError

BROWNIAN = 0
FIELD = 1


@dataclass(frozen=True)
class FlowConfig:
    horizon: float = 1.0
    num_steps: int = 20
    mc_samples: int = 5

    def __post_init__(self):
        if not self.horizon > 0:
            raise ContractError("horizon must be positive")
        if self.num_steps < 1 or self.mc_samples < 1:
            raise ContractError("num_steps and mc_samples must be positive")

    @property
    def dt(self):
        return self.horizon / self.num_steps


class NoiseStream:
    """Counter-based standard-normal draws.

    ``normal(shape, kind, sample, step)`` depends only on the stream key and
    the counters, never on call order.
    """

    def __init__(self, seed, *context):
        self.key = (int(seed),) + tuple(int(c) for c in context)

    def child(self, *context):
        return NoiseStream(*self.key, *context)

    def normal(self, shape, *counter):
        rng = np.random.default_rng(list(self.key) + [int(c) for c in counter])
        return rng.standard_normal(shape)


class ZeroNoise(NoiseStream):
    """A stream whose draws are all exactly zero."""

    def __init__(self):
        super().__init__(0)

    def child(self, *context):
        return self

    def normal(self, shape, *counter):
        return np.zeros(shape)


@dataclass
class Coefficients:
    drift: nd.Tensor
    factor: Optional[nd.Tensor] = None   # n×D×K
    diag: Optional[nd.Tensor] = None     # n×D or D


class FieldSampler:
    """Drift and diffusion square root of the field, evaluated together.

    ``evaluate(x, noise_j)`` returns :class:`Coefficients`; ``noise_shape`` is
    the per-point shape of the field noise (None when the field is not
    random), ``factor_cols`` the column count K of the full factor and
    ``diagonal`` whether a diagonal root is present.
    """

    def __init__(self, evaluate: Callable, dim: int, noise_shape: Optional[Tuple[int, ...]] = None,
                 factor_cols: int = 0, diagonal: bool = False):
        self.evaluate = evaluate
        self.dim = int(dim)
        self.noise_shape = None if noise_shape is None else tuple(noise_shape)
        self.factor_cols = int(factor_cols)
        self.diagonal = bool(diagonal)

    @classmethod
    def from_functions(cls, drift, dim, sqrt_diffusion=None, noise_shape=None,
                       factor_cols=0, diagonal=False):
        """Build from a drift callable and an optional ``(x, noise_j) -> (factor, diag)``."""
        def evaluate(x, noise_j):
            if sqrt_diffusion is None:
                return Coefficients(drift(x))
            factor, diag = sqrt_diffusion(x, noise_j)
            return Coefficients(drift(x), factor, diag)
        return cls(evaluate, dim, noise_shape, factor_cols, diagonal)

    @property
    def brownian_dim(self):
        return self.factor_cols + (self.dim if self.diagonal else 0)

    @property
    def deterministic(self):
        return self.brownian_dim == 0


def _diffusion_increment(coef, noise_b, factor_cols):
    parts = []
    if coef.factor is not None:
        b = nd.Tensor(noise_b[:, :factor_cols])
        parts.append(nd.sum(coef.factor * nd.expand_dims(b, -2), axis=-1))
    if coef.diag is not None:
        b = nd.Tensor(noise_b[:, factor_cols:])
        parts.append(coef.diag * b)
    if not parts:
        return None
    return parts[0] if len(parts) == 1 else parts[0] + parts[1]


def _check_finite(x, step, time=None):
    if not np.all(np.isfinite(x.value)):
        where = f" at t={time:g}" if time is not None else ""
        raise DivergenceError(f"state became non-finite at step {step}{where}", step=step, time=time)


def em_step(x, field, dt, noise_j=None, noise_b=None, coef=None, step=0):
    """One Euler–Maruyama update. ``coef`` may carry precomputed coefficients at x."""
    if not dt > 0:
        raise ContractError("dt must be positive")
    x = nd.as_tensor(x)
    if coef is None:
        coef = field.evaluate(x, noise_j)
    out = x + coef.drift * dt
    if noise_b is not None:
        inc = _diffusion_increment(coef, np.asarray(noise_b), field.factor_cols)
        if inc is not None:
            out = out + math.sqrt(dt) * inc
    _check_finite(out, step)
    return out


def _draw(noise, kind, shape, samples, n, step):
    """Noise for all MC samples at one step, stacked sample-major (S·n rows)."""
    if shape is None:
        return None
    blocks = [noise.normal((n,) + tuple(shape), kind, s, step) for s in range(samples)]
    return blocks[0] if samples == 1 else np.concatenate(blocks, axis=0)


def simulate(x0, field, times, max_step, noise, samples=1, record=None, substeps=None):
    """Integrate from ``times[0]`` through every time in ``times``.

    Each interval is cut into ceil(Δ/max_step) equal sub-steps (or exactly
    ``substeps`` per interval when given). Returns the list of states at each
    time, each (samples·n)×D with sample-major rows. If ``record`` is given it
    is called as ``record(i, x, coef)`` at every listed time with the field
    coefficients at that state (the same ones used for the next step).
    """
    x = nd.as_tensor(x0)
    if x.ndim != 2 or x.shape[1] != field.dim:
        raise ContractError(f"x0 must be n×{field.dim}, got {x.shape}")
    if not np.all(np.isfinite(x.value)):
        raise ContractError("x0 must be finite")
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) <= 0):
        raise ContractError("times must be strictly increasing")
    n = x.shape[0]
    if samples > 1:
        x = nd.concatenate([x] * samples, axis=0)
    states = [x]
    step = 0
    for i, t in enumerate(times):
        last = i == len(times) - 1
        coef = None
        if record is not None or not last:
            nj = _draw(noise, FIELD, field.noise_shape, samples, n, step)
            coef = field.evaluate(x, None if nj is None else nd.Tensor(nj))
        if record is not None:
            record(i, x, coef)
        if last:
            break
        span = times[i + 1] - t
        count = substeps or max(1, int(math.ceil(span / max_step - 1e-9)))
        dt = span / count
        for k in range(count):
            if coef is None:
                nj = _draw(noise, FIELD, field.noise_shape, samples, n, step)
                coef = field.evaluate(x, None if nj is None else nd.Tensor(nj))
            nb = None
            if field.brownian_dim:
                nb = _draw(noise, BROWNIAN, (field.brownian_dim,), samples, n, step)
            try:
                x = em_step(x, field, dt, noise_b=nb, coef=coef, step=step)
            except DivergenceError as exc:
                raise DivergenceError(str(exc) + f" (interval ending t={times[i + 1]:g})",
                                      step=step, time=float(times[i + 1])) from None
            coef = None
            step += 1
        states.append(x)
    return states


def integrate(x0, field, cfg, noise):
    """Terminal states x_T for ``cfg.mc_samples`` independent paths, S×n×D."""
    x0 = nd.as_tensor(x0)
    n = x0.shape[0]
    states = simulate(x0, field, [0.0, cfg.horizon], cfg.dt, noise, cfg.mc_samples,
                      substeps=cfg.num_steps)
    return nd.reshape(states[-1], (cfg.mc_samples, n, field.dim))
