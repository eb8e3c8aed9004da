"""Run configuration: an INI file plus command-line overrides.

Grammar: standard INI sections ``[data] [model] [flow] [train] [run]
[forecast] [ablate]`` holding ``key = value`` pairs. Lists are comma
separated; empty values mean "use the default". Relative paths are resolved
against the directory of the config file.
"""

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from typing import List, Optional, Tuple

from .errors import ConfigError
from .models import parse_variant
from .dynamics import DYNAMICS_VARIANTS
from .sdeflow import FlowConfig
from .train import Schedule


@dataclass
class DataConfig:
    path: str = ""
    test_path: str = ""
    targets: List[str] = field(default_factory=list)
    features: List[str] = field(default_factory=list)
    time_column: str = ""
    delimiter: str = ","
    split: float = 0.9


@dataclass
class ModelConfig:
    kind: str = "regression"
    variant: str = "DiffWGP"
    num_inducing: int = 100
    rho: int = 5
    nu: Optional[int] = None
    g: str = "identity"
    window: int = 64
    max_step: float = 1.0
    flow_variance: Optional[float] = None
    lambda_init: Optional[float] = None
    lambda_obs_init: float = 0.05
    noise_init: float = 0.1
    x0_mode: str = "observation"


@dataclass
class TrainConfig:
    phase1_iters: int = 10000
    total_iters: int = 50000
    phase1_lr: float = 0.01
    phase2_lr: float = 0.001
    anneal_iters: int = 4000
    batch_size: int = 2000
    log_every: int = 100
    beta1: Optional[float] = None      # 0.9 for regression, 0.5 for dynamics
    clip_norm: Optional[float] = None  # off for regression, 100 for dynamics; 0 disables
    freeze_inducing: bool = False


@dataclass
class ForecastConfig:
    horizon: float = 48.0
    n_sims: int = 50
    step: float = 1.0
    pairs: List[Tuple[int, int]] = field(default_factory=lambda: [(0, 1)])
    bins: int = 20


@dataclass
class AblateConfig:
    variants: List[str] = field(default_factory=lambda: ["SGP", "NoNoise", "DiffGP", "DiffWGP"])
    seeds: List[int] = field(default_factory=lambda: [0])
    rhos: List[int] = field(default_factory=list)


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    forecast: ForecastConfig = field(default_factory=ForecastConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    seed: Optional[int] = None
    out: str = "run"
    base_dir: str = "."

    # ------------------------------------------------------------ derived

    def schedule(self):
        t = self.train
        dynamics = self.model.kind == "dynamics"
        beta1 = t.beta1 if t.beta1 is not None else (0.5 if dynamics else 0.9)
        clip = t.clip_norm if t.clip_norm is not None else (100.0 if dynamics else None)
        try:
            return Schedule(phase1_iters=t.phase1_iters, total_iters=t.total_iters,
                            phase1_lr=t.phase1_lr, phase2_lr=t.phase2_lr,
                            anneal_iters=t.anneal_iters, batch_size=t.batch_size,
                            log_every=t.log_every, beta1=beta1, clip_norm=clip or None,
                            freeze_inducing=t.freeze_inducing)
        except ValueError as exc:
            raise ConfigError(str(exc), field="train") from None

    def resolve(self, path):
        return path if os.path.isabs(path) else os.path.normpath(os.path.join(self.base_dir, path))

    def to_text(self):
        """Canonical rendering; this text is hashed and snapshotted."""
        lines = []
        for section, obj in (("data", self.data), ("model", self.model), ("flow", self.flow),
                             ("train", self.train), ("forecast", self.forecast),
                             ("ablate", self.ablate)):
            lines.append(f"[{section}]")
            for f in fields(obj):
                lines.append(f"{f.name} = {_render(getattr(obj, f.name))}")
            lines.append("")
        lines += ["[run]", f"seed = {self.seed}", ""]
        return "\n".join(lines)

    def validate(self, need_data=True):
        if self.seed is None:
            raise ConfigError("a seed is required for reproducibility", field="run.seed")
        m = self.model
        if m.kind not in ("regression", "dynamics"):
            raise ConfigError(f"unknown kind {m.kind!r}", field="model.kind")
        if m.kind == "regression":
            try:
                m.variant = parse_variant(m.variant)
            except ValueError as exc:
                raise ConfigError(str(exc), field="model.variant") from None
            if not self.data.targets:
                raise ConfigError("regression needs at least one target", field="data.targets")
        elif m.variant not in DYNAMICS_VARIANTS:
            raise ConfigError(f"unknown dynamics variant {m.variant!r}; expected one of "
                              f"{', '.join(DYNAMICS_VARIANTS)}", field="model.variant")
        for name in ("num_inducing", "rho", "window"):
            if getattr(m, name) < 1:
                raise ConfigError("must be positive", field=f"model.{name}")
        if m.nu is not None and m.nu < 1:
            raise ConfigError("must be positive", field="model.nu")
        if not 0.0 < self.data.split < 1.0:
            raise ConfigError("must lie strictly between 0 and 1", field="data.split")
        if need_data:
            if not self.data.path:
                raise ConfigError("no dataset given", field="data.path")
            for key in ("path", "test_path"):
                value = getattr(self.data, key)
                if value and not os.path.exists(self.resolve(value)):
                    raise ConfigError(f"file not found: {value}", field=f"data.{key}")
        for variant in self.ablate.variants:
            if not _known_variant(m.kind, variant):
                raise ConfigError(f"unknown variant {variant!r}", field="ablate.variants")
        self.schedule()
        return self


def _known_variant(kind, tag):
    if kind == "dynamics":
        return tag in DYNAMICS_VARIANTS
    try:
        parse_variant(tag)
    except ValueError:
        return False
    return True


def _render(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(":".join(map(str, v)) if isinstance(v, tuple) else str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _convert(raw, template, key):
    """Parse ``raw`` to the type of ``template``; raises ValueError."""
    raw = raw.strip()
    if isinstance(template, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(raw)
        return raw.lower() in ("true", "1", "yes")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    if isinstance(template, list):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if key == "pairs":
            return [tuple(int(v) for v in s.split(":")) for s in items]
        if key in ("seeds", "rhos"):
            return [int(s) for s in items]
        return items
    return raw


_ALIASES = {("flow", "steps"): "num_steps"}
_OPTIONAL = {"nu": int, "flow_variance": float, "lambda_init": float, "clip_norm": float,
             "beta1": float}


def _apply(obj, section, items):
    known = {f.name: f for f in fields(obj)}
    updates = {}
    for key, raw in items:
        key = _ALIASES.get((section, key), key)
        if key not in known:
            raise ConfigError("unknown key", field=f"{section}.{key}")
        try:
            if key in _OPTIONAL:
                updates[key] = _OPTIONAL[key](raw) if raw.strip() else None
            else:
                updates[key] = _convert(raw, getattr(obj, key), key)
        except ValueError:
            raise ConfigError(f"cannot parse {raw!r}", field=f"{section}.{key}") from None
    try:
        return replace(obj, **updates)
    except ValueError as exc:
        raise ConfigError(str(exc), field=section) from None


def parse_config(text, base_dir="."):
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], field="config") from None
    cfg = RunConfig(base_dir=base_dir)
    sections = {"data": "data", "model": "model", "flow": "flow", "train": "train",
                "forecast": "forecast", "ablate": "ablate"}
    for name in parser.sections():
        if name == "run":
            for key, raw in parser.items("run"):
                if key == "seed":
                    try:
                        cfg.seed = int(raw) if raw.strip() else None
                    except ValueError:
                        raise ConfigError(f"cannot parse {raw!r}", field="run.seed") from None
                elif key == "out":
                    cfg.out = raw.strip()
                else:
                    raise ConfigError("unknown key", field=f"run.{key}")
        elif name in sections:
            setattr(cfg, name, _apply(getattr(cfg, name), name, parser.items(name)))
        else:
            raise ConfigError("unknown section", field=name)
    return cfg


def load_config(path):
    if not os.path.exists(path):
        raise ConfigError(f"file not found: {path}", field="config")
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), base_dir=os.path.dirname(os.path.abspath(path)))


def override(cfg, **flags):
    """Apply command-line flags (None means "not given")."""
    if flags.get("seed") is not None:
        cfg.seed = flags["seed"]
    if flags.get("out") is not None:
        cfg.out = flags["out"]
    if flags.get("variant") is not None:
        cfg.model.variant = flags["variant"]
    if flags.get("rho") is not None:
        cfg.model.rho = flags["rho"]
    if flags.get("nu") is not None:
        cfg.model.nu = flags["nu"]
    flow = {}
    if flags.get("steps") is not None:
        flow["num_steps"] = flags["steps"]
    if flags.get("mc_samples") is not None:
        flow["mc_samples"] = flags["mc_samples"]
    if flow:
        try:
            cfg.flow = replace(cfg.flow, **flow)
        except ValueError as exc:
            raise ConfigError(str(exc), field="flow") from None
    if flags.get("horizon") is not None:
        cfg.forecast.horizon = flags["horizon"]
    if flags.get("n_sims") is not None:
        cfg.forecast.n_sims = flags["n_sims"]
    return cfg
