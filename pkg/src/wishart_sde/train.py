"""Adam, the two-phase warm-start schedule, KL annealing and checkpoints.

Phase 1 fits only the final layer (and the observation noise) with every
flow parameter frozen. Phase 2 trains everything at a smaller step size
while the flow KL terms are ramped in with c = min(1, iteration / 4000).
"""

import csv
import hashlib
import logging
import math
import os
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import ndcore as nd
from .errors import ContractError, SchemaError, TrainingError
from .sdeflow import NoiseStream

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iteration", "elbo", "expected_loglik", "kl_g", "kl_f", "kl_sigma", "wall_ms")
MAX_BAD_STEPS = 10


@dataclass
class Schedule:
    phase1_iters: int = 10000
    total_iters: int = 50000
    phase1_lr: float = 0.01
    phase2_lr: float = 0.001
    anneal_iters: int = 4000
    batch_size: int = 2000
    log_every: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    clip_norm: Optional[float] = None
    freeze_inducing: bool = False

    def __post_init__(self):
        if self.phase1_iters > self.total_iters:
            raise ContractError("phase1_iters cannot exceed total_iters")
        if self.anneal_iters <= 0:
            raise ContractError("anneal_iters must be positive")
        if self.batch_size < 1:
            raise ContractError("batch_size must be positive")


def anneal_coefficient(iteration, anneal_iters=4000):
    """c = min(1, iteration / anneal_iters), counted from the start of phase 2."""
    if iteration < 0:
        raise ContractError("iteration must be non-negative")
    return min(1.0, iteration / anneal_iters)


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def arrays(self):
        out = OrderedDict(step=np.array(float(self.step)),
                          hyper=np.array([self.lr, self.beta1, self.beta2, self.eps]))
        for name in self.m:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        return out

    @classmethod
    def from_arrays(cls, arrays):
        lr, b1, b2, eps = arrays["hyper"]
        state = cls(lr=float(lr), beta1=float(b1), beta2=float(b2), eps=float(eps),
                    step=int(arrays["step"]))
        for key, value in arrays.items():
            if key.startswith("m/"):
                state.m[key[2:]] = value.copy()
            elif key.startswith("v/"):
                state.v[key[2:]] = value.copy()
        return state


def adam_step(state, params, grads):
    """Ascend: params += lr · m̂ / (√v̂ + ε). ``params``/``grads`` are keyed by name."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}", parameter=name)
        if g.shape != params[name].shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape for {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.value = p.value + state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def clip_global_norm(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        return {k: g * scale for k, g in grads.items()}, total
    return grads, total


# -------------------------------------------------------------- checkpoints


def config_hash(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _shape_str(shape):
    return "scalar" if shape == () else "x".join(str(s) for s in shape)


def _parse_shape(s):
    return () if s == "scalar" else tuple(int(v) for v in s.split("x"))


def _write_block(path, arrays):
    rows, offset = [], 0
    with open(path, "wb") as fh:
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8")
            fh.write(arr.tobytes())
            rows.append((name, arr.shape, offset))
            offset += arr.nbytes
    return rows


def save_checkpoint(directory, params, optimizer=None, config_text="", meta=None):
    """Write manifest.txt, params.bin, optimizer.bin and config.snapshot."""
    os.makedirs(directory, exist_ok=True)
    params = OrderedDict((k, np.asarray(v, dtype=float)) for k, v in params.items())
    optimizer = optimizer or OrderedDict()
    p_rows = _write_block(os.path.join(directory, "params.bin"), params)
    o_rows = _write_block(os.path.join(directory, "optimizer.bin"), optimizer)
    with open(os.path.join(directory, "manifest.txt"), "w") as fh:
        fh.write(f"# config_hash {config_hash(config_text)}\n")
        for key, value in (meta or {}).items():
            fh.write(f"# meta {key} {value}\n")
        fh.write("# file params.bin\n")
        for name, shape, offset in p_rows:
            fh.write(f"{name} {_shape_str(shape)} {offset}\n")
        fh.write("# file optimizer.bin\n")
        for name, shape, offset in o_rows:
            fh.write(f"{name} {_shape_str(shape)} {offset}\n")
    with open(os.path.join(directory, "config.snapshot"), "w") as fh:
        fh.write(config_text)


@dataclass
class Checkpoint:
    params: "OrderedDict[str, np.ndarray]"
    optimizer: "OrderedDict[str, np.ndarray]"
    config_text: str
    config_hash: str
    meta: Dict[str, str]


def load_checkpoint(directory):
    manifest = os.path.join(directory, "manifest.txt")
    if not os.path.exists(manifest):
        raise SchemaError(f"{directory} is not a checkpoint (no manifest.txt)")
    blocks = {"params.bin": OrderedDict(), "optimizer.bin": OrderedDict()}
    meta, digest, current = {}, None, None
    raw = {}
    for fname in blocks:
        with open(os.path.join(directory, fname), "rb") as fh:
            raw[fname] = fh.read()
    with open(manifest) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("# config_hash "):
                digest = line.split()[2]
            elif line.startswith("# meta "):
                _, _, key, value = line.split(" ", 3)
                meta[key] = value
            elif line.startswith("# file "):
                current = line.split()[2]
            elif line.strip():
                name, shape, offset = line.rsplit(" ", 2)
                shape, offset = _parse_shape(shape), int(offset)
                count = int(np.prod(shape)) if shape else 1
                arr = np.frombuffer(raw[current], dtype="<f8", count=count, offset=offset)
                blocks[current][name] = arr.reshape(shape).astype(float)
    with open(os.path.join(directory, "config.snapshot")) as fh:
        text = fh.read()
    return Checkpoint(blocks["params.bin"], blocks["optimizer.bin"], text, digest, meta)


def assign_parameters(model, arrays):
    params = model.named_parameters()
    for name, p in params.items():
        if name not in arrays:
            raise SchemaError(f"checkpoint has no array for parameter {name}")
        if arrays[name].shape != p.shape:
            raise SchemaError(f"shape mismatch for {name}: {arrays[name].shape} vs {p.shape}")
        p.value = np.array(arrays[name], dtype=float)


# ------------------------------------------------------------------- fitting


@dataclass
class FitResult:
    model: object
    log: List[dict]
    optimizer: AdamState
    iteration: int


def _batch_indices(n_units, batch_size, iteration, seed):
    """Without replacement within an epoch; the permutation is seeded per epoch."""
    batch = min(batch_size, n_units)
    per_epoch = math.ceil(n_units / batch)
    epoch, j = divmod(iteration, per_epoch)
    perm = np.random.default_rng([int(seed), 7, epoch]).permutation(n_units)
    return np.sort(perm[j * batch:(j + 1) * batch])


def _trainable(model, phase, schedule):
    if phase == 1 or getattr(model, "variant", None) == "SGP":
        params = model.g_parameters()
    else:
        params = list(model.named_parameters().values())
    params = [p for p in params if p.requires_grad]
    if schedule.freeze_inducing and phase == 2:
        params = [p for p in params if not p.name.endswith(".Z")]
    names = OrderedDict()
    for p in params:
        names.setdefault(p.name, p)
    return names


def write_metrics(path, rows, config_text=""):
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash {config_hash(config_text)}\n")
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow([row["iteration"]] + [repr(row[k]) for k in METRIC_COLUMNS[1:6]]
                       + [row.get("wall_ms", "NA")])


def fit(model, data, schedule, seed=0, checkpoint_dir=None, config_text="", resume=None,
        record_wall_time=False, stop_at=None, callback=None):
    """Run the warm-start schedule on ``model``.

    ``data`` is whatever ``model.minibatch_elbo`` consumes; ``model.num_units(data)``
    gives the number of independent units (rows or sequences) to batch over.
    ``resume`` is a :class:`Checkpoint`; ``stop_at`` ends early (for resumable runs).
    """
    n_units = model.num_units(data)
    start, optimizer, opt_phase = 0, None, None
    if resume is not None:
        assign_parameters(model, resume.params)
        start = int(resume.meta["iteration"])
        if resume.optimizer:
            optimizer = AdamState.from_arrays(resume.optimizer)
            opt_phase = int(resume.meta.get("phase", 1))
    end = schedule.total_iters if stop_at is None else min(stop_at, schedule.total_iters)
    rows, bad, t0 = [], 0, time.perf_counter()

    for it in range(start, end):
        phase = 1 if it < schedule.phase1_iters else 2
        if phase != opt_phase:
            # each phase starts with fresh moments at its own step size
            lr = schedule.phase1_lr if phase == 1 else schedule.phase2_lr
            optimizer = AdamState(lr=lr, beta1=schedule.beta1, beta2=schedule.beta2)
            opt_phase = phase
            trainable = _trainable(model, phase, schedule)
        elif it == start:
            trainable = _trainable(model, phase, schedule)
        c = 0.0 if phase == 1 else anneal_coefficient(it - schedule.phase1_iters,
                                                       schedule.anneal_iters)
        idx = _batch_indices(n_units, schedule.batch_size, it, seed)
        noise = NoiseStream(seed, 1, it)
        with nd.Tape() as tape:
            elbo = model.minibatch_elbo(data, idx, c, noise)
            objective = elbo.total
        value = objective.item()
        if not math.isfinite(value):
            bad += 1
            log.warning("non-finite ELBO at iteration %d", it)
            if bad >= MAX_BAD_STEPS:
                _dump_diagnostics(model, checkpoint_dir, it, elbo)
                raise TrainingError(f"ELBO non-finite for {bad} consecutive steps (iteration {it})")
            continue
        bad = 0
        grads = tape.gradient(objective, list(trainable.values()))
        grads = {p.name: g for p, g in grads.items()}
        if schedule.clip_norm:
            grads, _ = clip_global_norm(grads, schedule.clip_norm)
        adam_step(optimizer, trainable, grads)

        if (it + 1) % schedule.log_every == 0 or it == end - 1 or it == start:
            row = {"iteration": it, **elbo.as_floats()}
            if record_wall_time:
                row["wall_ms"] = int((time.perf_counter() - t0) * 1000)
            rows.append(row)
            log.info("iter %d elbo %.4f", it, row["elbo"])
            if callback is not None:
                callback(row)
        if checkpoint_dir and it + 1 == schedule.phase1_iters and schedule.phase1_iters < end:
            save_training_checkpoint(os.path.join(checkpoint_dir, "phase1"), model, optimizer,
                                     it + 1, config_text, phase=opt_phase)
    if checkpoint_dir:
        save_training_checkpoint(os.path.join(checkpoint_dir, "final"), model, optimizer, end,
                                 config_text, phase=opt_phase)
    return FitResult(model, rows, optimizer, end)


def save_training_checkpoint(directory, model, optimizer, iteration, config_text, phase=1,
                             extra=None):
    params = OrderedDict((k, p.value) for k, p in model.named_parameters().items())
    if extra:
        params.update(extra)
    opt = optimizer.arrays() if optimizer is not None else OrderedDict()
    save_checkpoint(directory, params, opt, config_text,
                    meta={"iteration": iteration, "phase": phase})


def _dump_diagnostics(model, directory, iteration, elbo):
    if not directory:
        return
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "diagnostics.txt"), "w") as fh:
        fh.write(f"iteration {iteration}\n")
        for key, value in elbo.as_floats().items():
            fh.write(f"{key} {value!r}\n")
        for name, p in model.named_parameters().items():
            v = p.value
            fh.write(f"{name} finite={bool(np.all(np.isfinite(v)))} "
                     f"absmax={float(np.max(np.abs(v))) if v.size else 0.0!r}\n")
