"""Command-line entry point: ``wishart-sde {train,eval,forecast,ablate}``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical abort.
"""

import argparse
import copy
import csv
import logging
import math
import os
import sys
from collections import OrderedDict

import numpy as np

from .config import load_config, override, parse_config
from .data import Standardizer, load_csv, split, standardize, write_csv
from .dynamics import (SequenceBatch, build_dynamical_model, cross_correlation_density,
                       forecast, windows, DynamicalModel)
from .errors import (ConfigError, NumericalError, SchemaError, TrainingError, WishartSDEError)
from .models import RegressionModel, build_regression_model, parse_variant
from .sdeflow import NoiseStream
from .train import (assign_parameters, config_hash, fit, load_checkpoint,
                    save_training_checkpoint, write_metrics)

log = logging.getLogger("wishart_sde")

EVAL_SAMPLES = 25
STATS_PREFIX = "standardizer."
WISHART_VARIANTS = ("DiffWGP", "wishart", "nodrift")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message, field="arguments")


def write_table(path, header, rows, config_text):
    """CSV with a leading ``# config_hash`` comment line."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash {config_hash(config_text)}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _cell(v):
    if v is None:
        return "NA"
    if isinstance(v, (float, np.floating)):
        return "NA" if not math.isfinite(v) else repr(float(v))
    return str(v)


def _model_kwargs(cfg):
    m = cfg.model
    kw = {}
    if m.flow_variance is not None:
        kw["flow_variance"] = m.flow_variance
    if m.lambda_init is not None:
        kw["lambda_init"] = m.lambda_init
    return kw


# ------------------------------------------------------------------ loading


def _load_regression(cfg):
    d = cfg.data
    features = d.features or None
    full = load_csv(cfg.resolve(d.path), d.targets, d.delimiter, features=features)
    if d.test_path:
        test = load_csv(cfg.resolve(d.test_path), d.targets, d.delimiter, features=features)
        return full, test
    return split(full, d.split, cfg.seed)


def _load_series(cfg, path):
    d = cfg.data
    if not d.time_column:
        raise ConfigError("dynamics data needs a time column", field="data.time_column")
    return load_csv(path, d.targets or None, d.delimiter, time_column=d.time_column)


def _stats_from(params):
    arrays = {k[len(STATS_PREFIX):]: v for k, v in params.items() if k.startswith(STATS_PREFIX)}
    if not arrays:
        raise SchemaError("checkpoint carries no standardisation statistics")
    return Standardizer.from_arrays(arrays)


def _stats_arrays(stats):
    return OrderedDict((STATS_PREFIX + k, np.asarray(v, dtype=float))
                       for k, v in stats.arrays().items())


def _rebuild(cfg, params):
    """Recreate the model described by a checkpoint and load its parameters."""
    m = cfg.model
    if m.kind == "regression":
        Z = params.get("flow.Z", params.get("g.Z"))
        model = RegressionModel(m.variant, Z, output_dim=params["g.q_mu"].shape[1],
                                flow_cfg=cfg.flow, rank=m.rho, nu=m.nu, Z_g=params["g.Z"],
                                noise_init=m.noise_init, seed=cfg.seed, **_model_kwargs(cfg))
    else:
        Z = params["flow.Z"]
        obs_dim = params["lambda_obs_raw"].shape[0]
        num_sequences = params["x0"].shape[0] if "x0" in params else 1
        model = DynamicalModel(obs_dim, Z, variant=m.variant, g=m.g, rank=m.rho, nu=m.nu,
                               max_step=m.max_step, mc_samples=cfg.flow.mc_samples,
                               lambda_obs_init=m.lambda_obs_init, num_sequences=num_sequences,
                               Z_g=params.get("g.Z"), x0_mode=m.x0_mode, seed=cfg.seed,
                               **_model_kwargs(cfg))
    assign_parameters(model, params)
    return model


# ----------------------------------------------------------------- commands


def cmd_train(cfg):
    """Fit the configured model; writes checkpoint/, metrics.csv and the held-out split."""
    cfg.validate()
    out = cfg.out
    os.makedirs(out, exist_ok=True)
    text = cfg.to_text()
    schedule = cfg.schedule()
    m = cfg.model
    ckpt_dir = os.path.join(out, "checkpoint")

    if m.kind == "regression":
        train, test = _load_regression(cfg)
        train_s, _, stats = standardize(train, None)
        model = build_regression_model(m.variant, train_s.X, output_dim=train_s.y.shape[1],
                                       num_inducing=m.num_inducing, seed=cfg.seed,
                                       flow_cfg=cfg.flow, rank=m.rho, nu=m.nu,
                                       noise_init=m.noise_init, **_model_kwargs(cfg))
        data = train_s
    else:
        series = _load_series(cfg, cfg.resolve(cfg.data.path))
        n_train = int(round(len(series) * cfg.data.split))
        if not 2 <= n_train < len(series):
            raise ConfigError("split leaves no training or held-out points", field="data.split")
        train, test = series.slice(0, n_train), series.slice(n_train, len(series))
        stats = Standardizer.fit(train)
        train_s = stats.apply(train)
        data = windows(train_s, m.window)
        model = build_dynamical_model(m.variant, train_s, num_inducing=m.num_inducing,
                                      seed=cfg.seed, g=m.g, rank=m.rho, nu=m.nu,
                                      max_step=m.max_step, mc_samples=cfg.flow.mc_samples,
                                      lambda_obs_init=m.lambda_obs_init,
                                      num_sequences=len(data), x0_mode=m.x0_mode,
                                      **_model_kwargs(cfg))

    result = fit(model, data, schedule, seed=cfg.seed, checkpoint_dir=ckpt_dir, config_text=text)
    final = os.path.join(ckpt_dir, "final")
    save_training_checkpoint(final, model, result.optimizer, result.iteration, text,
                             phase=1 if result.iteration <= schedule.phase1_iters else 2,
                             extra=_stats_arrays(stats))
    write_metrics(os.path.join(out, "metrics.csv"), result.log, text)
    time_col = cfg.data.time_column or "time"
    write_csv(os.path.join(out, "train.csv"), train, cfg.data.delimiter, time_column=time_col)
    write_csv(os.path.join(out, "test.csv"), test, cfg.data.delimiter, time_column=time_col)
    return {"checkpoint": final, "metrics": os.path.join(out, "metrics.csv"),
            "train": os.path.join(out, "train.csv"), "test": os.path.join(out, "test.csv")}


def evaluate_regression(checkpoint, data_path, mc_samples=None):
    """(per-point mean log density, RMSE, n), both in original units."""
    ckpt = load_checkpoint(checkpoint)
    cfg = parse_config(ckpt.config_text)
    if cfg.model.kind != "regression":
        raise SchemaError("eval needs a regression checkpoint (use forecast for dynamics)")
    model = _rebuild(cfg, ckpt.params)
    stats = _stats_from(ckpt.params)
    test = load_csv(data_path, cfg.data.targets, cfg.data.delimiter,
                    features=cfg.data.features or None)
    if test.X.shape[1] != stats.keep.shape[0]:
        raise SchemaError(f"data has {test.X.shape[1]} feature columns, the checkpoint "
                          f"expects {stats.keep.shape[0]}")
    if test.y.shape[1] != stats.y_mean.shape[0]:
        raise SchemaError("target count does not match the checkpoint")
    pred = model.predict(stats.transform_X(test.X), n_samples=mc_samples or EVAL_SAMPLES,
                         noise=NoiseStream(cfg.seed, 3))
    logdens = pred.logpdf(stats.transform_y(test.y)) - np.sum(np.log(stats.y_std))
    rmse = float(np.sqrt(np.mean((stats.inverse_y(pred.mean) - test.y) ** 2)))
    return float(np.mean(logdens)), rmse, len(test), ckpt.config_text


def cmd_eval(checkpoint, data_path, out, mc_samples=None):
    loglik, rmse, n, text = evaluate_regression(checkpoint, data_path, mc_samples)
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "eval.csv")
    write_table(path, ("n", "loglik", "rmse"), [(n, loglik, rmse)], text)
    return {"eval": path, "loglik": loglik, "rmse": rmse}


def run_forecast(checkpoint, data_path, truth_path=None, horizon=None, n_sims=None, seed=None):
    ckpt = load_checkpoint(checkpoint)
    cfg = parse_config(ckpt.config_text)
    if cfg.model.kind != "dynamics":
        raise SchemaError("forecast needs a dynamics checkpoint")
    horizon = cfg.forecast.horizon if horizon is None else horizon
    n_sims = cfg.forecast.n_sims if n_sims is None else n_sims
    if not horizon > 0:
        raise ConfigError("must be positive", field="horizon")
    if n_sims < 1:
        raise ConfigError("must be positive", field="n_sims")
    seed = cfg.seed if seed is None else seed
    model = _rebuild(cfg, ckpt.params)
    stats = _stats_from(ckpt.params)
    ctx = _load_series(cfg, data_path)
    if ctx.Y.shape[1] != model.obs_dim:
        raise SchemaError(f"context has {ctx.Y.shape[1]} series, the model expects {model.obs_dim}")
    ctx_s = stats.apply(ctx)
    context = SequenceBatch(ctx_s.times, ctx_s.Y)
    if model.g_layer is not None:
        context = windows(ctx_s, cfg.model.window)[-1]
    truth = None
    if truth_path:
        held = stats.apply(_load_series(cfg, truth_path))
        truth = SequenceBatch(held.times, held.Y)
    result = forecast(model, context, horizon, n_sims, NoiseStream(seed, 4), truth=truth,
                      step=cfg.forecast.step)
    if result.loglik is not None:
        result.loglik = result.loglik - np.sum(np.log(stats.y_std))
    result.observed = stats.inverse_y(result.observed)
    result.extra.update(names=ctx.names, t0=ctx.times[-1], cfg=cfg, text=ckpt.config_text,
                        truth=None if truth is None else stats.inverse_y(
                            truth.observations[np.isin(truth.times, result.times)]))
    return result


def cmd_forecast(checkpoint, data_path, out, truth_path=None, horizon=None, n_sims=None,
                 seed=None):
    result = run_forecast(checkpoint, data_path, truth_path, horizon, n_sims, seed)
    cfg, text, names = result.extra["cfg"], result.extra["text"], result.extra["names"]
    os.makedirs(out, exist_ok=True)
    paths = {}

    rows = []
    for h, t in enumerate(result.times):
        if result.loglik is None:
            rows.append((h + 1, t, None, None, None))
        else:
            rows.append((h + 1, t, result.mean[h], result.stderr[h], result.mixture[h]))
    paths["trace"] = os.path.join(out, "trace.csv")
    write_table(paths["trace"], ("hour", "time", "mean_loglik", "stderr", "mixture_loglik"),
                rows, text)

    rows = [(s, t, *result.observed[s, h]) for s in range(result.observed.shape[0])
            for h, t in enumerate(result.times)]
    paths["trajectories"] = os.path.join(out, "trajectories.csv")
    write_table(paths["trajectories"], ("sim", "time", *names), rows, text)

    if result.observed.shape[0] >= 2:
        for i, j in cfg.forecast.pairs:
            if max(i, j) >= len(names):
                raise ConfigError(f"pair {i}:{j} is out of range", field="forecast.pairs")
            dens, counts, ei, ej = cross_correlation_density(result.observed, i, j,
                                                             bins=cfg.forecast.bins)
            rows = [(ei[a], ei[a + 1], ej[b], ej[b + 1], int(counts[a, b]), dens[a, b])
                    for a in range(dens.shape[0]) for b in range(dens.shape[1])]
            key = f"density_{i}_{j}"
            paths[key] = os.path.join(out, key + ".csv")
            write_table(paths[key], (f"{names[i]}_lo", f"{names[i]}_hi", f"{names[j]}_lo",
                                     f"{names[j]}_hi", "count", "density"), rows, text)
    return paths


def _score_run(sub):
    """Train one configuration and score it on its held-out split."""
    paths = cmd_train(sub)
    if sub.model.kind == "regression":
        loglik, rmse, _, _ = evaluate_regression(paths["checkpoint"], paths["test"])
        return loglik, rmse
    result = run_forecast(paths["checkpoint"], paths["train"], paths["test"],
                          horizon=sub.forecast.horizon, n_sims=sub.forecast.n_sims)
    truth = result.extra["truth"]
    rmse = float(np.sqrt(np.mean((result.observed.mean(axis=0) - truth) ** 2)))
    return float(np.mean(result.mean)), rmse


def cmd_ablate(cfg):
    """Train + score every (variant, ρ, seed); one long-format results table."""
    cfg.validate()
    os.makedirs(cfg.out, exist_ok=True)
    dataset = os.path.splitext(os.path.basename(cfg.data.path))[0]
    rows = []
    for variant in cfg.ablate.variants:
        sub_variant = variant
        if cfg.model.kind == "regression":
            sub_variant = parse_variant(variant)
        uses_rank = sub_variant in WISHART_VARIANTS
        rhos = (cfg.ablate.rhos or [cfg.model.rho]) if uses_rank else [None]
        for rho in rhos:
            for seed in (cfg.ablate.seeds or [cfg.seed]):
                sub = copy.deepcopy(cfg)
                sub.model.variant = sub_variant
                sub.seed = seed
                if rho is not None:
                    sub.model.rho = rho
                tag = f"{sub_variant}_rho{rho if rho is not None else 'NA'}_seed{seed}"
                sub.out = os.path.join(cfg.out, "runs", tag)
                try:
                    loglik, rmse = _score_run(sub)
                    status = "ok"
                except WishartSDEError as exc:
                    loglik = rmse = None
                    status = f"failed: {type(exc).__name__}: {exc}".replace("\n", " ")
                    log.warning("%s %s", tag, status)
                rows.append((dataset, sub_variant, "NA" if rho is None else rho, seed,
                             loglik, rmse, status))
    path = os.path.join(cfg.out, "ablation.csv")
    write_table(path, ("dataset", "variant", "rho", "seed", "loglik", "rmse", "status"), rows,
                cfg.to_text())
    return path, rows


# ---------------------------------------------------------------------- main


def build_parser():
    parser = _Parser(prog="wishart-sde", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config=True, seed=True):
        if config:
            p.add_argument("--config", required=True, help="INI run configuration")
        if seed:
            p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")

    def model_flags(p):
        p.add_argument("--variant")
        p.add_argument("--rho", type=int)
        p.add_argument("--nu", type=int)
        p.add_argument("--steps", type=int, help="Euler-Maruyama steps over the flow horizon")
        p.add_argument("--mc-samples", type=int)
        p.add_argument("--horizon", type=float, help="forecast horizon (time units)")
        p.add_argument("--n-sims", type=int, help="forecast simulations")

    p = sub.add_parser("train", help="fit a model")
    common(p)
    model_flags(p)

    p = sub.add_parser("eval", help="test log-likelihood and RMSE of a checkpoint")
    common(p, config=False, seed=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="CSV with the same columns as training")
    p.add_argument("--mc-samples", type=int)

    p = sub.add_parser("forecast", help="roll a dynamics checkpoint forward")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="context time series CSV")
    p.add_argument("--truth", help="held-out time series CSV for the log-likelihood trace")
    p.add_argument("--horizon", type=float)
    p.add_argument("--n-sims", type=int)

    p = sub.add_parser("ablate", help="train and score a grid of variants and seeds")
    common(p)
    model_flags(p)
    return parser


def _run(args):
    if args.command in ("train", "ablate"):
        cfg = load_config(args.config)
        override(cfg, seed=args.seed, out=args.out, variant=args.variant, rho=args.rho,
                 nu=args.nu, steps=args.steps, mc_samples=args.mc_samples,
                 horizon=args.horizon, n_sims=args.n_sims)
        if args.command == "train":
            paths = cmd_train(cfg)
            print(f"checkpoint written to {paths['checkpoint']}")
        else:
            path, rows = cmd_ablate(cfg)
            print(f"results written to {path}")
            if not any(r[-1] == "ok" for r in rows):
                return 2
        return 0
    out = args.out or "."
    if args.command == "eval":
        res = cmd_eval(args.checkpoint, args.data, out, args.mc_samples)
        print(f"loglik {res['loglik']:.6f} rmse {res['rmse']:.6f}")
        return 0
    paths = cmd_forecast(args.checkpoint, args.data, out, args.truth, args.horizon,
                         args.n_sims, args.seed)
    print(f"trace written to {paths['trace']}")
    return 0


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return _run(args)
    except (NumericalError, TrainingError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 2
    except (WishartSDEError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
