"""Command line: ``ttnlab {pretrain,posttrain,eval,sweep}``.

Exit codes: 0 success, 1 configuration error, 2 file/IO error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .adapt import ALPHA_METHODS, StreamSpec, corrupted_pool, make_stream, parse_method, run_episode
from .config import ConfigError, RunConfig, load_config
from .data import gen_shapeset, load_cifar10_binary
from .nn import ArchitectureMismatch, NumericalError, error_rate, load_checkpoint, pretrain, save_checkpoint, tiny_convnet
from .norm import NormMode, load_alpha, save_alpha
from .posttrain import obtain_prior, optimize_alpha

log = logging.getLogger("ttnlab")

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 1, 2, 3
RESULT_COLUMNS = ("method", "scenario", "batch_size", "corruption", "severity", "n_samples", "error_rate", "seed")


# -- shared plumbing ---------------------------------------------------------------

def load_data(cfg: RunConfig):
    d = cfg.data
    if d.dataset == "cifar10":
        return (load_cifar10_binary(d.train_files, split="train"),
                load_cifar10_binary(d.test_files, split="test"))
    return gen_shapeset(cfg.seed, d.n_per_class, d.num_classes)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def echo_config(cfg: RunConfig, command: str) -> Path:
    out = _out_dir(cfg)
    doc = {"tool": "ttnlab", "version": __version__, "command": command, "config": cfg.to_dict()}
    (out / f"{command}_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out


def write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _load_model(cfg: RunConfig, path):
    if path is None:
        raise ConfigError("--checkpoint is required for this command")
    try:
        model, alpha, meta = load_checkpoint(path)
    except ArchitectureMismatch as exc:
        raise ConfigError(f"checkpoint does not match model.arch {cfg.model.arch!r}: {exc}") from None
    if model.num_classes != cfg.data.num_classes:
        raise ConfigError(f"checkpoint has {model.num_classes} classes but config data.num_classes is "
                          f"{cfg.data.num_classes}")
    if np.dtype(model.dtype).name != cfg.model.dtype:
        model = model.astype(np.dtype(cfg.model.dtype))
    return model, alpha


def _load_alpha(path, model, embedded, granularity="channel"):
    if path is not None:
        alpha, _ = load_alpha(path)
    else:
        alpha = embedded
    if alpha is not None:
        try:
            alpha.check_structure(model.norm_channels)
        except ValueError as exc:
            raise ConfigError(f"alpha file does not match the model: {exc}") from None
        if granularity == "layer":
            alpha = alpha.layerwise()
        elif granularity == "global":
            alpha = alpha.global_mean()
    return alpha


# -- commands ----------------------------------------------------------------------

def cmd_pretrain(cfg: RunConfig, args) -> int:
    out = echo_config(cfg, "pretrain")
    train, test = load_data(cfg)
    model = tiny_convnet(cfg.data.num_classes, cfg.seed, np.dtype(cfg.model.dtype), cfg.pretrain.momentum)
    history: list = []
    model = pretrain(model, train, cfg.pretrain.build(cfg.seed), history)
    err = error_rate(model, test)
    save_checkpoint(out / "checkpoint.json", model,
                    meta={"seed": cfg.seed, "clean_test_error": err, "version": __version__})
    write_csv(out / "pretrain_log.csv", ("epoch", "loss", "lr", "train_error"),
              [(h["epoch"], _fmt(h["loss"]), _fmt(h["lr"]), _fmt(h["train_error"])) for h in history])
    print(f"clean test error (CBN): {100 * err:.2f}%")
    print(f"checkpoint: {out / 'checkpoint.json'}")
    return 0


def cmd_posttrain(cfg: RunConfig, args) -> int:
    model, _ = _load_model(cfg, args.checkpoint)
    out = echo_config(cfg, "posttrain")
    train, _ = load_data(cfg)
    pcfg = cfg.posttrain.build(cfg.seed)
    prior, scores = obtain_prior(model, train, cfg.posttrain.prior_aug(cfg.seed), pcfg)
    history: list = []
    alpha = optimize_alpha(model, prior, train, cfg.posttrain.alpha_aug(cfg.seed), pcfg, history)
    header = {"arch": model.arch, "seed": cfg.seed, "mse_reduction": "mean", "version": __version__}
    save_alpha(out / "prior.json", prior, kind="prior", zero_gradients=scores.zero_gradients, **header)
    save_alpha(out / "alpha.json", alpha, kind="alpha", lam=pcfg.lam, init=pcfg.init,
               losses=list(pcfg.losses), **header)
    write_csv(out / "posttrain_log.csv", ("epoch", "ce_loss", "mse_loss", "lr", "mean_alpha_per_layer"),
              [(h["epoch"], _fmt(h["ce_loss"]), _fmt(h["mse_loss"]), _fmt(h["lr"]),
                " ".join(_fmt(m) for m in h["mean_alpha_per_layer"])) for h in history])
    print("prior mean per layer:", " ".join(f"{m:.3f}" for m in prior.layer_means()))
    print("alpha mean per layer:", " ".join(f"{m:.3f}" for m in alpha.layer_means()))
    return 0


def evaluate_grid(cfg: RunConfig, model, alpha, test, methods=None, batch_sizes=None, adapt=None) -> list:
    """Result rows (unsorted) for every (method, scenario, batch size) cell."""
    adapt = adapt or cfg.adapt
    methods = methods or adapt.methods
    batch_sizes = batch_sizes or adapt.batch_sizes
    for m in methods:
        name, _ = parse_method(m)
        if name in ALPHA_METHODS and alpha is None:
            raise ConfigError(f"method {m} needs an alpha file (--alpha)")
    specs = adapt.corruption_specs()
    kinds = tuple(s.kind for s in specs)
    severity = {s.kind: s.severity for s in specs}
    pool = {s.kind: corrupted_pool(test, (s.kind,), s.severity, cfg.seed)[s.kind] for s in specs}
    rows = []
    for method in methods:
        name, value = parse_method(method)
        label = name if value is None else f"{name}({value:g})"
        for scenario in adapt.scenarios:
            reset = adapt.reset if scenario in ("single", "class_imbalanced") else "never"
            acfg = adapt.adapt_config(method, cfg.seed, reset)
            for b in batch_sizes:
                spec = StreamSpec(scenario, kinds, specs[0].severity if specs else adapt.severity, int(b),
                                  adapt.episode_length, adapt.ordering, cfg.seed)
                metrics = run_episode(model, alpha, make_stream(test, spec, pool), spec, acfg)
                for kind, (n, wrong) in metrics.counts.items():
                    sev = 0 if kind == "none" else severity[kind]
                    rows.append((label, scenario, int(b), kind, sev, n, 100.0 * wrong / n, cfg.seed))
                errs = metrics.per_corruption
                sev = 0 if scenario == "source" else adapt.severity
                rows.append((label, scenario, int(b), "AVG", sev, metrics.n_samples,
                             100.0 * sum(errs.values()) / len(errs), cfg.seed))
    return rows


def sort_rows(rows: list) -> list:
    return sorted(rows, key=lambda r: (r[0], r[1], r[2], r[3]))


def format_rows(rows: list) -> list:
    return [(m, s, b, c, sev, n, f"{e:.4f}", seed) for m, s, b, c, sev, n, e, seed in sort_rows(rows)]


def cmd_eval(cfg: RunConfig, args) -> int:
    model, embedded = _load_model(cfg, args.checkpoint)
    alpha = _load_alpha(args.alpha, model, embedded, cfg.adapt.alpha_granularity)
    out = echo_config(cfg, "eval")
    _, test = load_data(cfg)
    rows = evaluate_grid(cfg, model, alpha, test)
    write_csv(out / "results.csv", RESULT_COLUMNS, format_rows(rows))
    for r in sort_rows(rows):
        if r[3] == "AVG":
            print(f"{r[0]:<18} {r[1]:<17} B={r[2]:<4} error {r[6]:6.2f}%")
    return 0


def cmd_sweep(cfg: RunConfig, args) -> int:
    axis, values = cfg.sweep.axis, cfg.sweep.values
    model, embedded = _load_model(cfg, args.checkpoint)
    alpha = _load_alpha(args.alpha, model, embedded, cfg.adapt.alpha_granularity)
    out = echo_config(cfg, "sweep")
    train, test = load_data(cfg)
    rows = []  # (value, result row)
    if axis == "const_alpha":
        for v in values:
            rows += [(v, r) for r in evaluate_grid(cfg, model, alpha, test, methods=[f"CONST_ALPHA({v})"])]
    elif axis == "scale":
        for v in values:
            adapt = replace(cfg.adapt, scale=float(v))
            rows += [(v, r) for r in evaluate_grid(cfg, model, alpha, test, methods=["TTN_SCALED"], adapt=adapt)]
    elif axis == "batch_size":
        for v in values:
            rows += [(v, r) for r in evaluate_grid(cfg, model, alpha, test, batch_sizes=[int(v)])]
    elif axis == "lambda":
        # the prior depends only on the checkpoint and seed, so compute it once
        pcfg = cfg.posttrain.build(cfg.seed)
        prior, _ = obtain_prior(model, train, cfg.posttrain.prior_aug(cfg.seed), pcfg)
        for v in values:
            lam_alpha = optimize_alpha(model, prior, train, cfg.posttrain.alpha_aug(cfg.seed), replace(pcfg, lam=float(v)))
            save_alpha(out / f"alpha_lambda_{v}.json", lam_alpha, kind="alpha", lam=float(v), seed=cfg.seed)
            rows += [(v, r) for r in evaluate_grid(cfg, model, lam_alpha, test, methods=["TTN"])]
    result = sorted(rows, key=lambda vr: (float(vr[0]),) + tuple(vr[1][:4]))
    write_csv(out / "sweep_results.csv", (axis,) + RESULT_COLUMNS,
              [(v,) + format_rows([r])[0] for v, r in result])
    summary = sweep_summary(rows)
    write_csv(out / "sweep_summary.csv", ("axis", "method", "scenario", "batch_size", "best_value", "error_rate"),
              [(axis, *k, v, f"{e:.4f}") for k, (v, e) in sorted(summary.items(), key=lambda kv: (kv[0][0], kv[0][1], -kv[0][2]))])
    for (method, scenario, b), (v, e) in summary.items():
        print(f"{scenario:<17} B={b:<4} best {axis}={v} error {e:.2f}%")
    return 0


def sweep_summary(rows) -> dict:
    """Argmin value per (method family, scenario, batch size); ties keep the first value."""
    best: dict = {}
    for v, r in rows:
        if r[3] != "AVG":
            continue
        family = r[0].split("(")[0]
        key = (family, r[1], r[2])
        if key not in best or r[6] < best[key][1]:
            best[key] = (v, r[6])
    return best


COMMANDS = {"pretrain": cmd_pretrain, "posttrain": cmd_posttrain, "eval": cmd_eval, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ttnlab", description="Test-time normalization laboratory")
    p.add_argument("--version", action="version", version=f"ttnlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        c = sub.add_parser(name)
        c.add_argument("--config", help="JSON run config (defaults apply when omitted)")
        c.add_argument("--checkpoint", help="model checkpoint file")
        c.add_argument("--alpha", help="alpha file for TTN-family methods")
        c.add_argument("--out", help="output directory (overrides output.dir)")
        c.add_argument("--seed", type=int, help="global seed (overrides config)")
        c.add_argument("--threads", type=int, help="BLAS thread limit")
        c.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg.seed = args.seed
        if args.out:
            cfg.output.dir = args.out
        limiter = contextlib.nullcontext()
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            from threadpoolctl import threadpool_limits
            limiter = threadpool_limits(args.threads)
        with limiter:
            return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        # unreadable or malformed files
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
