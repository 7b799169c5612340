"""Command-line entry point: ``pnetlab <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data-format error,
4 runtime failure.  The dataset root comes from ``$PNETLAB_DATA_ROOT``.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .data import DATA_ROOT_ENV, data_root
from .errors import ConfigError, FormatError

log = logging.getLogger("pnetlab")

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_RUNTIME = 0, 2, 3, 4


def _floats(text: str) -> list[float]:
    """``"0.02,0.05"`` or a range ``"start:stop:step"`` (stop inclusive)."""
    text = text.strip()
    try:
        if ":" in text:
            start, stop, step = (float(v) for v in text.split(":"))
            n = int(round((stop - start) / step))
            return [round(start + k * step, 12) for k in range(n + 1)]
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from e


def _apply_overrides(spec, args):
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.out is not None:
        kw["output"] = args.out
    if args.float_mode:
        kw["float_mode"] = True
    return dataclasses.replace(spec, **kw) if kw else spec


def cmd_train(args) -> int:
    from .harness import ExperimentSpec, load_dataset
    from .nets import build_arch
    from .numerics import make_rng
    from .pnet_core import DEFAULT_BITS, encode_model, predict, save_model
    from .training import config_dict, load_train_config, train, write_history_csv

    cfg = load_train_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    spec = ExperimentSpec(dataset=cfg.dataset, data_path=cfg.extra.get("data_path"))
    x, y = load_dataset(spec, "train")
    if cfg.n_train:
        x, y = x[: cfg.n_train], y[: cfg.n_train]
    arch = build_arch(cfg.arch, make_rng(cfg.seed), input_shape=x.shape[1:], n_classes=int(y.max()) + 1)
    trained, history = train(arch, x, y, cfg)
    bits = int(cfg.extra.get("bits", DEFAULT_BITS.get(cfg.dataset, 16)))
    frac = int(cfg.extra["frac_bits"]) if "frac_bits" in cfg.extra else None
    model = encode_model(trained, bits=bits, frac_bits=frac)
    out = Path(args.out or cfg.extra.get("output", "out"))
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.pnet")
    write_history_csv(out / "history.csv", history)
    try:
        xt, yt = load_dataset(spec, "test")
        acc = float(np.mean(predict(model, xt, args.float_mode) == yt))
        print(f"test accuracy {acc:.4f} ({'float' if args.float_mode else f'{bits}-bit'})")
    except (FileNotFoundError, FormatError) as e:
        log.warning("no test split evaluated: %s", e)
    log.info("config %s", config_dict(cfg))
    print(f"model written to {out / 'model.pnet'}")
    return EXIT_OK


def _print_reports(reports):
    for r in reports:
        print(
            f"{r.algorithm:16s} {r.defense.kind:12s} n={r.n_eval:4d} excluded={r.n_excluded:3d} "
            f"clean_acc={r.clean_accuracy:.4f} asr={r.asr:.4f} afr={r.afr:.4f} "
            f"queries={r.avg_queries:.1f} l2={r.avg_l2:.3f}"
        )


def cmd_attack(args) -> int:
    from .harness import load_spec, run_all

    spec = _apply_overrides(load_spec(args.spec), args)
    _print_reports(run_all(spec, jobs=args.jobs))
    print(f"reports written to {spec.output}")
    return EXIT_OK


def cmd_defend_eval(args) -> int:
    from .harness import accuracy_consistency, get_model, load_dataset, load_spec, run_all, sigma_sweep, write_csv

    spec = _apply_overrides(load_spec(args.spec), args)
    spec = dataclasses.replace(spec, measure_dsr=True)
    _print_reports(run_all(spec, jobs=args.jobs))
    x, y = load_dataset(spec, "test")
    n = len(x) if spec.clean_eval is None else min(spec.clean_eval, len(x))
    model = get_model(spec, "plain")
    sigmas = sorted({d.sigma for d in spec.defenses if d.sigma > 0}) or [0.0]
    rows = [accuracy_consistency(model, x[:n], y[:n], s, spec.seed, spec.float_mode) for s in sigmas]
    write_csv(Path(spec.output) / "accuracy_consistency.csv", rows,
              ["sigma", "clean_accuracy", "defended_accuracy", "drop", "predicted_drop", "n"])
    for r in rows:
        print(f"sigma={r['sigma']:.3f} drop={r['drop']:.4f} predicted={r['predicted_drop']:.4f}")
    if spec.sweep_sigmas:
        for r in sigma_sweep(spec, jobs=args.jobs):
            print(f"sweep sigma={r['sigma']:.3f} afr={r['afr']:.4f}")
    print(f"reports written to {spec.output}")
    return EXIT_OK


def cmd_analyze_dsr(args) -> int:
    from .defense import dsr_grid, misclassification_prob
    from .harness import write_csv

    seed = 0 if args.seed is None else args.seed
    if any(s < 0 for s in args.sigmas) or any(a < 0 for a in args.a_grid):
        raise ConfigError("sigma and a values must be >= 0")
    points = dsr_grid(args.sigmas, args.a_grid, args.trials, seed)
    out = Path(args.out or "out")
    write_csv(out / "dsr.csv", [p.row() for p in points], ["a", "sigma", "s_theory", "s_empirical", "n", "ci_low", "ci_high"])
    write_csv(
        out / "misclassification.csv",
        [{"margin": a, "sigma": s, "p_theory": misclassification_prob(a, s)} for s in args.sigmas for a in args.a_grid],
        ["margin", "sigma", "p_theory"],
    )
    for p in points:
        print(f"sigma={p.sigma:.4g} a={p.a:.4g} theory={p.s_theory:.6f} mc={p.s_empirical:.6f}")
    return EXIT_OK


def cmd_margins(args) -> int:
    from .defense import margin_distribution
    from .harness import ExperimentSpec, load_dataset, write_csv
    from .pnet_core import load_model

    model = load_model(args.model)
    spec = ExperimentSpec(dataset=args.dataset, data_path=args.data_path, image_size=model.input_shape[0],
                          channels=model.input_shape[-1])
    x, _ = load_dataset(spec, args.split)
    if args.limit:
        x = x[: args.limit]
    m, counts, edges = margin_distribution(model, x, bins=args.bins, float_mode=args.float_mode)
    out = Path(args.out or "out")
    rows = [{"bin_low": float(lo), "bin_high": float(hi), "count": int(c)} for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
    write_csv(out / "margins.csv", rows, ["bin_low", "bin_high", "count"])
    median = float(np.median(m)) if len(m) else float("nan")
    print(f"n={len(m)} median margin={median:.4f} fraction>0.5={float(np.mean(m > 0.5)) if len(m) else 0:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    common.add_argument("--float-mode", action="store_true", help="run the float shadow instead of fixed point")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(
        prog="pnetlab",
        description=f"PNet attack/defense lab. Dataset root: ${DATA_ROOT_ENV} (now {data_root()}).",
    )
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", parents=[common], help="train and encode a model")
    s.add_argument("config")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("attack", parents=[common], help="run the attacks of an experiment spec")
    s.add_argument("spec")
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("defend-eval", parents=[common], help="compare defenses of an experiment spec")
    s.add_argument("spec")
    s.set_defaults(func=cmd_defend_eval)

    s = sub.add_parser("analyze-dsr", parents=[common], help="closed-form vs Monte-Carlo DSR grid")
    s.add_argument("--sigmas", type=_floats, default=[0.02, 0.05, 0.1], help="comma list or start:stop:step")
    s.add_argument("--a-grid", type=_floats, default=_floats("0:0.5:0.05"), help="comma list or start:stop:step")
    s.add_argument("--trials", type=int, default=1_000_000)
    s.set_defaults(func=cmd_analyze_dsr)

    s = sub.add_parser("margins", parents=[common], help="top-1 minus runner-up score histogram")
    s.add_argument("model")
    s.add_argument("dataset", choices=["mnist", "cifar10", "imagedir"])
    s.add_argument("--data-path", default=None, help=f"defaults to ${DATA_ROOT_ENV}/<dataset>")
    s.add_argument("--split", default="test")
    s.add_argument("--bins", type=int, default=20)
    s.add_argument("--limit", type=int, default=0)
    s.set_defaults(func=cmd_margins)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except Exception as e:  # noqa: BLE001 - top-level boundary
        log.debug("failure", exc_info=True)
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
