"""Experiment orchestration: specs, seeded runs, metrics and CSV reports.

Seeds
-----
Everything random in a run derives from ``seed`` in the spec through
:func:`pnetlab.numerics.child_seeds` with a fixed namespace per consumer:

====================  ===========================================
namespace             used for
====================  ===========================================
``SEED_POOL``         permutation that picks the evaluation pool
``SEED_ATTACK``       per-image attack generator (plans, patches)
``SEED_ORACLE``       per-image defended-oracle noise
``SEED_TARGET``       per-image target class (targeted mode)
``SEED_CLEAN``        noise for defended clean accuracy
``SEED_DSR``          noise for trace replay
====================  ===========================================

so per-image work can run in any order or in parallel and still produce the
same bytes.
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import ATTACKS, AttackConfig
from .data import data_root, load_cifar10, load_image_dir, load_mnist
from .defense import (
    DefenseConfig,
    DefendedOracle,
    defended_accuracy,
    dsr_by_decile,
    empirical_dsr,
    summarize_events,
)
from .errors import ConfigError
from .nets import build_arch
from .numerics import child_seeds, make_rng
from .pnet_core import DEFAULT_BITS, FORMAT_VERSION, encode_model, forward, load_model, predict, save_model
from .training import load_train_config, train, write_history_csv

log = logging.getLogger(__name__)

REPORT_SCHEMA = "pnetlab-report/1"
SEED_POOL, SEED_ATTACK, SEED_ORACLE, SEED_TARGET, SEED_CLEAN, SEED_DSR = range(1, 7)


@dataclass
class ExperimentSpec:
    dataset: str = "mnist"
    data_path: str | None = None
    image_size: int = 32
    channels: int = 3
    models: dict = field(default_factory=dict)  # variant -> .pnet path
    train_configs: dict = field(default_factory=dict)  # variant -> training config path
    bits: int | None = None
    frac_bits: int | None = None
    n_eval: int = 500
    clean_eval: int | None = None  # images for clean accuracy (None = whole split)
    seed: int = 0
    output: str = "out"
    float_mode: bool = False
    measure_dsr: bool = False
    algorithms: list = field(default_factory=lambda: ["pnet"])
    attack: AttackConfig = field(default_factory=AttackConfig)
    defenses: list = field(default_factory=lambda: [DefenseConfig()])
    sweep_sigmas: list = field(default_factory=list)  # rpnet sigmas for AFR-vs-sigma curves

    def __post_init__(self):
        if self.n_eval < 1:
            raise ConfigError(f"n_eval must be >= 1, got {self.n_eval}")
        for a in self.algorithms:
            if a not in ATTACKS:
                raise ConfigError(f"unknown attack algorithm {a!r}; choose from {sorted(ATTACKS)}")

    def resolved_data_path(self) -> Path:
        return Path(self.data_path) if self.data_path else data_root() / self.dataset

    def echo(self) -> dict:
        d = dataclasses.asdict(self)
        d["attack"] = dataclasses.asdict(self.attack)
        d["defenses"] = [dataclasses.asdict(x) for x in self.defenses]
        d.pop("output")  # reports must not depend on where they are written
        return d


def _bool(raw: str) -> bool:
    return raw.strip().lower() in ("1", "true", "yes", "on")


def _attack_cfg(section, mode_default="targeted") -> AttackConfig:
    mode = section.get("mode", mode_default).strip()
    kw = {}
    for key, conv in (
        ("max_queries", int),
        ("epsilon", float),
        ("lambda_min", float),
        ("lambda_max", float),
        ("cycle", int),
        ("simba_freq_ratio", float),
        ("square_eps", float),
        ("square_p_init", float),
    ):
        if key in section:
            kw[key] = conv(section[key])
    return AttackConfig.defaults(mode, **kw)


def _defenses(section, seed) -> list[DefenseConfig]:
    if section is None:
        return [DefenseConfig(seed=seed)]
    kinds = [k.strip() for k in section.get("kind", "none").split(",") if k.strip()]
    preset = section.get("preset", "").strip()
    out = []
    for kind in kinds:
        if preset == "mnist":
            d = DefenseConfig.mnist_preset(kind, seed)
        elif preset == "cifar10":
            d = DefenseConfig.cifar_preset(kind, seed)
        else:
            d = DefenseConfig(kind, seed=seed)
        sig = float(section.get(f"{kind}.sigma", section.get("sigma", d.sigma))) if kind not in ("none", "rnd", "rnd_gf") else 0.0
        sig_in = float(section.get(f"{kind}.sigma_in", section.get("sigma_in", d.sigma_in))) if kind not in ("none", "rpnet") else 0.0
        out.append(DefenseConfig(kind, sig, sig_in, seed))
    return out


def load_spec(path) -> ExperimentSpec:
    """Parse an INI experiment spec.

    ``[experiment]``: dataset, data_path, image_size, channels, model,
    model_gf, model_dnt, train_config(_gf/_dnt), bits, frac_bits, n_eval,
    clean_eval, seed, output, float_mode, measure_dsr.
    ``[attack]``: algorithm (comma list), mode, max_queries, epsilon,
    lambda_min, lambda_max, cycle, simba_freq_ratio, square_eps, square_p_init.
    ``[defense]``: kind (comma list), preset (mnist|cifar10), sigma, sigma_in,
    per-kind overrides such as ``rpnet.sigma``, and sweep_sigmas (comma list).
    Relative paths are resolved against the spec file's directory.
    """
    path = Path(path)
    cp = configparser.ConfigParser()
    try:
        if not cp.read(path):
            raise ConfigError(f"cannot read spec {path}")
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    if "experiment" not in cp:
        raise ConfigError(f"{path}: missing [experiment] section")
    ex = cp["experiment"]
    base = path.parent

    def rel(p):
        p = Path(p.strip())
        return str(p if p.is_absolute() else base / p)

    try:
        models, tcfgs = {}, {}
        for variant, suffix in (("plain", ""), ("gf", "_gf"), ("dnt", "_dnt")):
            if f"model{suffix}" in ex:
                models[variant] = rel(ex[f"model{suffix}"])
            if f"train_config{suffix}" in ex:
                tcfgs[variant] = rel(ex[f"train_config{suffix}"])
        seed = int(ex.get("seed", "0"))
        att = cp["attack"] if "attack" in cp else {}
        algorithms = [a.strip() for a in att.get("algorithm", "pnet").split(",") if a.strip()]
        spec = ExperimentSpec(
            dataset=ex.get("dataset", "mnist").strip(),
            data_path=rel(ex["data_path"]) if "data_path" in ex else None,
            image_size=int(ex.get("image_size", "32")),
            channels=int(ex.get("channels", "3")),
            models=models,
            train_configs=tcfgs,
            bits=int(ex["bits"]) if "bits" in ex else None,
            frac_bits=int(ex["frac_bits"]) if "frac_bits" in ex else None,
            n_eval=int(ex.get("n_eval", "500")),
            clean_eval=int(ex["clean_eval"]) if "clean_eval" in ex else None,
            seed=seed,
            output=rel(ex.get("output", "out")),
            float_mode=_bool(ex.get("float_mode", "false")),
            measure_dsr=_bool(ex.get("measure_dsr", "false")),
            algorithms=algorithms,
            attack=_attack_cfg(att),
            defenses=_defenses(cp["defense"] if "defense" in cp else None, seed),
            sweep_sigmas=[float(v) for v in cp.get("defense", "sweep_sigmas", fallback="").split(",") if v.strip()],
        )
    except (ValueError, KeyError) as e:
        raise ConfigError(f"{path}: {e}") from e
    for variant, p in spec.train_configs.items():
        if not Path(p).exists():
            raise ConfigError(f"{path}: training config {p} does not exist")
    for variant, p in spec.models.items():
        if not Path(p).exists() and variant not in spec.train_configs:
            raise ConfigError(f"{path}: model file {p} does not exist")
    return spec


# --- data and models -------------------------------------------------------------


def load_dataset(spec: ExperimentSpec, split: str):
    path = spec.resolved_data_path()
    if spec.dataset == "mnist":
        return load_mnist(path, split)
    if spec.dataset == "cifar10":
        return load_cifar10(path, split)
    if spec.dataset == "imagedir":
        x, y, _, _ = load_image_dir(path / split if (path / split).is_dir() else path, spec.image_size, spec.channels)
        return x, y
    raise ConfigError(f"unknown dataset {spec.dataset!r}")


def get_model(spec: ExperimentSpec, variant: str = "plain"):
    """Load the model for ``variant``, training and caching it if needed."""
    if variant in spec.models and Path(spec.models[variant]).exists():
        return load_model(spec.models[variant])
    out = Path(spec.output) / f"model_{variant}.pnet"
    if out.exists():
        return load_model(out)
    if variant not in spec.train_configs:
        where = spec.models.get(variant, "<none>")
        raise ConfigError(f"no model for variant {variant!r} (model file {where}) and no training config")
    cfg = load_train_config(spec.train_configs[variant])
    x, y = load_dataset(spec, "train")
    if cfg.n_train:
        x, y = x[: cfg.n_train], y[: cfg.n_train]
    arch = build_arch(cfg.arch, make_rng(cfg.seed), input_shape=x.shape[1:], n_classes=int(y.max()) + 1)
    trained, history = train(arch, x, y, cfg)
    bits = spec.bits or int(cfg.extra.get("bits", DEFAULT_BITS.get(spec.dataset, 16)))
    model = encode_model(trained, bits=bits, frac_bits=spec.frac_bits)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    write_history_csv(out.with_suffix(".history.csv"), history)
    return model


# --- metrics and reports ---------------------------------------------------------


def metrics(rows) -> dict:
    """ASR/AFR and averages over all evaluated images (failures included)."""
    rows = list(rows)
    if not rows:
        raise ValueError("metrics need at least one attack result")
    n = len(rows)
    succ = sum(1 for r in rows if r["success"])
    return {
        "asr": succ / n,
        "afr": (n - succ) / n,
        "avg_queries": sum(r["queries"] for r in rows) / n,
        "avg_l2": sum(r["l2"] for r in rows) / n,
    }


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    if v is None:
        return ""
    return str(v)


def write_csv(path, rows, fieldnames, comment: str | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"# {comment or REPORT_SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fieldnames)
        for r in rows:
            w.writerow([_fmt(r.get(k)) for k in fieldnames])


ROW_FIELDS = ["index", "label", "target", "success", "attack_success", "clean_success", "queries", "l2", "final_label"]


@dataclass
class ExperimentReport:
    algorithm: str
    defense: DefenseConfig
    asr: float
    afr: float
    clean_accuracy: float
    avg_queries: float
    avg_l2: float
    n_eval: int
    n_excluded: int
    rows: list
    empirical_dsr: float | None = None
    dsr_deciles: list | None = None
    truncated: bool = False
    config: dict = field(default_factory=dict)
    version: str = __version__
    format_version: int = FORMAT_VERSION

    def summary(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "defense": self.defense.kind,
            "sigma": self.defense.sigma,
            "sigma_in": self.defense.sigma_in,
            "n_eval": self.n_eval,
            "n_excluded": self.n_excluded,
            "clean_accuracy": self.clean_accuracy,
            "asr": self.asr,
            "afr": self.afr,
            "avg_queries": self.avg_queries,
            "avg_l2": self.avg_l2,
            "empirical_dsr": self.empirical_dsr,
            "truncated": self.truncated,
            "empty": not self.rows,
        }

    def asr_curve(self, max_queries: int) -> list[dict]:
        """ASR as a function of the query budget, for plotting."""
        n = max(self.n_eval, 1)
        q = sorted(r["queries"] for r in self.rows if r["success"])
        out, k = [], 0
        for budget in range(1, max_queries + 1):
            while k < len(q) and q[k] <= budget:
                k += 1
            out.append({"queries": budget, "asr": k / n})
        return out


SUMMARY_FIELDS = [
    "algorithm", "defense", "sigma", "sigma_in", "n_eval", "n_excluded", "clean_accuracy",
    "asr", "afr", "avg_queries", "avg_l2", "empirical_dsr", "truncated", "empty",
]


def _attack_one(args):
    """Attack a single pool image; module-level so it can run in a worker."""
    (pos, idx, x, y, model, algorithm, acfg, dcfg, seed, float_mode, n_pool) = args
    attack_seed = child_seeds(seed, n_pool, SEED_ATTACK)[pos]
    oracle_seed = child_seeds(seed, n_pool, SEED_ORACLE)[pos]
    target = -1
    label = int(y)
    if acfg.targeted:
        trng = make_rng(child_seeds(seed, n_pool, SEED_TARGET)[pos])
        n_classes = model.n_classes
        target = int((y + 1 + trng.integers(n_classes - 1)) % n_classes)
        label = target
    oracle = DefendedOracle(model, dcfg, rng=oracle_seed, float_mode=float_mode)
    res = ATTACKS[algorithm](oracle, x, label, acfg, rng=attack_seed)
    adv = x + res.delta
    verify = oracle(adv)
    clean = forward(model, adv, float_mode)
    if acfg.targeted:
        ok_def, ok_clean = verify.label == target, clean.label == target
    else:
        ok_def, ok_clean = verify.label != y, clean.label != y
    row = {
        "index": int(idx),
        "label": int(y),
        "target": target,
        "success": bool(ok_def),
        "attack_success": bool(res.success),
        "clean_success": bool(ok_clean),
        "queries": res.queries_used,
        "l2": res.l2,
        "final_label": int(verify.label),
    }
    return row, (res.trace if acfg.record_inputs else None)


def select_pool(model, x, y, n_eval, seed, float_mode=False):
    """First ``n_eval`` images of a seeded permutation, minus misclassified ones."""
    perm = make_rng(child_seeds(seed, 1, SEED_POOL)[0]).permutation(len(x))[:n_eval]
    pred = predict(model, x[perm], float_mode)
    keep = perm[pred == y[perm]]
    return keep, len(perm) - len(keep)


def run_experiment(spec: ExperimentSpec, algorithm: str | None = None, defense: DefenseConfig | None = None,
                   jobs: int = 1, write: bool = True, pool_x=None, pool_y=None) -> ExperimentReport:
    """Attack the evaluation pool under one (algorithm, defense) pair."""
    algorithm = algorithm or spec.algorithms[0]
    dcfg = defense or spec.defenses[0]
    model = get_model(spec, dcfg.model_variant)
    if pool_x is None:
        pool_x, pool_y = load_dataset(spec, "test")
    keep, excluded = select_pool(model, pool_x, pool_y, spec.n_eval, spec.seed, spec.float_mode)
    acfg = dataclasses.replace(spec.attack, record_inputs=spec.measure_dsr)
    n_pool = len(keep)
    tasks = [
        (pos, idx, pool_x[idx], pool_y[idx], model, algorithm, acfg, dcfg, spec.seed, spec.float_mode, n_pool)
        for pos, idx in enumerate(keep)
    ]
    rows, traces, truncated = [], [], False
    tag = f"{algorithm}_{dcfg.kind}"
    try:
        if jobs > 1 and n_pool > 1:
            with ProcessPoolExecutor(max_workers=jobs) as ex:
                for row, trace in ex.map(_attack_one, tasks, chunksize=max(1, n_pool // (4 * jobs))):
                    rows.append(row)
                    traces.append(trace)
        else:
            for t in tasks:
                row, trace = _attack_one(t)
                rows.append(row)
                traces.append(trace)
    except Exception:
        truncated = True
        if write:
            write_csv(Path(spec.output) / f"rows_{tag}.csv", rows, ROW_FIELDS, f"{REPORT_SCHEMA} truncated=1")
        raise

    clean_n = len(pool_x) if spec.clean_eval is None else min(spec.clean_eval, len(pool_x))
    clean_acc = defended_accuracy(model, pool_x[:clean_n], pool_y[:clean_n], dcfg,
                                  rng=child_seeds(spec.seed, 1, SEED_CLEAN)[0], float_mode=spec.float_mode)
    m = metrics(rows) if rows else {"asr": 0.0, "afr": 0.0, "avg_queries": 0.0, "avg_l2": 0.0}
    dsr = deciles = None
    if spec.measure_dsr and rows:
        runs = [
            (pool_x[r["index"]], r["target"] if acfg.targeted else r["label"], tr)
            for r, tr in zip(rows, traces)
        ]
        events = empirical_dsr(model, dcfg, runs, rng=child_seeds(spec.seed, 1, SEED_DSR)[0], float_mode=spec.float_mode)
        if events:
            dsr = summarize_events(events, dcfg.sigma).s_empirical
            deciles = dsr_by_decile(events, acfg.max_queries, dcfg.sigma)
    report = ExperimentReport(
        algorithm, dcfg, m["asr"], m["afr"], clean_acc, m["avg_queries"], m["avg_l2"],
        len(rows), excluded, rows, dsr, deciles, truncated, spec.echo(),
    )
    if write:
        write_report(report, spec)
    return report


def write_report(report: ExperimentReport, spec: ExperimentSpec) -> None:
    out = Path(spec.output)
    tag = f"{report.algorithm}_{report.defense.kind}"
    flag = " empty=1" if not report.rows else ""
    write_csv(out / f"rows_{tag}.csv", report.rows, ROW_FIELDS, f"{REPORT_SCHEMA}{flag}")
    write_csv(out / f"summary_{tag}.csv", [report.summary()], SUMMARY_FIELDS)
    write_csv(out / f"asr_curve_{tag}.csv", report.asr_curve(spec.attack.max_queries), ["queries", "asr"])
    if report.dsr_deciles:
        write_csv(
            out / f"dsr_deciles_{tag}.csv",
            [dict(p.row(), decile=i + 1) for i, p in enumerate(report.dsr_deciles)],
            ["decile", "sigma", "s_empirical", "n", "ci_low", "ci_high"],
        )
    manifest = {
        "schema": REPORT_SCHEMA,
        "version": report.version,
        "model_format_version": report.format_version,
        "seed": spec.seed,
        "seed_namespaces": {
            "pool": SEED_POOL, "attack": SEED_ATTACK, "oracle": SEED_ORACLE,
            "target": SEED_TARGET, "clean": SEED_CLEAN, "dsr": SEED_DSR,
        },
        "algorithm": report.algorithm,
        "defense": dataclasses.asdict(report.defense),
        "config": report.config,
        "summary": report.summary(),
    }
    (out / f"manifest_{tag}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def run_all(spec: ExperimentSpec, jobs: int = 1) -> list[ExperimentReport]:
    """Every (algorithm, defense) pair of the spec, plus a comparison table."""
    pool_x, pool_y = load_dataset(spec, "test")
    reports = [
        run_experiment(spec, a, d, jobs=jobs, pool_x=pool_x, pool_y=pool_y)
        for d in spec.defenses
        for a in spec.algorithms
    ]
    write_csv(Path(spec.output) / "comparison.csv", [r.summary() for r in reports], SUMMARY_FIELDS)
    return reports


def default_jobs() -> int:
    return max(1, min(4, os.cpu_count() or 1))


def sigma_sweep(spec: ExperimentSpec, jobs: int = 1, algorithm: str | None = None) -> list[dict]:
    """AFR of rpnet at each sigma in ``spec.sweep_sigmas`` (AFR-vs-sigma curve)."""
    pool_x, pool_y = load_dataset(spec, "test")
    rows = []
    for sigma in spec.sweep_sigmas:
        dcfg = DefenseConfig("rpnet", sigma, 0.0, spec.seed) if sigma > 0 else DefenseConfig("none", seed=spec.seed)
        sub = dataclasses.replace(spec, output=str(Path(spec.output) / f"sweep_{sigma:.9g}"))
        r = run_experiment(sub, algorithm, dcfg, jobs=jobs, pool_x=pool_x, pool_y=pool_y)
        rows.append({"sigma": sigma, "afr": r.afr, "asr": r.asr, "clean_accuracy": r.clean_accuracy, "n_eval": r.n_eval})
    write_csv(Path(spec.output) / "afr_vs_sigma.csv", rows, ["sigma", "afr", "asr", "clean_accuracy", "n_eval"])
    return rows


def accuracy_consistency(model, x, y, sigma: float, seed: int = 0, float_mode: bool = False) -> dict:
    """Measured clean-accuracy drop under rpnet(sigma) next to the mean
    pairwise misclassification probability predicted from clean margins."""
    from .defense import margins, misclassification_prob

    clean = float(np.mean(predict(model, x, float_mode) == y))
    dcfg = DefenseConfig("rpnet", sigma, 0.0, seed) if sigma > 0 else DefenseConfig("none", seed=seed)
    defended = defended_accuracy(model, x, y, dcfg, rng=child_seeds(seed, 1, SEED_CLEAN)[0], float_mode=float_mode)
    m = margins(model, x, float_mode)
    predicted = float(np.mean([misclassification_prob(v, sigma) for v in m]))
    return {
        "sigma": sigma,
        "clean_accuracy": clean,
        "defended_accuracy": defended,
        "drop": clean - defended,
        "predicted_drop": predicted,
        "n": len(x),
    }
