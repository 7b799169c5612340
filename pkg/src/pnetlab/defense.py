"""Noise defenses around a PNet oracle and their robustness analysis.

Two noise sites are supported, alone or combined:

* output noise (RPNet): ``sigma * N(0, 1)`` per class, drawn fresh for
  every query and rounded to the model's output fixed-point grid, added to
  the returned scores;
* input noise (RND): ``sigma_in * N(0, 1)`` per pixel added before the
  model runs.

Disturbance is measured on the attacker's accept/reject decision: a probe is
"flipped" when ``(A < 0) != (D < 0)``, where A is the clean score
difference between a probe and its base and D the defended one.  For a
continuous noise difference ``N(0, 2 sigma^2)`` this flips with probability
``P(N(0, 2 sigma^2) > |A|)`` for every A, which is what
:func:`theoretical_dsr` returns.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .nets import softmax
from .numerics import gauss_tail, make_rng
from .pnet_core import PNetModel, ScoreVector, forward, forward_batch, quantize

__all__ = [
    "DEFENSE_KINDS",
    "DefenseConfig",
    "DefendedOracle",
    "DsrPoint",
    "defended_query",
    "theoretical_dsr",
    "misclassification_prob",
    "monte_carlo_flip_rate",
    "wilson_interval",
    "empirical_dsr",
    "dsr_by_decile",
    "margins",
    "margin_distribution",
    "defended_accuracy",
]

# kind -> which trained model it expects
DEFENSE_KINDS = {
    "none": "plain",
    "rnd": "plain",
    "rnd_gf": "gf",
    "rpnet": "plain",
    "rpnet_input": "plain",
    "rpnet_dnt": "dnt",
}


@dataclass
class DefenseConfig:
    kind: str = "none"
    sigma: float = 0.0  # output-noise std
    sigma_in: float = 0.0  # input-noise std
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ParameterError(f"unknown defense kind {self.kind!r}")
        if self.sigma < 0 or self.sigma_in < 0:
            raise ParameterError("noise sigmas must be >= 0")
        if self.kind == "none" and (self.sigma or self.sigma_in):
            raise ParameterError("kind 'none' takes no noise")
        if self.kind in ("rnd", "rnd_gf") and self.sigma:
            raise ParameterError(f"{self.kind} uses input noise only")

    @property
    def model_variant(self) -> str:
        return DEFENSE_KINDS[self.kind]

    @classmethod
    def mnist_preset(cls, kind: str, seed: int = 0) -> "DefenseConfig":
        """Noise levels used for the MNIST comparison."""
        sig = {
            "none": (0.0, 0.0),
            "rnd": (0.0, 0.03),
            "rnd_gf": (0.0, 0.05),
            "rpnet": (0.05, 0.0),
            "rpnet_input": (0.05, 0.03),
            "rpnet_dnt": (0.05, 0.05),
        }[kind]
        return cls(kind, sig[0], sig[1], seed)

    @classmethod
    def cifar_preset(cls, kind: str, seed: int = 0) -> "DefenseConfig":
        sig = {
            "none": (0.0, 0.0),
            "rnd": (0.0, 0.05),
            "rnd_gf": (0.0, 0.05),
            "rpnet": (0.1, 0.0),
            "rpnet_input": (0.1, 0.05),
            "rpnet_dnt": (0.1, 0.05),
        }[kind]
        return cls(kind, sig[0], sig[1], seed)


def _output_noise(model: PNetModel, sigma: float, rng, shape) -> np.ndarray:
    """Gaussian noise rounded to the output grid 2**-f_act."""
    q = quantize(sigma * rng.standard_normal(shape), model.acc_bits, model.f_act)
    return q.dequantize()


class DefendedOracle:
    """Callable oracle ``x -> ScoreVector`` applying a :class:`DefenseConfig`.

    Owns its generator; use one instance per attack run.
    """

    def __init__(self, model: PNetModel, cfg: DefenseConfig, rng=None, float_mode: bool = False):
        self.model, self.cfg, self.float_mode = model, cfg, float_mode
        self.rng = rng if isinstance(rng, np.random.Generator) else make_rng(cfg.seed if rng is None else rng)
        self.calls = 0

    def __call__(self, x) -> ScoreVector:
        self.calls += 1
        return defended_query(self.model, x, self.cfg, self.rng, self.float_mode)


def defended_query(model: PNetModel, x, cfg: DefenseConfig, rng, float_mode: bool = False) -> ScoreVector:
    """One defended query; with all sigmas zero this is exactly ``forward``."""
    if cfg.sigma_in > 0:
        x = np.asarray(x, dtype=np.float64) + cfg.sigma_in * rng.standard_normal(np.shape(x))
    sv = forward(model, x, float_mode)
    if cfg.sigma == 0:
        if cfg.sigma_in > 0:
            sv.defended = True
        return sv
    noise = _output_noise(model, cfg.sigma, rng, sv.scores.shape)
    return ScoreVector(sv.scores + noise, sv.logits, sv.n_saturated, defended=True, extra={"noise": noise})


def defended_scores_batch(model: PNetModel, x, cfg: DefenseConfig, rng, float_mode=False, batch_size=500):
    out = []
    for i in range(0, len(x), batch_size):
        xb = np.asarray(x[i : i + batch_size], dtype=np.float64)
        if cfg.sigma_in > 0:
            xb = xb + cfg.sigma_in * rng.standard_normal(xb.shape)
        s = softmax(forward_batch(model, xb, float_mode)[0])
        if cfg.sigma > 0:
            s = s + _output_noise(model, cfg.sigma, rng, s.shape)
        out.append(s)
    return np.concatenate(out) if out else np.zeros((0, model.n_classes))


def defended_accuracy(model: PNetModel, x, y, cfg: DefenseConfig, rng=None, float_mode=False) -> float:
    rng = rng if isinstance(rng, np.random.Generator) else make_rng(cfg.seed if rng is None else rng)
    s = defended_scores_batch(model, x, cfg, rng, float_mode)
    return float(np.mean(s.argmax(axis=1) == np.asarray(y)))


# --- closed forms ------------------------------------------------------------


def theoretical_dsr(a: float, sigma: float) -> float:
    """Probability that output noise flips the attacker's decision on a step
    whose clean score difference has magnitude ``a``."""
    a = abs(a)
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return 0.0
    return gauss_tail(a, 2.0 * sigma * sigma)


def misclassification_prob(margin: float, sigma: float) -> float:
    """Pairwise probability that output noise swaps the top-2 classes."""
    if margin < 0:
        raise ParameterError(f"margin must be >= 0, got {margin}")
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return 0.0
    return gauss_tail(margin, 2.0 * sigma * sigma)


def monte_carlo_flip_rate(a: float, sigma: float, n: int, rng) -> float:
    """Monte-Carlo estimate of the decision-flip rate for a constant A = a >= 0.

    Draws the two per-query noises separately, i.e. it does not rely on the
    N(0, 2 sigma^2) closed form for their difference.
    """
    rng = rng if isinstance(rng, np.random.Generator) else make_rng(rng)
    d0 = rng.standard_normal(n)
    d1 = rng.standard_normal(n)
    dp = a + sigma * (d1 - d0)
    return float(np.mean((dp < 0) != (a < 0)))


def wilson_interval(k: int, n: int, alpha: float = 0.05) -> tuple[float, float]:
    from statsmodels.stats.proportion import proportion_confint

    if n == 0:
        return (0.0, 1.0)
    lo, hi = proportion_confint(k, n, alpha=alpha, method="wilson")
    return float(lo), float(hi)


@dataclass
class DsrPoint:
    a: float | None
    sigma: float
    s_theory: float | None
    s_empirical: float
    n: int
    ci_low: float
    ci_high: float

    def row(self) -> dict:
        return {
            "a": self.a,
            "sigma": self.sigma,
            "s_theory": self.s_theory,
            "s_empirical": self.s_empirical,
            "n": self.n,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
        }


def dsr_grid(sigmas, a_values, n_trials: int, seed: int = 0) -> list[DsrPoint]:
    """Theory vs Monte-Carlo over an (a, sigma) grid."""
    rng = make_rng(seed)
    out = []
    for sigma in sigmas:
        for a in a_values:
            rate = monte_carlo_flip_rate(a, sigma, n_trials, rng)
            lo, hi = wilson_interval(round(rate * n_trials), n_trials)
            out.append(DsrPoint(a, sigma, theoretical_dsr(a, sigma), rate, n_trials, lo, hi))
    return out


# --- empirical DSR on replayed attack traces --------------------------------


@dataclass
class DsrEvent:
    query: int
    a_p: float
    d_p: float

    @property
    def flipped(self) -> bool:
        return (self.a_p < 0) != (self.d_p < 0)


def replay_pairs(x, trace):
    """Yield ``(query_index, base_input, probe_input)`` for every probe.

    The base of a probe is the input of the most recent accepted call; the
    trace must have been recorded with ``record_inputs=True``.
    """
    base = None
    for rec in trace:
        if rec.probe is None:
            raise ParameterError("trace was recorded without inputs; rerun with record_inputs=True")
        if rec.direction is None:
            base = rec.probe
            continue
        yield rec.query, base, rec.probe
        if rec.accepted:
            base = rec.probe


def empirical_dsr(model: PNetModel, cfg: DefenseConfig, runs, rng=None, float_mode=False) -> list[DsrEvent]:
    """Replay attack traces through clean and defended oracles.

    ``runs`` is an iterable of ``(x, objective_class, trace)``.  For every
    probe, A is the clean change of the objective-class score from base to
    probe and D the same change under the defense with fresh noise on both
    queries.
    """
    rng = rng if isinstance(rng, np.random.Generator) else make_rng(cfg.seed if rng is None else rng)
    events = []
    for x, cls, trace in runs:
        pairs = list(replay_pairs(x, trace))
        if not pairs:
            continue
        bases = np.stack([b for _, b, _ in pairs])
        probes = np.stack([p for _, _, p in pairs])
        clean_b = softmax(forward_batch(model, bases, float_mode)[0])[:, cls]
        clean_p = softmax(forward_batch(model, probes, float_mode)[0])[:, cls]
        both = defended_scores_batch(model, np.concatenate([bases, probes]), cfg, rng, float_mode)[:, cls]
        def_b, def_p = both[: len(pairs)], both[len(pairs) :]
        for k, (q, _, _) in enumerate(pairs):
            events.append(DsrEvent(q, float(clean_p[k] - clean_b[k]), float(def_p[k] - def_b[k])))
    return events


def summarize_events(events, sigma: float) -> DsrPoint:
    n = len(events)
    k = sum(e.flipped for e in events)
    lo, hi = wilson_interval(k, n)
    return DsrPoint(None, sigma, None, k / n if n else 0.0, n, lo, hi)


def dsr_by_decile(events, max_queries: int, sigma: float = 0.0) -> list[DsrPoint]:
    """Empirical DSR split into ten equal slices of the query budget."""
    buckets = [[] for _ in range(10)]
    for e in events:
        buckets[min(9, (e.query - 1) * 10 // max_queries)].append(e)
    return [summarize_events(b, sigma) for b in buckets]


# --- margins -------------------------------------------------------------------


def margins(model: PNetModel, x, float_mode=False) -> np.ndarray:
    """Top-1 minus runner-up clean score for every sample."""
    from .pnet_core import scores_batch

    s = np.sort(scores_batch(model, x, float_mode), axis=1)
    if s.shape[1] < 2:
        return np.ones(len(s))
    return s[:, -1] - s[:, -2]


def margin_distribution(model: PNetModel, x, bins=20, float_mode=False):
    """Returns ``(margins, counts, edges)`` with ``bins`` equal bins on [0, 1]."""
    m = margins(model, x, float_mode)
    counts, edges = np.histogram(m, bins=bins, range=(0.0, 1.0))
    return m, counts, edges
