"""Score-based black-box attacks.

An oracle is any callable ``oracle(x) -> ScoreVector`` on a single
channels-last image in [0, 1].  Attacks never look past that interface, so
they cannot tell whether a defense is active.

Query accounting: ``queries_used`` counts every oracle call an attack makes,
the initial clean query included, and the run stops once it reaches
``max_queries``.  The trace holds one record per call.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .numerics import dct_basis, l2_norm, make_rng

__all__ = [
    "AttackConfig",
    "TraceRecord",
    "AttackResult",
    "FrequencyPlan",
    "schedule_lambda",
    "build_arc_order",
    "pnet_attack",
    "simba_dct",
    "square_attack",
    "ATTACKS",
]


@dataclass
class AttackConfig:
    mode: str = "untargeted"  # or "targeted"; the label argument is y or y* accordingly
    epsilon: float = 1.0  # step seed, DCT-coefficient units
    lambda_min: float = 0.5
    lambda_max: float = 1.5
    cycle: int = 400
    max_queries: int = 100
    simba_freq_ratio: float = 0.25
    square_eps: float = 0.1  # l_inf budget
    square_p_init: float = 0.05
    record_inputs: bool = False

    def __post_init__(self):
        if self.mode not in ("untargeted", "targeted"):
            raise ParameterError(f"mode must be 'untargeted' or 'targeted', got {self.mode!r}")
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be > 0, got {self.epsilon}")
        if self.lambda_min > self.lambda_max:
            raise ParameterError("lambda_min must be <= lambda_max")
        if self.max_queries < 1:
            raise ParameterError("max_queries must be >= 1")
        if self.cycle <= 0:
            raise ParameterError("cycle must be > 0")

    @property
    def targeted(self) -> bool:
        return self.mode == "targeted"

    @classmethod
    def defaults(cls, mode: str, **kw) -> "AttackConfig":
        """Budget 300 for targeted runs and 100 for untargeted ones."""
        kw.setdefault("max_queries", 300 if mode == "targeted" else 100)
        return cls(mode=mode, **kw)


@dataclass
class TraceRecord:
    query: int  # 1-based oracle call index
    direction: tuple | None  # attack-specific id; None for the initial query
    sign: int  # sign of the probe step (0 for the initial query)
    accepted: bool
    objective: float  # score of the attacked class returned by this call
    score_change: int  # sign of (objective - cached objective) before the call
    probe: np.ndarray | None = None  # the queried input, when recorded


@dataclass
class AttackResult:
    success: bool
    queries_used: int
    delta: np.ndarray  # effective perturbation clip(x + raw_delta) - x
    raw_delta: np.ndarray  # signed sum of accepted steps, before clamping
    l2: float
    label: int
    final_label: int
    trace: list[TraceRecord] = field(default_factory=list)


@dataclass
class FrequencyPlan:
    coords: list[tuple[int, int, int]]
    seed: int | None = None

    def __len__(self):
        return len(self.coords)

    def __iter__(self):
        return iter(self.coords)


def schedule_lambda(t: float, cycle: float, lambda_min: float, lambda_max: float) -> float:
    """Cosine-annealed step multiplier, lambda_max at t=0 down to lambda_min at t=cycle."""
    lam = lambda_min + 0.5 * (lambda_max - lambda_min) * (1.0 + math.cos(t / cycle * math.pi))
    return min(max(lam, lambda_min), lambda_max)


def build_arc_order(d: int, c: int, rng: np.random.Generator | int | None = None) -> FrequencyPlan:
    """All (i, j, channel) triples by ascending anti-diagonal i + j.

    Entries on the same anti-diagonal (all channels together) are shuffled
    with ``rng``.
    """
    seed = rng if isinstance(rng, (int, np.integer)) else None
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(rng)
    coords = []
    for s in range(2 * d - 1):
        diag = [(i, s - i, ch) for i in range(max(0, s - d + 1), min(s, d - 1) + 1) for ch in range(c)]
        order = rng.permutation(len(diag))
        coords.extend(diag[k] for k in order)
    return FrequencyPlan(coords, seed)


def _is_success(scores, label, targeted):
    top = int(np.argmax(scores))  # lowest index wins ties
    return top == label if targeted else top != label


class _Counter:
    """Wraps the oracle, counts calls and builds the trace."""

    def __init__(self, oracle, budget, record_inputs):
        self.oracle, self.budget, self.record = oracle, budget, record_inputs
        self.used = 0
        self.trace: list[TraceRecord] = []

    @property
    def exhausted(self):
        return self.used >= self.budget

    def __call__(self, x):
        self.used += 1
        return self.oracle(x)

    def log(self, direction, sign, accepted, objective, change, probe):
        self.trace.append(
            TraceRecord(self.used, direction, sign, accepted, float(objective), int(change),
                        probe.copy() if self.record else None)
        )


def _coordinate_search(oracle, x, label, cfg, coords, step_for, signs):
    """Shared accept/reject loop of PNet-Attack and SimBA-DCT."""
    x = np.asarray(x, dtype=np.float64)
    d, _, c = x.shape
    targeted = cfg.targeted
    q = _Counter(oracle, cfg.max_queries, cfg.record_inputs)
    raw = np.zeros_like(x)
    cur = q(np.clip(x, 0, 1))
    q.log(None, 0, True, cur.scores[label], 0, np.clip(x, 0, 1))
    done = _is_success(cur.scores, label, targeted)
    probes = 0
    for i, j, ch in coords:
        if done or q.exhausted:
            break
        alpha = step_for(probes)
        basis = dct_basis(d, i, j)
        for s in signs:
            if q.exhausted:
                break
            probes += 1
            step = np.zeros_like(x)
            step[:, :, ch] = s * alpha * basis
            cand = np.clip(x + raw + step, 0.0, 1.0)
            new = q(cand)
            diff = new.scores[label] - cur.scores[label]
            better = diff > 0 if targeted else diff < 0
            q.log((i, j, ch), s, bool(better), new.scores[label], np.sign(diff), cand)
            if better:
                raw += step
                cur = new
                break
        done = _is_success(cur.scores, label, targeted)
    delta = np.clip(x + raw, 0.0, 1.0) - x
    return AttackResult(done, q.used, delta, raw, l2_norm(delta), label, cur.label, q.trace)


def pnet_attack(oracle, x, label: int, cfg: AttackConfig, rng=None, plan: FrequencyPlan | None = None) -> AttackResult:
    """Arc-ordered DCT coordinate search with a cosine step schedule.

    For each coordinate the step is ``lambda_t * epsilon`` where t counts the
    probes made so far; ``+step`` is tried first, then ``-step``.  A probe is
    kept when it lowers the true-class score (untargeted) or raises the
    target-class score (targeted).
    """
    x = np.asarray(x, dtype=np.float64)
    d, _, c = x.shape
    if plan is None:
        plan = build_arc_order(d, c, rng if rng is not None else 0)

    def step_for(t):
        return schedule_lambda(t, cfg.cycle, cfg.lambda_min, cfg.lambda_max) * cfg.epsilon

    return _coordinate_search(oracle, x, label, cfg, plan, step_for, (1, -1))


def simba_order(d: int, c: int, ratio: float, rng) -> list[tuple[int, int, int]]:
    """Random order over the low-frequency block first, then everything else."""
    rng = rng if isinstance(rng, np.random.Generator) else make_rng(rng)
    k = max(1, math.ceil(ratio * d))
    low = [(i, j, ch) for i in range(k) for j in range(k) for ch in range(c)]
    high = [(i, j, ch) for i in range(d) for j in range(d) for ch in range(c) if i >= k or j >= k]
    return [low[p] for p in rng.permutation(len(low))] + [high[p] for p in rng.permutation(len(high))]


def simba_dct(oracle, x, label: int, cfg: AttackConfig, rng=None) -> AttackResult:
    """SimBA-DCT: random low-frequency DCT directions with a fixed step."""
    x = np.asarray(x, dtype=np.float64)
    d, _, c = x.shape
    coords = simba_order(d, c, cfg.simba_freq_ratio, rng if rng is not None else 0)
    return _coordinate_search(oracle, x, label, cfg, coords, lambda t: cfg.epsilon, (-1, 1))


def _margin(scores, label, targeted):
    """Loss to minimise; negative exactly when the attack has succeeded."""
    others = np.delete(scores, label)
    if targeted:
        return float(others.max() - scores[label])
    return float(scores[label] - others.max())


def square_side(p: float, d: int) -> int:
    return int(min(max(round(math.sqrt(p * d * d)), 1), d))


def square_p(p_init: float, it: int, n_iters: int) -> float:
    """Piecewise-constant patch fraction, halved at fixed fractions of the run."""
    it = int(it / max(n_iters, 1) * 10000)
    for bound, div in ((10, 1), (50, 2), (200, 4), (500, 8), (1000, 16), (2000, 32), (4000, 64), (6000, 128), (8000, 256)):
        if it <= bound:
            return p_init / div
    return p_init / 512


def square_attack(oracle, x, label: int, cfg: AttackConfig, rng=None) -> AttackResult:
    """Square attack (l_inf): random square patches of +-eps per channel."""
    x = np.asarray(x, dtype=np.float64)
    rng = rng if isinstance(rng, np.random.Generator) else make_rng(rng if rng is not None else 0)
    h, w, c = x.shape
    eps, targeted = cfg.square_eps, cfg.targeted
    q = _Counter(oracle, cfg.max_queries, cfg.record_inputs)

    # vertical-stripe initialisation
    raw = eps * rng.choice([-1.0, 1.0], size=(1, w, c)) * np.ones((h, 1, 1))
    x_cur = np.clip(x + raw, 0.0, 1.0)
    cur = q(x_cur)
    loss = _margin(cur.scores, label, targeted)
    q.log(None, 0, True, cur.scores[label], 0, x_cur)
    done = _is_success(cur.scores, label, targeted)
    it = 0
    while not done and not q.exhausted:
        side = square_side(square_p(cfg.square_p_init, it, cfg.max_queries), h)
        r0 = int(rng.integers(0, h - side + 1))
        c0 = int(rng.integers(0, w - side + 1))
        new_raw = raw.copy()
        for _ in range(10):  # redraw when the patch would not change anything
            new_raw[r0 : r0 + side, c0 : c0 + side, :] = eps * rng.choice([-1.0, 1.0], size=(1, 1, c))
            if not np.array_equal(new_raw[r0 : r0 + side, c0 : c0 + side], raw[r0 : r0 + side, c0 : c0 + side]):
                break
        cand = np.clip(x + new_raw, 0.0, 1.0)
        new = q(cand)
        new_loss = _margin(new.scores, label, targeted)
        better = new_loss < loss
        q.log((r0, c0, side), 1, bool(better), new.scores[label], np.sign(new.scores[label] - cur.scores[label]), cand)
        if better:
            raw, cur, loss = new_raw, new, new_loss
        done = _is_success(cur.scores, label, targeted)
        it += 1
    delta = np.clip(x + raw, 0.0, 1.0) - x
    return AttackResult(bool(done), q.used, delta, raw, l2_norm(delta), label, cur.label, q.trace)


def pnet_attack_flat(oracle, x, label: int, cfg: AttackConfig, rng=None) -> AttackResult:
    """PNet-Attack with the schedule pinned to lambda = 1."""
    return pnet_attack(oracle, x, label, dataclasses.replace(cfg, lambda_min=1.0, lambda_max=1.0), rng)


ATTACKS = {
    "pnet": pnet_attack,
    "pnet-noschedule": pnet_attack_flat,
    "simba-dct": simba_dct,
    "square": square_attack,
}
