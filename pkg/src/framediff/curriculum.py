"""Difficulty-adaptive curriculum over (task, frame length) pairs.

The sampling target is a scalar "sample entropy" built from two parts:

* a static part, the expected intrinsic entropy H^T + H^N under a grid that
  drifts from easy cells (IPT, short clips) to hard ones (GRT, long clips);
* an adaptive part driven by a PID controller on the loss deviation
  (current loss minus the running mean of earlier losses).

The fused target is ratcheted so it never decreases.  Samples are drawn
from the static grid exponentially tilted until its expected entropy hits
the target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .masks import TASKS
from .validation import check_finite_scalar, check_rng

TASK_START = (0.7, 0.2, 0.1)
TASK_END = (0.1, 0.3, 0.6)
RATIO_START = 0.5
RATIO_END = 2.0
BETA_BRACKET = (-50.0, 50.0)
STRATEGIES = ("none", "lcl", "dcl")


@dataclass(frozen=True)
class IntrinsicEntropy:
    task: dict
    n_min: int
    n_max: int

    @classmethod
    def default(cls, n_min: int, n_max: int, task=(1.0, 2.0, 3.0)) -> "IntrinsicEntropy":
        ent = cls(dict(zip(TASKS, map(float, task))), n_min, n_max)
        ent.validate()
        return ent

    def validate(self):
        t = [self.task[k] for k in TASKS]
        if not (t[0] < t[1] < t[2]):
            raise ValueError(f"task entropies must satisfy IPT < PDT < GRT, got {t}")
        if self.n_min < 1 or self.n_max < self.n_min:
            raise ValueError(f"bad frame range [{self.n_min}, {self.n_max}]")

    @property
    def lengths(self) -> np.ndarray:
        return np.arange(self.n_min, self.n_max + 1)

    def frames(self, n) -> np.ndarray:
        return np.log(np.asarray(n, dtype=np.float64))

    def table(self) -> np.ndarray:
        """H^T + H^N as a [3, n_max - n_min + 1] array."""
        t = np.array([self.task[k] for k in TASKS])
        return t[:, None] + self.frames(self.lengths)[None, :]


@dataclass(frozen=True)
class StaticGrid:
    """Probability over cells (task index, N - n_min)."""

    probs: np.ndarray
    n_min: int

    def __post_init__(self):
        p = self.probs
        if p.ndim != 2 or p.shape[0] != len(TASKS):
            raise ValueError(f"grid must be [3, n_lengths], got {p.shape}")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("grid cells must be non-negative and sum to 1")

    @property
    def n_max(self) -> int:
        return self.n_min + self.probs.shape[1] - 1

    def task_marginal(self) -> np.ndarray:
        return self.probs.sum(axis=1)

    def frame_marginal(self) -> np.ndarray:
        return self.probs.sum(axis=0)

    def cell(self, task: str, n: int) -> float:
        return float(self.probs[TASKS.index(task), n - self.n_min])


def _check_step(t, total_steps):
    if total_steps < 1 or not 0 <= t <= total_steps:
        raise ValueError(f"step {t} outside [0, {total_steps}]")
    return t / total_steps


def _normalized(p: np.ndarray) -> np.ndarray:
    p = p / p.sum()
    # push the rounding residue into the largest cell so the sum is 1 to the last ulp or two
    p.flat[np.argmax(p)] += 1.0 - p.sum()
    return p


def geometric_lengths(n_min: int, n_max: int, ratio: float) -> np.ndarray:
    logw = np.arange(n_max - n_min + 1, dtype=np.float64) * math.log(ratio)
    w = np.exp(logw - logw.max())
    return w / w.sum()


def static_grid(t: int, total_steps: int, n_min: int, n_max: int) -> StaticGrid:
    """Task marginal linear in t; length conditional truncated-geometric with log-linear ratio."""
    s = _check_step(t, total_steps)
    task = (1 - s) * np.array(TASK_START) + s * np.array(TASK_END)
    ratio = math.exp((1 - s) * math.log(RATIO_START) + s * math.log(RATIO_END))
    lengths = geometric_lengths(n_min, n_max, ratio)
    return StaticGrid(_normalized(task[:, None] * lengths[None, :]), n_min)


def lcl_grid(t: int, total_steps: int, n_min: int, n_max: int) -> StaticGrid:
    """Linear curriculum baseline: task marginal as in the static grid, lengths uniform."""
    s = _check_step(t, total_steps)
    task = (1 - s) * np.array(TASK_START) + s * np.array(TASK_END)
    lengths = np.full(n_max - n_min + 1, 1.0 / (n_max - n_min + 1))
    return StaticGrid(_normalized(task[:, None] * lengths[None, :]), n_min)


def uniform_grid(n_min: int, n_max: int) -> StaticGrid:
    m = n_max - n_min + 1
    return StaticGrid(_normalized(np.full((len(TASKS), m), 1.0 / (len(TASKS) * m))), n_min)


def static_entropy(grid: StaticGrid, intrinsic: IntrinsicEntropy) -> float:
    return float(np.sum(grid.probs * intrinsic.table()))


# --------------------------------------------------------------------- PID

@dataclass
class PidState:
    kp: float = 1.0
    ki: float = 0.05
    kd: float = 0.25
    bound: float = 1.0
    integral: float = 0.0
    prev_error: float | None = None  # None until the first update: no derivative kick

    def __post_init__(self):
        if min(self.kp, self.ki, self.kd) < 0:
            raise ValueError("PID gains must be non-negative")
        if self.bound < 0:
            raise ValueError("anti-windup bound must be non-negative")


def windup_bound(ki: float, delta: float) -> float:
    return 10.0 * delta / max(1.0, ki)


def pid_update(pid: PidState, loss_dev: float) -> float:
    """One discrete PID step on error = -loss_dev (a harder-than-usual batch pushes the score down)."""
    e = -check_finite_scalar(loss_dev, "loss deviation")
    pid.integral = min(pid.bound, max(-pid.bound, pid.integral + e))
    deriv = 0.0 if pid.prev_error is None else e - pid.prev_error
    pid.prev_error = e
    return pid.kp * e + pid.ki * pid.integral + pid.kd * deriv


# ------------------------------------------------------------------- state

@dataclass
class CurriculumState:
    total_steps: int
    intrinsic: IntrinsicEntropy
    pid: PidState
    lam: float = 0.7
    delta: float = 0.0
    step: int = 0
    loss_count: int = 0
    loss_sum: float = 0.0
    p_star: float = 0.0
    realized: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"lambda must lie in (0, 1], got {self.lam}")

    @classmethod
    def create(cls, total_steps: int, n_min: int, n_max: int, *, lam: float = 0.7,
               kp: float = 1.0, ki: float = 0.05, kd: float = 0.25, delta: float | None = None,
               task_entropy=(1.0, 2.0, 3.0)) -> "CurriculumState":
        intrinsic = IntrinsicEntropy.default(n_min, n_max, task_entropy)
        if delta is None:
            table = intrinsic.table()
            delta = 0.2 * float(table.max() - table.min())
        pid = PidState(kp, ki, kd, bound=windup_bound(ki, delta))
        return cls(total_steps, intrinsic, pid, lam=lam, delta=delta)

    def snapshot(self) -> dict:
        return {
            "step": self.step, "loss_count": self.loss_count, "loss_sum": self.loss_sum,
            "p_star": self.p_star, "integral": self.pid.integral, "prev_error": self.pid.prev_error,
            "last_realized": self.realized[-1] if self.realized else None,
        }

    def restore(self, snap: dict) -> None:
        self.step = snap["step"]
        self.loss_count = snap["loss_count"]
        self.loss_sum = snap["loss_sum"]
        self.p_star = snap["p_star"]
        self.pid.integral = snap["integral"]
        self.pid.prev_error = snap["prev_error"]
        self.realized = [] if snap["last_realized"] is None else [snap["last_realized"]]


def loss_deviation(state: CurriculumState, loss: float) -> float:
    """Current loss minus the mean of all earlier losses (0 on the first call); records ``loss``."""
    loss = check_finite_scalar(loss, "loss")
    dev = 0.0 if state.loss_count == 0 else loss - state.loss_sum / state.loss_count
    state.loss_count += 1
    state.loss_sum += loss
    return dev


def adaptive_entropy(state: CurriculumState, static_h: float, p_star: float) -> float:
    return static_h + state.delta * math.tanh(p_star)


def fused_target(state: CurriculumState, static_h: float, adaptive_h: float) -> tuple[float, float]:
    """Return (raw, realized); realized is the running max so the target never regresses."""
    raw = static_h + (1.0 - state.lam) * (adaptive_h - static_h)
    realized = raw if not state.realized else max(state.realized[-1], raw)
    state.realized.append(realized)
    return raw, realized


# ----------------------------------------------------------------- sampler

def _tilt(log_p: np.ndarray, h: np.ndarray, beta: float) -> np.ndarray:
    z = log_p + beta * h
    z = z - z[np.isfinite(z)].max()
    q = np.exp(z)
    return q / q.sum()


def tilted_distribution(grid: StaticGrid, intrinsic: IntrinsicEntropy, target: float,
                        tol: float = 1e-3) -> tuple[np.ndarray, float]:
    """Q proportional to P * exp(beta * h) with E_Q[h] matching ``target`` clamped to reach."""
    check_finite_scalar(target, "entropy target")
    h = intrinsic.table()
    p = grid.probs
    if abs(float(np.sum(p * h)) - target) <= tol * 1e-3:
        return p, 0.0
    with np.errstate(divide="ignore"):
        log_p = np.log(p)

    def mean_h(beta):
        return float(np.sum(_tilt(log_p, h, beta) * h))

    lo, hi = BETA_BRACKET
    m_lo, m_hi = mean_h(lo), mean_h(hi)
    goal = min(max(target, m_lo), m_hi)
    if not m_lo <= goal <= m_hi:
        raise RuntimeError(f"bisection does not bracket target {goal} in [{m_lo}, {m_hi}]")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        m = mean_h(mid)
        if abs(m - goal) <= tol * 1e-3:
            break
        if m < goal:
            lo = mid
        else:
            hi = mid
    if goal == m_hi:
        mid = BETA_BRACKET[1]
    elif goal == m_lo:
        mid = BETA_BRACKET[0]
    return _tilt(log_p, h, mid), mid


def draw_cell(q: np.ndarray, n_min: int, rng) -> tuple[str, int]:
    rng = check_rng(rng)
    idx = int(rng.choice(q.size, p=q.reshape(-1)))
    ti, ni = divmod(idx, q.shape[1])
    return TASKS[ti], n_min + ni


def sample_task(state: CurriculumState, grid: StaticGrid, target: float, rng) -> tuple[str, int]:
    q, _ = tilted_distribution(grid, state.intrinsic, target)
    return draw_cell(q, grid.n_min, rng)


# --------------------------------------------------------------- scheduler

@dataclass
class StepPlan:
    step: int
    task: str
    n: int
    static_h: float
    adaptive_h: float
    raw_h: float
    realized_h: float
    p_star: float
    support: np.ndarray


class CurriculumScheduler:
    """Drives one training run: ``plan`` picks (T, N) for the step, ``observe`` feeds the loss back.

    ``strategy`` is ``"dcl"`` (static + PID), ``"lcl"`` (linear task schedule,
    uniform lengths) or ``"none"`` (uniform over all cells).
    """

    def __init__(self, strategy: str, total_steps: int, n_min: int, n_max: int, *, lam: float = 0.7,
                 kp: float = 1.0, ki: float = 0.05, kd: float = 0.25, delta: float | None = None,
                 task_entropy=(1.0, 2.0, 3.0)):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown curriculum strategy {strategy!r}; expected one of {STRATEGIES}")
        self.strategy = strategy
        self.n_min, self.n_max = n_min, n_max
        self.state = CurriculumState.create(total_steps, n_min, n_max, lam=lam, kp=kp, ki=ki, kd=kd,
                                            delta=delta, task_entropy=task_entropy)

    def grid(self, t: int) -> StaticGrid:
        total = self.state.total_steps
        t = min(t, total)
        if self.strategy == "dcl":
            return static_grid(t, total, self.n_min, self.n_max)
        if self.strategy == "lcl":
            return lcl_grid(t, total, self.n_min, self.n_max)
        return uniform_grid(self.n_min, self.n_max)

    def plan(self, rng) -> StepPlan:
        st = self.state
        grid = self.grid(st.step)
        static_h = static_entropy(grid, st.intrinsic)
        if self.strategy == "dcl":
            adaptive_h = adaptive_entropy(st, static_h, st.p_star)
            raw, realized = fused_target(st, static_h, adaptive_h)
            q, _ = tilted_distribution(grid, st.intrinsic, realized)
        else:
            adaptive_h = raw = realized = static_h
            q = grid.probs
        task, n = draw_cell(q, self.n_min, rng)
        return StepPlan(st.step, task, n, static_h, adaptive_h, raw, realized, st.p_star, q)

    def observe(self, loss: float) -> tuple[float, float]:
        """Feed the step's loss back; returns (loss deviation, new PID output)."""
        st = self.state
        dev = loss_deviation(st, loss)
        if self.strategy == "dcl":
            st.p_star = pid_update(st.pid, dev)
        st.step += 1
        return dev, st.p_star
