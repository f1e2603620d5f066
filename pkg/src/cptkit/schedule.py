"""Learning-rate schedules over a token horizon.

A schedule is an immutable value evaluated as a pure function of the token
index, so instances can be shared freely across threads.  Two families are
supported:

* ``cosine`` -- decays from ``eta_start`` to ``eta_end`` following
  ``eta_end + 0.5 * (eta_start - eta_end) * (1 + cos(pi * t / T))``,
  with ``t`` and ``T`` measured from the end of the optional linear warmup.
* ``wsd`` -- holds ``eta_start`` for a stable fraction of the horizon and
  then decays to ``eta_end`` with a linear or cosine tail.

``solve_switch_token`` inverts a schedule: it finds the first token at which
the LR has dropped to a given fraction of ``eta_start``.  For cosine
schedules the arccos closed form is used and then verified against the
schedule itself; if verification fails (or for WSD schedules) an integer
bisection takes over.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import InvalidParameterError, OutOfRangeError, UnreachableTargetError

COSINE = "cosine"
WSD = "wsd"
KINDS = (COSINE, WSD)
DECAY_SHAPES = ("linear", "cosine")


@dataclass(frozen=True)
class WarmupSpec:
    """Linear LR ramp covering the first ``tokens`` tokens of a schedule."""

    start_lr: float
    target_lr: float
    tokens: int

    def __post_init__(self):
        if self.start_lr < 0:
            raise InvalidParameterError("warmup start_lr must be >= 0")
        if self.target_lr <= self.start_lr:
            raise InvalidParameterError("warmup target_lr must exceed start_lr")
        if self.tokens <= 0:
            raise InvalidParameterError("warmup tokens must be positive")


@dataclass(frozen=True)
class LrSchedule:
    kind: str
    eta_start: float
    eta_end: float
    total_tokens: int
    warmup: WarmupSpec | None = None
    wsd_stable_fraction: float = 0.8
    wsd_decay_shape: str = "linear"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParameterError(f"unknown schedule kind {self.kind!r}")
        if self.eta_start <= 0:
            raise InvalidParameterError("eta_start must be positive")
        if self.eta_end < 0 or self.eta_end > self.eta_start:
            raise InvalidParameterError("eta_end must lie in [0, eta_start]")
        if self.total_tokens <= 0:
            raise InvalidParameterError("total_tokens must be positive")
        if self.warmup is not None:
            if self.warmup.tokens >= self.total_tokens:
                raise InvalidParameterError("warmup must end before the horizon")
            # The decay starts where the ramp tops out; anything else would
            # leave a discontinuity at the warmup boundary.
            if not math.isclose(self.warmup.target_lr, self.eta_start, rel_tol=1e-9):
                raise InvalidParameterError(
                    "warmup target_lr must equal the schedule's eta_start"
                )
        if self.kind == WSD:
            if not 0 <= self.wsd_stable_fraction < 1:
                raise InvalidParameterError("wsd_stable_fraction must lie in [0, 1)")
            if self.wsd_decay_shape not in DECAY_SHAPES:
                raise InvalidParameterError(
                    f"unknown wsd decay shape {self.wsd_decay_shape!r}"
                )

    @property
    def warmup_tokens(self) -> int:
        return self.warmup.tokens if self.warmup is not None else 0


@dataclass(frozen=True)
class SwitchSolution:
    """First token at which the LR has fallen to ``target_lr``."""

    token_index: int
    achieved_lr: float
    target_lr: float


def build_cosine(
    eta_start: float,
    eta_end: float,
    total_tokens: int | float,
    warmup: WarmupSpec | None = None,
) -> LrSchedule:
    """Cosine annealing from ``eta_start`` down to ``eta_end``."""
    if eta_end < 0 or eta_start <= eta_end:
        raise InvalidParameterError("require eta_start > eta_end >= 0")
    if total_tokens <= 0:
        raise InvalidParameterError("total_tokens must be positive")
    return LrSchedule(COSINE, float(eta_start), float(eta_end), int(total_tokens), warmup)


def build_wsd(
    eta_start: float,
    eta_end: float,
    total_tokens: int | float,
    stable_fraction: float = 0.8,
    decay_shape: str = "linear",
) -> LrSchedule:
    """Constant plateau followed by a decay tail (warmup-stable-decay)."""
    if eta_end < 0 or eta_start <= eta_end:
        raise InvalidParameterError("require eta_start > eta_end >= 0")
    if total_tokens <= 0:
        raise InvalidParameterError("total_tokens must be positive")
    return LrSchedule(
        WSD,
        float(eta_start),
        float(eta_end),
        int(total_tokens),
        wsd_stable_fraction=float(stable_fraction),
        wsd_decay_shape=decay_shape,
    )


def lr_at(schedule: LrSchedule, token: int | float) -> float:
    """Evaluate the schedule at a token index in ``[0, total_tokens]``."""
    if token < 0 or token > schedule.total_tokens:
        raise OutOfRangeError(
            f"token {token} outside [0, {schedule.total_tokens}]"
        )
    w = schedule.warmup_tokens
    if schedule.warmup is not None and token <= w:
        if token == w:
            return schedule.eta_start
        ramp = schedule.warmup
        return ramp.start_lr + (ramp.target_lr - ramp.start_lr) * (token / ramp.tokens)
    horizon = schedule.total_tokens - w
    t = token - w
    if schedule.kind == COSINE:
        return _cosine_value(schedule.eta_start, schedule.eta_end, t, horizon)
    return _wsd_value(schedule, t, horizon)


def _cosine_value(eta_start: float, eta_end: float, t: float, horizon: float) -> float:
    if t <= 0:
        return eta_start
    if t >= horizon:
        return eta_end
    return eta_end + 0.5 * (eta_start - eta_end) * (1.0 + math.cos(math.pi * t / horizon))


def _wsd_value(schedule: LrSchedule, t: float, horizon: float) -> float:
    plateau = schedule.wsd_stable_fraction * horizon
    if t <= plateau:
        return schedule.eta_start
    if t >= horizon:
        return schedule.eta_end
    if schedule.wsd_decay_shape == "linear":
        frac = (t - plateau) / (horizon - plateau)
        return schedule.eta_start + (schedule.eta_end - schedule.eta_start) * frac
    return _cosine_value(schedule.eta_start, schedule.eta_end, t - plateau, horizon - plateau)


def solve_switch_token(schedule: LrSchedule, lr_fraction: float) -> SwitchSolution:
    """Smallest token at which ``lr_at`` is <= ``lr_fraction * eta_start``.

    The search covers the decay region ``[warmup_end, total_tokens]``; within
    it the LR is non-increasing, so the answer is well defined down to
    one-token resolution.
    """
    if not 0 < lr_fraction <= 1:
        raise InvalidParameterError("lr_fraction must lie in (0, 1]")
    target = lr_fraction * schedule.eta_start
    # Snap targets within float noise of eta_end onto it (e.g. a fraction of
    # 1/100 against eta_end = eta_start / 100 must land on the horizon, not a
    # few hundred tokens early).
    if target < schedule.eta_end * (1.0 - 1e-9):
        raise UnreachableTargetError(
            f"target LR {target:.6g} lies below the schedule minimum "
            f"{schedule.eta_end:.6g}"
        )
    if target <= schedule.eta_end * (1.0 + 1e-9):
        # The exact decay curve only attains eta_end at the horizon; resolve
        # there rather than inside the float-rounding plateau that precedes it.
        return SwitchSolution(
            token_index=schedule.total_tokens,
            achieved_lr=schedule.eta_end,
            target_lr=schedule.eta_end,
        )

    lo = schedule.warmup_tokens
    hi = schedule.total_tokens
    token = None
    if schedule.kind == COSINE and target < schedule.eta_start:
        token = lo + _invert_cosine(
            schedule.eta_start, schedule.eta_end, target, hi - lo
        )
        token = min(max(token, lo), hi)
        if not _crossing_ok(schedule, token, target, lo):
            token = None  # fall back to bisection
    if token is None:
        token = _bisect_crossing(schedule, target, lo, hi)
    return SwitchSolution(token_index=token, achieved_lr=lr_at(schedule, token), target_lr=target)


def _invert_cosine(eta_start: float, eta_end: float, target: float, horizon: int) -> int:
    ratio = 2.0 * (target - eta_end) / (eta_start - eta_end) - 1.0
    ratio = min(1.0, max(-1.0, ratio))
    return math.ceil(horizon * math.acos(ratio) / math.pi)


def _crossing_ok(schedule: LrSchedule, token: int, target: float, lo: int) -> bool:
    if lr_at(schedule, token) > target:
        return False
    return token == lo or lr_at(schedule, token - 1) > target


def _bisect_crossing(schedule: LrSchedule, target: float, lo: int, hi: int) -> int:
    if lr_at(schedule, lo) <= target:
        return lo
    # invariant: lr(lo) > target >= lr(hi)
    lo, hi = int(lo), int(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if lr_at(schedule, mid) <= target:
            hi = mid
        else:
            lo = mid
    return hi


def extended_pretrain_lr(
    pretrain: LrSchedule, extended_total: int | float, at_token: int | float
) -> float:
    """LR the pretraining cosine would have had over a longer horizon.

    Rebuilds ``pretrain`` with the same endpoints (and warmup, if any) but a
    horizon of ``extended_total`` tokens, then evaluates at ``at_token``.
    Used to pick the warmup target that matches where an extended pretraining
    run would have been when continued training begins.
    """
    if pretrain.kind != COSINE:
        raise InvalidParameterError("extended evaluation requires a cosine schedule")
    if at_token > extended_total:
        raise OutOfRangeError(f"token {at_token} beyond extended horizon {extended_total}")
    extended = LrSchedule(
        COSINE,
        pretrain.eta_start,
        pretrain.eta_end,
        int(extended_total),
        pretrain.warmup,
    )
    return lr_at(extended, at_token)


def sample_curve(schedule: LrSchedule, stride: int) -> list[tuple[int, float]]:
    """(token, lr) samples every ``stride`` tokens, always including the end."""
    if stride <= 0:
        raise InvalidParameterError("stride must be positive")
    points = [(t, lr_at(schedule, t)) for t in range(0, schedule.total_tokens, stride)]
    points.append((schedule.total_tokens, lr_at(schedule, schedule.total_tokens)))
    return points
