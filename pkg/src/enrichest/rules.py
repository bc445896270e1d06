"""Interim subpopulation selection rules and their induced interval bounds.

A selection rule maps the vector of stage-1 per-subpopulation mean
differences to a selected index set E (possibly empty, meaning a futility
stop).  The rules handled here share one structural property: holding the
unselected subpopulations' stage-1 means fixed, the event "E was selected"
is an interval (L, U) in the selected aggregate's stage-1 mean.  Those
bounds are exactly what the conditional estimators in
:mod:`enrichest.estimators` consume.

Three rules ship built in:

``D1``
    Two subpopulations.  Continue with the full population if its stage-1
    mean difference exceeds the threshold; otherwise enrich to the better
    subpopulation if it exceeds the threshold; otherwise stop.

``D2``
    Ordered subpopulations (effects assumed monotone non-increasing by the
    trial team; never checked on data).  Select the largest prefix whose
    aggregate stage-1 mean difference reaches the threshold; stop if none
    does.  The upper bound is a minimum over partial-sum terms.

``D3``
    Pick the winner: select the single subpopulation with the largest
    stage-1 mean difference.  Never stops.

Custom rules can be registered by rule id; registration runs a randomized
membership check that perturbs the selected aggregate inside and outside
the claimed interval and verifies the selection is invariant / changes.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    EmptyTarget,
    InvalidInterval,
    NotIntervalRepresentable,
    RuleConsistencyError,
    ShapeError,
    TargetError,
)
from .population import IndexSet, PopulationSpec


@dataclass(frozen=True)
class ExtendedInterval:
    """An open interval on the extended real line; NaN endpoints are rejected."""

    lower: float
    upper: float

    def __post_init__(self) -> None:
        lo, hi = float(self.lower), float(self.upper)
        if math.isnan(lo) or math.isnan(hi):
            raise InvalidInterval("interval endpoints must not be NaN")
        if not lo < hi:
            raise InvalidInterval(f"lower bound {lo} must be below upper bound {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unbounded(cls) -> "ExtendedInterval":
        return cls(-math.inf, math.inf)

    def contains(self, x: float) -> bool:
        return self.lower < x < self.upper

    @property
    def is_unbounded(self) -> bool:
        return math.isinf(self.lower) and math.isinf(self.upper)


@dataclass(frozen=True)
class Stage1Summary:
    """Stage-1 per-subpopulation mean differences (and optionally counts)."""

    x1: tuple[float, ...]
    counts: Optional[tuple[int, ...]] = None

    def __post_init__(self) -> None:
        x = tuple(float(v) for v in self.x1)
        if any(not math.isfinite(v) for v in x):
            raise ShapeError("stage-1 mean differences must be finite")
        object.__setattr__(self, "x1", x)
        if self.counts is not None:
            c = tuple(int(v) for v in self.counts)
            if len(c) != len(x):
                raise ShapeError("counts length must match x1")
            if any(v <= 0 for v in c):
                raise ShapeError("stage-1 counts must be positive")
            object.__setattr__(self, "counts", c)

    @property
    def k(self) -> int:
        return len(self.x1)

    def aggregate(self, spec: PopulationSpec, I: IndexSet) -> float:
        """Prevalence-weighted aggregate of the stage-1 mean differences."""
        if I.is_empty:
            raise EmptyTarget("aggregate of the empty set is undefined")
        if self.k != spec.k:
            raise ShapeError(f"summary has k={self.k}, population has k={spec.k}")
        I.validate_range(spec.k)
        p = spec.prevalences
        num = math.fsum(p[m - 1] * self.x1[m - 1] for m in I)
        den = math.fsum(p[m - 1] for m in I)
        return num / den


@dataclass(frozen=True)
class RuleConfig:
    """Identifies a selection rule and its threshold.

    ``delta_star`` is required by D1 and D2 and ignored by D3.
    ``monotone_effects_assumed`` documents the D2 modeling assumption; it is
    never checked against data.
    """

    kind: str
    delta_star: Optional[float] = None
    monotone_effects_assumed: bool = False

    def __post_init__(self) -> None:
        if self.delta_star is not None:
            d = float(self.delta_star)
            if not math.isfinite(d):
                raise ShapeError(f"delta_star must be finite, got {d}")
            object.__setattr__(self, "delta_star", d)


@dataclass(frozen=True)
class SelectionOutcome:
    """Realized selection: the index set E, its interval bounds, and the rule id.

    ``bounds`` is absent exactly when E is empty (futility stop).
    """

    selected: IndexSet
    bounds: Optional[ExtendedInterval]
    rule_id: str

    def __post_init__(self) -> None:
        if self.selected.is_empty and self.bounds is not None:
            raise ShapeError("a futility stop carries no bounds")
        if not self.selected.is_empty and self.bounds is None:
            raise ShapeError("a non-empty selection requires bounds")

    @property
    def stopped(self) -> bool:
        return self.selected.is_empty


class SelectionRule(ABC):
    """Contract every rule must satisfy.

    ``select_arrays`` is the single source of truth: it maps a matrix of
    stage-1 mean vectors to outcome codes (indices into ``outcomes``) plus
    the interval bounds for the realized selection.  ``select`` wraps it for
    one observation.  ``bounds_for_target`` produces the interval in a
    sub-target's stage-1 aggregate implied by the same selection event, or
    raises :class:`NotIntervalRepresentable` when no such interval exists.
    """

    rule_id: str = "?"

    @abstractmethod
    def outcomes(self, spec: PopulationSpec) -> tuple[IndexSet, ...]:
        """All achievable selection outcomes, in a stable order."""

    @abstractmethod
    def select_arrays(
        self, spec: PopulationSpec, x1: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized selection.

        ``x1`` has shape (n, k).  Returns ``(codes, lower, upper)`` where
        codes index into :meth:`outcomes` and the bounds are NaN for rows
        that stopped.
        """

    @abstractmethod
    def bounds_for_target(
        self,
        spec: PopulationSpec,
        s1: Stage1Summary,
        outcome: SelectionOutcome,
        target: IndexSet,
    ) -> ExtendedInterval:
        """Interval in the target's stage-1 aggregate induced by the selection."""

    def select(self, spec: PopulationSpec, s1: Stage1Summary) -> SelectionOutcome:
        if s1.k != spec.k:
            raise ShapeError(f"summary has k={s1.k}, population has k={spec.k}")
        x = np.asarray(s1.x1, dtype=float).reshape(1, -1)
        codes, lo, hi = self.select_arrays(spec, x)
        chosen = self.outcomes(spec)[int(codes[0])]
        if chosen.is_empty:
            return SelectionOutcome(chosen, None, self.rule_id)
        return SelectionOutcome(
            chosen, ExtendedInterval(float(lo[0]), float(hi[0])), self.rule_id
        )

    def _check_target(self, outcome: SelectionOutcome, target: IndexSet) -> None:
        if target.is_empty:
            raise EmptyTarget("estimation target must be non-empty")
        if outcome.stopped:
            raise TargetError("no targets are estimable after a futility stop")
        if not target.issubset(outcome.selected):
            raise TargetError(
                f"target {target.members} is not contained in the selected set "
                f"{outcome.selected.members}"
            )


class D1Rule(SelectionRule):
    """Threshold rule for two subpopulations: full population first, then the
    better half, then stop."""

    rule_id = "D1"

    def __init__(self, delta_star: float) -> None:
        if delta_star is None or not math.isfinite(float(delta_star)):
            raise ShapeError("D1 requires a finite delta_star")
        self.delta_star = float(delta_star)

    def outcomes(self, spec: PopulationSpec) -> tuple[IndexSet, ...]:
        self._require_two(spec)
        return (IndexSet.full(2), IndexSet.of(1), IndexSet.of(2), IndexSet.empty())

    @staticmethod
    def _require_two(spec: PopulationSpec) -> None:
        if spec.k != 2:
            raise ShapeError(f"D1 is defined for exactly two subpopulations, k={spec.k}")

    def select_arrays(
        self, spec: PopulationSpec, x1: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        self._require_two(spec)
        x1 = np.atleast_2d(np.asarray(x1, dtype=float))
        p1, p2 = spec.prevalences
        d = self.delta_star
        xf = x1 @ np.array([p1, p2])
        best = np.argmax(x1, axis=1)  # ties go to the lower index
        top = np.take_along_axis(x1, best[:, None], axis=1)[:, 0]
        codes = np.full(x1.shape[0], 3, dtype=np.int64)
        lo = np.full(x1.shape[0], np.nan)
        hi = np.full(x1.shape[0], np.nan)

        cont = xf > d
        codes[cont] = 0
        lo[cont] = d
        hi[cont] = np.inf

        enrich = ~cont & (top > d)
        codes[enrich] = best[enrich] + 1
        lo[enrich] = d
        # upper bound from the full-population constraint, expressed in the
        # selected subpopulation's own mean
        other = 1 - best
        p = np.array([p1, p2])
        x_other = np.take_along_axis(x1, other[:, None], axis=1)[:, 0]
        hi[enrich] = (d - p[other[enrich]] * x_other[enrich]) / p[best[enrich]]
        return codes, lo, hi

    def bounds_for_target(
        self,
        spec: PopulationSpec,
        s1: Stage1Summary,
        outcome: SelectionOutcome,
        target: IndexSet,
    ) -> ExtendedInterval:
        self._require_two(spec)
        self._check_target(outcome, target)
        p = spec.prevalences
        d = self.delta_star
        E = outcome.selected
        if len(E) == 2:
            # selection event: prevalence-weighted mean over both exceeds d;
            # linear with positive weight in any target aggregate
            fixed = math.fsum(p[m - 1] * s1.x1[m - 1] for m in range(1, 3) if m not in target)
            p_t = math.fsum(p[m - 1] for m in target)
            return ExtendedInterval((d - fixed) / p_t, math.inf)
        # enrichment: target must equal the singleton selection
        (w,) = E.members
        o = 3 - w
        return ExtendedInterval(d, (d - p[o - 1] * s1.x1[o - 1]) / p[w - 1])


def d2_upper_bound(
    spec: PopulationSpec,
    delta_star: float,
    m: int,
    x_complement: Sequence[float],
) -> float:
    """Upper bound on the selected prefix aggregate under the ordered rule.

    ``x_complement`` holds the stage-1 mean differences for subpopulations
    m+1 .. k.  The bound is the smallest of the partial-sum terms that keep
    every longer prefix's aggregate below the threshold; it is +inf when the
    full population was selected (empty minimum).
    """
    k = spec.k
    if not 1 <= m <= k:
        raise ShapeError(f"prefix size m={m} out of range 1..{k}")
    if len(x_complement) != k - m:
        raise ShapeError(f"expected {k - m} complement means, got {len(x_complement)}")
    if m == k:
        return math.inf
    p = spec.prevalences
    p_prefix = math.fsum(p[:m])
    best = math.inf
    tail_sum = 0.0
    cum_p = p_prefix
    for j, x in enumerate(x_complement):
        i = m + 1 + j  # 1-based index of this subpopulation
        cum_p += p[i - 1]
        tail_sum += p[i - 1] * float(x)
        best = min(best, (cum_p * float(delta_star) - tail_sum) / p_prefix)
    return best


class D2Rule(SelectionRule):
    """Ordered prefix rule: select the largest leading group whose aggregate
    stage-1 mean difference reaches the threshold."""

    rule_id = "D2"

    def __init__(self, delta_star: float) -> None:
        if delta_star is None or not math.isfinite(float(delta_star)):
            raise ShapeError("D2 requires a finite delta_star")
        self.delta_star = float(delta_star)

    def outcomes(self, spec: PopulationSpec) -> tuple[IndexSet, ...]:
        if spec.k < 2:
            raise ShapeError("D2 requires at least two subpopulations")
        prefixes = tuple(IndexSet.full(m) for m in range(1, spec.k + 1))
        return (*prefixes, IndexSet.empty())

    def select_arrays(
        self, spec: PopulationSpec, x1: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if spec.k < 2:
            raise ShapeError("D2 requires at least two subpopulations")
        x1 = np.atleast_2d(np.asarray(x1, dtype=float))
        k = spec.k
        p = spec.prevalence_array()
        P = np.cumsum(p)
        cw = np.cumsum(x1 * p, axis=1)
        prefix_mean = cw / P
        hit = prefix_mean >= self.delta_star
        any_hit = hit.any(axis=1)
        # largest prefix meeting the threshold
        largest = k - 1 - np.argmax(hit[:, ::-1], axis=1)
        codes = np.where(any_hit, largest, k).astype(np.int64)
        lo = np.full(x1.shape[0], np.nan)
        hi = np.full(x1.shape[0], np.nan)
        lo[any_hit] = self.delta_star
        for mi in range(k):  # 0-based prefix end
            rows = np.flatnonzero(codes == mi)
            if rows.size == 0:
                continue
            if mi == k - 1:
                hi[rows] = np.inf
                continue
            # one term per longer prefix: its aggregate must stay below the
            # threshold, which caps the selected aggregate from above
            tail = cw[rows][:, mi + 1 :] - cw[rows][:, mi : mi + 1]
            terms = (P[mi + 1 :] * self.delta_star - tail) / P[mi]
            hi[rows] = terms.min(axis=1)
        return codes, lo, hi

    def bounds_for_target(
        self,
        spec: PopulationSpec,
        s1: Stage1Summary,
        outcome: SelectionOutcome,
        target: IndexSet,
    ) -> ExtendedInterval:
        self._check_target(outcome, target)
        k = spec.k
        p = spec.prevalences
        d = self.delta_star
        m = len(outcome.selected)  # selected set is the prefix [1..m]
        p_t = math.fsum(p[i - 1] for i in target)
        fixed = math.fsum(p[i - 1] * s1.x1[i - 1] for i in range(1, m + 1) if i not in target)
        P_prefix = math.fsum(p[:m])
        low = (P_prefix * d - fixed) / p_t
        if m == k:
            return ExtendedInterval(low, math.inf)
        high = math.inf
        cum_p = P_prefix
        tail = 0.0
        for i in range(m + 1, k + 1):
            cum_p += p[i - 1]
            tail += p[i - 1] * s1.x1[i - 1]
            high = min(high, (cum_p * d - fixed - tail) / p_t)
        return ExtendedInterval(low, high)


class D3Rule(SelectionRule):
    """Pick the winner: the subpopulation with the largest stage-1 mean
    difference continues alone.  Ties go to the lowest index."""

    rule_id = "D3"

    def outcomes(self, spec: PopulationSpec) -> tuple[IndexSet, ...]:
        if spec.k < 2:
            raise ShapeError("D3 requires at least two subpopulations")
        return tuple(IndexSet.of(m) for m in range(1, spec.k + 1))

    def select_arrays(
        self, spec: PopulationSpec, x1: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if spec.k < 2:
            raise ShapeError("D3 requires at least two subpopulations")
        x1 = np.atleast_2d(np.asarray(x1, dtype=float))
        codes = np.argmax(x1, axis=1).astype(np.int64)
        masked = x1.copy()
        masked[np.arange(x1.shape[0]), codes] = -np.inf
        lo = masked.max(axis=1)
        hi = np.full(x1.shape[0], np.inf)
        return codes, lo, hi

    def bounds_for_target(
        self,
        spec: PopulationSpec,
        s1: Stage1Summary,
        outcome: SelectionOutcome,
        target: IndexSet,
    ) -> ExtendedInterval:
        self._check_target(outcome, target)
        (w,) = outcome.selected.members
        low = max(s1.x1[i - 1] for i in range(1, spec.k + 1) if i != w)
        return ExtendedInterval(low, math.inf)


# --------------------------------------------------------------------------
# registry
# --------------------------------------------------------------------------

RuleFactory = Callable[[RuleConfig], SelectionRule]

_BUILTINS: dict[str, RuleFactory] = {
    "D1": lambda cfg: D1Rule(cfg.delta_star),
    "D2": lambda cfg: D2Rule(cfg.delta_star),
    "D3": lambda cfg: D3Rule(),
}

_REGISTRY: dict[str, RuleFactory] = dict(_BUILTINS)


def get_rule(cfg: RuleConfig) -> SelectionRule:
    try:
        factory = _REGISTRY[cfg.kind]
    except KeyError:
        raise ShapeError(
            f"unknown rule {cfg.kind!r}; registered rules: {sorted(_REGISTRY)}"
        ) from None
    return factory(cfg)


def register_rule(
    rule_id: str,
    factory: RuleFactory,
    *,
    validate_cfg: Optional[RuleConfig] = None,
    validate_spec: Optional[PopulationSpec] = None,
    draws: int = 2000,
    seed: int = 0,
    skip_validation: bool = False,
) -> None:
    """Register a user-defined rule under ``rule_id``.

    Unless ``skip_validation`` is set, a representative config and population
    must be supplied and the rule is put through the randomized
    interval-consistency check before it is accepted.
    """
    if rule_id in _BUILTINS:
        raise ShapeError(f"cannot replace built-in rule {rule_id!r}")
    if not skip_validation:
        if validate_cfg is None or validate_spec is None:
            raise ShapeError(
                "registration requires validate_cfg and validate_spec "
                "(or an explicit skip_validation=True)"
            )
        check_partition_consistency(factory(validate_cfg), validate_spec, draws=draws, seed=seed)
    _REGISTRY[rule_id] = factory


def unregister_rule(rule_id: str) -> None:
    if rule_id in _BUILTINS:
        raise ShapeError(f"cannot remove built-in rule {rule_id!r}")
    _REGISTRY.pop(rule_id, None)


# --------------------------------------------------------------------------
# module-level operations
# --------------------------------------------------------------------------


def apply_rule(cfg: RuleConfig, spec: PopulationSpec, s1: Stage1Summary) -> SelectionOutcome:
    """Apply the configured rule to stage-1 data, returning the selection
    with its interval bounds."""
    return get_rule(cfg).select(spec, s1)


def bounds_for_target(
    cfg: RuleConfig,
    spec: PopulationSpec,
    outcome: SelectionOutcome,
    target: IndexSet,
    s1: Stage1Summary,
) -> ExtendedInterval:
    """Interval bounds on the target's stage-1 aggregate induced by the
    realized selection, holding all other stage-1 means fixed."""
    return get_rule(cfg).bounds_for_target(spec, s1, outcome, target)


def check_partition_consistency(
    rule: SelectionRule,
    spec: PopulationSpec,
    *,
    draws: int = 2000,
    seed: int = 0,
    scale: float = 1.0,
    center: float = 0.0,
) -> dict:
    """Randomized membership check of the interval representation.

    For each random stage-1 vector: the selected aggregate must lie strictly
    inside the claimed (L, U); moving it to another point inside (holding
    the unselected means fixed) must not change the selection; moving it
    outside must.  Raises :class:`RuleConsistencyError` on any violation.
    """
    rng = np.random.default_rng(seed)
    k = spec.k
    p = spec.prevalence_array()
    x = rng.normal(center, scale, size=(draws, k))
    outs = rule.outcomes(spec)
    codes, lo, hi = rule.select_arrays(spec, x)
    if codes.min() < 0 or codes.max() >= len(outs):
        raise RuleConsistencyError("select_arrays returned an out-of-range outcome code")

    stats = {"draws": draws, "non_stop": 0, "outcome_counts": {}}
    for code, out in enumerate(outs):
        rows = np.flatnonzero(codes == code)
        stats["outcome_counts"][out.label(k)] = int(rows.size)
        if out.is_empty or rows.size == 0:
            continue
        stats["non_stop"] += int(rows.size)
        idx = np.array([m - 1 for m in out])
        p_sel = p[idx].sum()
        agg = x[rows][:, idx] @ p[idx] / p_sel
        L, U = lo[rows], hi[rows]
        if not np.all((L < agg) & (agg < U)):
            raise RuleConsistencyError(
                f"outcome {out.members}: observed aggregate outside claimed bounds"
            )
        # inside perturbation: selection must be invariant
        win_lo = np.maximum(np.where(np.isfinite(L), L, -np.inf), agg - 6 * scale)
        win_hi = np.minimum(np.where(np.isfinite(U), U, np.inf), agg + 6 * scale)
        t_in = win_lo + (0.001 + 0.998 * rng.random(rows.size)) * (win_hi - win_lo)
        x_in = x[rows].copy()
        x_in[:, idx] += (t_in - agg)[:, None]
        codes_in, _, _ = rule.select_arrays(spec, x_in)
        if not np.all(codes_in == code):
            raise RuleConsistencyError(
                f"outcome {out.members}: selection changed inside the claimed interval"
            )
        # outside perturbation: selection must change
        eps = scale * (0.01 + 1.99 * rng.random(rows.size))
        t_out = np.where(np.isfinite(L), L - eps, np.where(np.isfinite(U), U + eps, np.nan))
        usable = ~np.isnan(t_out)
        if usable.any():
            x_out = x[rows][usable].copy()
            x_out[:, idx] += (t_out[usable] - agg[usable])[:, None]
            codes_out, _, _ = rule.select_arrays(spec, x_out)
            if not np.all(codes_out != code):
                raise RuleConsistencyError(
                    f"outcome {out.members}: selection survived outside the claimed interval"
                )
    return stats
