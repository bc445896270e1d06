"""Population partition, design constants, and derived allocation algebra.

The overall population is partitioned into ``k`` disjoint subpopulations with
known prevalences.  Everything downstream (selection rules, estimators, the
simulator) works with aggregates over index sets: combined prevalences,
prevalence-weighted effects, per-cell patient counts, and the variances of
mean differences implied by those counts.

Counts are always the *realized* integers produced by :func:`allocate`, never
the possibly fractional nominal products ``n * p``.  Variances and stage
ratios computed from realized counts keep the conditional estimators exact
for the data actually generated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import (
    EmptyCell,
    EmptyTarget,
    InfeasibleAllocation,
    MissingScenario,
    ShapeError,
)

if TYPE_CHECKING:  # only for annotations; rules.py imports this module
    from .rules import RuleConfig

PREVALENCE_SUM_TOL = 1e-12


@dataclass(frozen=True, order=True)
class IndexSet:
    """An immutable, sorted set of subpopulation indices (1-based).

    May be empty, which denotes a futility stop when used as a selection
    outcome.
    """

    members: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        m = tuple(int(i) for i in self.members)
        if any(i < 1 for i in m):
            raise ShapeError(f"subpopulation indices must be >= 1, got {m}")
        if any(b <= a for a, b in zip(m, m[1:])):
            raise ShapeError(f"indices must be strictly increasing, got {m}")
        object.__setattr__(self, "members", m)

    @classmethod
    def of(cls, *indices: int) -> "IndexSet":
        return cls(tuple(sorted(set(int(i) for i in indices))))

    @classmethod
    def full(cls, k: int) -> "IndexSet":
        return cls(tuple(range(1, k + 1)))

    @classmethod
    def empty(cls) -> "IndexSet":
        return cls(())

    @property
    def is_empty(self) -> bool:
        return not self.members

    def complement(self, k: int) -> "IndexSet":
        return IndexSet(tuple(i for i in range(1, k + 1) if i not in self.members))

    def issubset(self, other: "IndexSet") -> bool:
        return set(self.members) <= set(other.members)

    def validate_range(self, k: int) -> None:
        if self.members and self.members[-1] > k:
            raise ShapeError(f"index {self.members[-1]} out of range for k={k}")

    def label(self, k: Optional[int] = None) -> str:
        """Human-readable tag: 'F' for the full set, 'stop' when empty."""
        if self.is_empty:
            return "stop"
        if k is not None and len(self.members) == k:
            return "F"
        return "+".join(str(i) for i in self.members)

    def __contains__(self, i: int) -> bool:
        return i in self.members

    def __iter__(self) -> Iterator[int]:
        return iter(self.members)

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class PopulationSpec:
    """Subpopulation count, prevalences, and (for scenarios) true effects.

    ``effects`` is absent for real-data estimation; operations needing it
    raise :class:`MissingScenario`.
    """

    k: int
    prevalences: tuple[float, ...]
    effects: Optional[tuple[float, ...]] = None

    def __post_init__(self) -> None:
        k = int(self.k)
        p = tuple(float(x) for x in self.prevalences)
        if k < 1:
            raise ShapeError(f"k must be positive, got {k}")
        if len(p) != k:
            raise ShapeError(f"expected {k} prevalences, got {len(p)}")
        if any(not (0.0 < x < 1.0) for x in p):
            raise ShapeError(f"prevalences must lie strictly in (0, 1), got {p}")
        if abs(math.fsum(p) - 1.0) > PREVALENCE_SUM_TOL:
            # refuse to renormalize: a bad sum is a config bug, not noise
            raise ShapeError(
                f"prevalences sum to {math.fsum(p)!r}, not 1 within {PREVALENCE_SUM_TOL}"
            )
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "prevalences", p)
        if self.effects is not None:
            eff = tuple(float(x) for x in self.effects)
            if len(eff) != k:
                raise ShapeError(f"expected {k} effects, got {len(eff)}")
            if any(not math.isfinite(x) for x in eff):
                raise ShapeError("effects must be finite")
            object.__setattr__(self, "effects", eff)

    def prevalence_array(self) -> np.ndarray:
        return np.asarray(self.prevalences, dtype=float)


@dataclass(frozen=True)
class DesignSpec:
    """Fixed stage sizes, the outcome variance (when known), and the rule.

    ``sigma2 is None`` declares the unknown-variance mode, in which the
    plug-in conditional estimator replaces the exact one.  ``n1`` and ``n2``
    are fixed before any data are seen; there is no data-dependent resizing.
    """

    n1: int
    n2: int
    sigma2: Optional[float] = None
    rule: Optional["RuleConfig"] = None

    def __post_init__(self) -> None:
        n1, n2 = int(self.n1), int(self.n2)
        if n1 < 2 or n2 < 2:
            raise ShapeError(f"stage sizes must be >= 2, got n1={n1}, n2={n2}")
        object.__setattr__(self, "n1", n1)
        object.__setattr__(self, "n2", n2)
        if self.sigma2 is not None:
            s2 = float(self.sigma2)
            if not (s2 > 0.0) or not math.isfinite(s2):
                raise ShapeError(f"sigma2 must be a positive finite number, got {s2}")
            object.__setattr__(self, "sigma2", s2)

    @property
    def delta_star(self) -> Optional[float]:
        return None if self.rule is None else self.rule.delta_star

    @property
    def sigma_known(self) -> bool:
        return self.sigma2 is not None


@dataclass(frozen=True)
class AllocationTable:
    """Realized patient counts per (subpopulation, stage, arm) cell.

    ``counts[m-1, j-1, a]`` is the number of patients from subpopulation m
    enrolled in stage j and randomized to arm a (0 control, 1 treatment).
    The array is read-only; tables are safe to share across workers.
    """

    counts: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 3 or c.shape[1] != 2 or c.shape[2] != 2:
            raise ShapeError(f"counts must have shape (k, 2, 2), got {c.shape}")
        if (c < 0).any():
            raise ShapeError("counts must be non-negative")
        c = c.copy()
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    def count(
        self,
        I: Optional[IndexSet] = None,
        stage: Optional[int] = None,
        arm: Optional[int] = None,
    ) -> int:
        """Total patients in subpopulations I (default: all), optionally
        restricted to one stage and/or one arm."""
        sub = self.counts
        if I is not None:
            I.validate_range(self.k)
            sub = sub[[m - 1 for m in I], :, :]
        if stage is not None:
            if stage not in (1, 2):
                raise ShapeError(f"stage must be 1 or 2, got {stage}")
            sub = sub[:, stage - 1 : stage, :]
        if arm is not None:
            if arm not in (0, 1):
                raise ShapeError(f"arm must be 0 or 1, got {arm}")
            sub = sub[..., arm : arm + 1]
        return int(sub.sum())

    def enrolled_stage2(self) -> IndexSet:
        return IndexSet(
            tuple(m for m in range(1, self.k + 1) if self.counts[m - 1, 1, :].sum() > 0)
        )


def largest_remainder(weights: Sequence[float], total: int) -> np.ndarray:
    """Apportion ``total`` integer units proportionally to ``weights``.

    Floors the exact quotas and hands the leftover units to the largest
    fractional remainders, ties broken by lower index.  Deterministic and
    exactly conserving: the result always sums to ``total``.
    """
    w = np.asarray(weights, dtype=float)
    if (w < 0).any() or w.sum() <= 0:
        raise ShapeError("weights must be non-negative with a positive sum")
    quota = total * w / w.sum()
    base = np.floor(quota).astype(np.int64)
    leftover = int(total - base.sum())
    if leftover:
        frac = quota - base
        order = np.lexsort((np.arange(len(w)), -frac))
        base[order[:leftover]] += 1
    return base


def _split_arms(total: int) -> tuple[int, int]:
    # odd cells: treatment receives the extra patient
    treat = (total + 1) // 2
    return total - treat, treat  # (control, treatment)


def combined_prevalence(spec: PopulationSpec, I: IndexSet) -> float:
    """Prevalence of the combined subpopulation indexed by I."""
    if I.is_empty:
        raise EmptyTarget("combined prevalence of the empty set is undefined")
    I.validate_range(spec.k)
    return float(math.fsum(spec.prevalences[m - 1] for m in I))


def aggregate_effect(spec: PopulationSpec, I: IndexSet) -> float:
    """Prevalence-weighted true treatment effect of the combined subpopulation."""
    if spec.effects is None:
        raise MissingScenario("population carries no true effects")
    if I.is_empty:
        raise EmptyTarget("aggregate effect of the empty set is undefined")
    I.validate_range(spec.k)
    num = math.fsum(spec.prevalences[m - 1] * spec.effects[m - 1] for m in I)
    return num / combined_prevalence(spec, I)


def allocate(spec: PopulationSpec, design: DesignSpec, E: IndexSet) -> AllocationTable:
    """Realized per-cell counts for stage 1 and, given selection E, stage 2.

    Stage-1 subpopulation totals follow largest-remainder rounding of
    ``n1 * p_m``; stage-2 totals follow largest-remainder rounding of
    ``n2 * p_m / p_E`` over the selected subpopulations.  Within each cell,
    arms split as evenly as possible (treatment gets any odd patient).

    Raises :class:`InfeasibleAllocation` if any enrolled cell ends up with an
    empty arm.
    """
    E.validate_range(spec.k)
    if design.n1 < 2 * spec.k:
        raise InfeasibleAllocation(
            f"n1={design.n1} cannot fill both arms of {spec.k} subpopulations"
        )
    counts = np.zeros((spec.k, 2, 2), dtype=np.int64)
    stage1 = largest_remainder(spec.prevalences, design.n1)
    for m in range(spec.k):
        ctrl, treat = _split_arms(int(stage1[m]))
        counts[m, 0, 0] = ctrl
        counts[m, 0, 1] = treat
    if not E.is_empty:
        sel = [m - 1 for m in E]
        stage2 = largest_remainder([spec.prevalences[i] for i in sel], design.n2)
        for i, m in enumerate(sel):
            ctrl, treat = _split_arms(int(stage2[i]))
            counts[m, 1, 0] = ctrl
            counts[m, 1, 1] = treat
    enrolled = counts.sum(axis=2) > 0
    bad = enrolled & ((counts[:, :, 0] == 0) | (counts[:, :, 1] == 0))
    if bad.any():
        m, j = np.argwhere(bad)[0]
        raise InfeasibleAllocation(
            f"subpopulation {m + 1}, stage {j + 1} has an empty arm under this design"
        )
    return AllocationTable(counts)


def mean_diff_variance(
    counts: AllocationTable,
    sigma2: float,
    I: IndexSet,
    stage: Optional[int] = None,
) -> float:
    """Variance of the (stage-wise or pooled) mean difference over S_I.

    Equals ``4 * sigma2 / n`` where n is the realized patient count in scope.
    """
    if I.is_empty:
        raise EmptyTarget("variance over the empty set is undefined")
    n = counts.count(I, stage=stage)
    if n == 0:
        raise EmptyCell(f"no patients in scope (I={I.members}, stage={stage})")
    return 4.0 * float(sigma2) / n


def stage_ratio(spec: PopulationSpec, design: DesignSpec, E: IndexSet) -> float:
    """Nominal stage-1 to stage-2 sample-size ratio for the selected scope.

    ``r_E = n1 * p_E / n2``.  The same value applies to any sub-target of E
    because stage-2 enrolment is proportional within E.
    """
    if E.is_empty:
        raise EmptyTarget("stage ratio of the empty selection is undefined")
    return design.n1 * combined_prevalence(spec, E) / design.n2
