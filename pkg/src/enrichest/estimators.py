"""Point estimators for the selected subpopulation's treatment effect.

Three estimators are provided:

* the pooled two-stage sample mean difference (the MLE, biased under
  data-dependent selection);
* the conditionally unbiased estimator, which shifts the MLE by a
  truncated-normal correction determined by the selection interval, the
  pooled standard deviation, and the stage-size ratio;
* the plug-in conditional estimator, identical except that the outcome
  variance is replaced by the pooled within-cell estimate when it is
  unknown.

The correction kernel is the ratio ``(phi(zU) - phi(zL)) / (Phi(zU) -
Phi(zL))`` of standard-normal density and CDF differences at the
standardized truncation bounds.  Evaluated naively this underflows and
cancels catastrophically once both bounds sit in the same far tail, so the
kernel works in log densities, survival functions, and a factored
Mills-ratio form, and switches to a series expansion for very narrow
intervals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from scipy.special import log_ndtr, ndtr

from .errors import (
    EmptyCell,
    InsufficientData,
    InvalidInterval,
    NoEstimateAfterStop,
    ShapeError,
)
from .population import DesignSpec, IndexSet, PopulationSpec
from .rules import (
    ExtendedInterval,
    SelectionOutcome,
    Stage1Summary,
    get_rule,
)

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

# narrow-interval half-width below which the series expansion is more
# accurate than the general formulas (which cancel as the interval shrinks)
_NARROW_HALF_WIDTH = 1e-4

ArrayLike = Union[float, np.ndarray]


def _log_phi(z: np.ndarray) -> np.ndarray:
    return -0.5 * z * z - _LOG_SQRT_2PI


def _hazard(z: np.ndarray) -> np.ndarray:
    """phi(z) / (1 - Phi(z)), stable for all finite z."""
    return np.exp(_log_phi(z) - log_ndtr(-z))


def _mills(z: np.ndarray) -> np.ndarray:
    """(1 - Phi(z)) / phi(z); bounded above by its value at 0 for z >= 0."""
    return np.exp(log_ndtr(-z) - _log_phi(z))


def _correction_core(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kernel for finite bounds a < b with non-negative midpoint."""
    zm = 0.5 * (a + b)
    h = 0.5 * (b - a)
    out = np.empty_like(zm)

    narrow = h <= _NARROW_HALF_WIDTH
    if narrow.any():
        hn, zn = h[narrow], zm[narrow]
        out[narrow] = -zn * (1.0 - hn * hn / 3.0)

    wide = ~narrow
    if wide.any():
        aw, bw, zw, hw = a[wide], b[wide], zm[wide], h[wide]
        res = np.empty_like(zw)
        num = np.expm1(-2.0 * hw * zw)  # phi(b)/phi(a) - 1

        tail = aw >= 0.0  # both bounds in the right tail: factor out phi(a)
        if tail.any():
            e = np.exp(-2.0 * hw[tail] * zw[tail])
            den = _mills(aw[tail]) - e * _mills(bw[tail])
            res[tail] = num[tail] / den

        straddle = ~tail
        if straddle.any():
            phi_a = np.exp(_log_phi(aw[straddle]))
            den = ndtr(bw[straddle]) - ndtr(aw[straddle])
            res[straddle] = phi_a * num[straddle] / den
        out[wide] = res
    return out


def truncnorm_correction(zL: ArrayLike, zU: ArrayLike) -> ArrayLike:
    """Mean shift of a standard normal truncated to (zL, zU).

    Returns ``(phi(zU) - phi(zL)) / (Phi(zU) - Phi(zL))``, which equals the
    negative of the truncated mean.  Endpoints may be infinite.  Accurate to
    about 1e-10 relative for bounds within +-8 standard units and free of
    NaN/Inf out to +-38.

    Accepts scalars or arrays (broadcast together).
    """
    zl = np.asarray(zL, dtype=float)
    zu = np.asarray(zU, dtype=float)
    zl, zu = np.broadcast_arrays(zl, zu)
    if np.isnan(zl).any() or np.isnan(zu).any():
        raise InvalidInterval("truncation bounds must not be NaN")
    if not (zl < zu).all():
        raise InvalidInterval("lower bound must be strictly below upper bound")

    zl = zl.astype(float, copy=True)
    zu = zu.astype(float, copy=True)
    out = np.zeros_like(zl)

    lo_inf = np.isinf(zl) & (zl < 0)
    up_inf = np.isinf(zu) & (zu > 0)

    left_only = up_inf & ~lo_inf  # (zL, +inf)
    if left_only.any():
        out[left_only] = -_hazard(zl[left_only])

    right_only = lo_inf & ~up_inf  # (-inf, zU)
    if right_only.any():
        out[right_only] = _hazard(-zu[right_only])

    finite = ~lo_inf & ~up_inf
    if finite.any():
        a, b = zl[finite], zu[finite]
        flip = (a + b) < 0.0
        aa = np.where(flip, -b, a)
        bb = np.where(flip, -a, b)
        core = _correction_core(aa, bb)
        out[finite] = np.where(flip, -core, core)

    if np.ndim(zL) == 0 and np.ndim(zU) == 0:
        return float(out)
    return out


def conditional_shift(
    x: ArrayLike,
    lower: ArrayLike,
    upper: ArrayLike,
    v: ArrayLike,
    r: ArrayLike,
) -> ArrayLike:
    """Additive correction ``v * sqrt(r) * kernel`` at standardized bounds.

    ``v`` is the standard deviation of the pooled mean difference and ``r``
    the stage-1 to stage-2 sample-size ratio for the same scope.
    """
    v = np.asarray(v, dtype=float)
    r = np.asarray(r, dtype=float)
    if (v <= 0).any() or (r <= 0).any():
        raise ShapeError("v and r must be positive")
    scale = np.sqrt(r) / v
    corr = truncnorm_correction(scale * (np.asarray(lower) - x), scale * (np.asarray(upper) - x))
    return v * np.sqrt(r) * corr


def umvcue(
    x_pooled: float,
    bounds: ExtendedInterval,
    v: float,
    r: float,
) -> float:
    """Conditionally unbiased estimate from the pooled mean difference.

    ``x_pooled`` is the pooled two-stage mean difference for the target,
    ``bounds`` the selection interval for its stage-1 aggregate, ``v`` the
    pooled standard deviation, and ``r`` the stage-size ratio.  With
    unbounded ``bounds`` the correction vanishes and the MLE is returned
    unchanged.
    """
    shift = conditional_shift(float(x_pooled), bounds.lower, bounds.upper, float(v), float(r))
    return float(x_pooled + shift)


@dataclass(frozen=True)
class CellSummary:
    """Sufficient statistics for one (subpopulation, stage, arm) cell.

    ``ssd`` is the within-cell sum of squared deviations from the cell mean;
    it may be omitted when only mean-based estimators are needed.
    """

    subpopulation: int
    stage: int
    arm: int
    count: int
    mean: float
    ssd: Optional[float] = None

    def __post_init__(self) -> None:
        if self.stage not in (1, 2):
            raise ShapeError(f"stage must be 1 or 2, got {self.stage}")
        if self.arm not in (0, 1):
            raise ShapeError(f"arm must be 0 or 1, got {self.arm}")
        if self.subpopulation < 1:
            raise ShapeError(f"subpopulation index must be >= 1, got {self.subpopulation}")
        if self.count < 1:
            raise ShapeError(f"cell count must be >= 1, got {self.count}")
        if not math.isfinite(self.mean):
            raise ShapeError("cell mean must be finite")
        if self.ssd is not None and (self.ssd < 0 or not math.isfinite(self.ssd)):
            raise ShapeError(f"ssd must be finite and non-negative, got {self.ssd}")


class TrialData:
    """Per-cell sufficient summaries of a two-stage trial.

    Construct from per-patient records or from cell summaries; both routes
    reproduce exactly the same statistics.  Instances are immutable.
    """

    def __init__(
        self,
        k: int,
        counts: np.ndarray,
        sums: np.ndarray,
        ssds: np.ndarray,
    ) -> None:
        counts = np.asarray(counts, dtype=np.int64)
        sums = np.asarray(sums, dtype=float)
        ssds = np.asarray(ssds, dtype=float)
        shape = (k, 2, 2)
        if counts.shape != shape or sums.shape != shape or ssds.shape != shape:
            raise ShapeError(f"cell arrays must have shape {shape}")
        for arr in (counts, sums, ssds):
            arr.setflags(write=False)
        self.k = int(k)
        self.counts = counts
        self.sums = sums
        self.ssds = ssds  # NaN where the within-cell deviations are unknown

    @classmethod
    def from_patients(cls, records: Iterable[Sequence], k: int) -> "TrialData":
        """Build from (subpopulation, stage, arm, outcome) patient records."""
        values: dict[tuple[int, int, int], list[float]] = {}
        for rec in records:
            m, j, a, y = int(rec[0]), int(rec[1]), int(rec[2]), float(rec[3])
            if not 1 <= m <= k:
                raise ShapeError(f"subpopulation {m} out of range 1..{k}")
            if j not in (1, 2) or a not in (0, 1):
                raise ShapeError(f"bad stage/arm in record {rec!r}")
            if not math.isfinite(y):
                raise ShapeError(f"non-finite outcome in record {rec!r}")
            values.setdefault((m, j, a), []).append(y)
        counts = np.zeros((k, 2, 2), dtype=np.int64)
        sums = np.zeros((k, 2, 2))
        ssds = np.zeros((k, 2, 2))
        for (m, j, a), ys in values.items():
            arr = np.asarray(ys)
            counts[m - 1, j - 1, a] = arr.size
            sums[m - 1, j - 1, a] = arr.sum()
            ssds[m - 1, j - 1, a] = float(((arr - arr.mean()) ** 2).sum())
        return cls(k, counts, sums, ssds)

    @classmethod
    def from_summaries(cls, cells: Iterable[CellSummary], k: int) -> "TrialData":
        counts = np.zeros((k, 2, 2), dtype=np.int64)
        sums = np.zeros((k, 2, 2))
        ssds = np.full((k, 2, 2), np.nan)
        ssds[counts == 0] = np.nan
        seen: set[tuple[int, int, int]] = set()
        for cell in cells:
            key = (cell.subpopulation, cell.stage, cell.arm)
            if cell.subpopulation > k:
                raise ShapeError(f"subpopulation {cell.subpopulation} out of range 1..{k}")
            if key in seen:
                raise ShapeError(f"duplicate cell summary for {key}")
            seen.add(key)
            i = (cell.subpopulation - 1, cell.stage - 1, cell.arm)
            counts[i] = cell.count
            sums[i] = cell.count * cell.mean
            if cell.ssd is not None:
                ssds[i] = cell.ssd
        return cls(k, counts, sums, ssds)

    def count(
        self,
        I: Optional[IndexSet] = None,
        stage: Optional[int] = None,
        arm: Optional[int] = None,
    ) -> int:
        idx = list(range(self.k)) if I is None else [m - 1 for m in I]
        sub_c = self.counts[idx]
        if stage is not None:
            sub_c = sub_c[:, stage - 1 : stage, :]
        if arm is not None:
            sub_c = sub_c[..., arm : arm + 1]
        return int(sub_c.sum())

    def _arm_mean(self, I: IndexSet, arm: int, stage: Optional[int]) -> float:
        idx = [m - 1 for m in I]
        c = self.counts[idx, :, arm]
        s = self.sums[idx, :, arm]
        if stage is not None:
            c = c[:, stage - 1 : stage]
            s = s[:, stage - 1 : stage]
        n = int(c.sum())
        if n == 0:
            raise EmptyCell(
                f"no arm-{arm} patients in scope (I={I.members}, stage={stage})"
            )
        return float(s.sum()) / n

    def selected_set(self) -> IndexSet:
        """Subpopulations with any stage-2 enrolment."""
        return IndexSet(
            tuple(m for m in range(1, self.k + 1) if self.counts[m - 1, 1, :].sum() > 0)
        )

    def stage1_summary(self) -> Stage1Summary:
        x = tuple(
            stagewise_mean_diff(self, IndexSet.of(m), 1) for m in range(1, self.k + 1)
        )
        c = tuple(int(self.counts[m - 1, 0, :].sum()) for m in range(1, self.k + 1))
        return Stage1Summary(x, c)

    def pooled_cell(self, m: int, arm: int) -> tuple[int, float, float]:
        """(count, mean, ssw) for cell (m, arm) pooled over both stages.

        Raises :class:`InsufficientData` when the within-cell deviations are
        unavailable for a non-trivial cell.
        """
        c1, c2 = int(self.counts[m - 1, 0, arm]), int(self.counts[m - 1, 1, arm])
        n = c1 + c2
        if n == 0:
            raise EmptyCell(f"no patients in cell (subpopulation {m}, arm {arm})")
        parts = []
        for j, cj in ((1, c1), (2, c2)):
            if cj == 0:
                continue
            ssd = float(self.ssds[m - 1, j - 1, arm])
            if math.isnan(ssd):
                raise InsufficientData(
                    f"cell (subpopulation {m}, stage {j}, arm {arm}) lacks "
                    "within-cell deviations; supply ssd or per-patient data"
                )
            parts.append((cj, float(self.sums[m - 1, j - 1, arm]) / cj, ssd))
        mean = sum(c * mu for c, mu, _ in parts) / n
        ssw = sum(s for _, _, s in parts)
        if len(parts) == 2:
            (ca, ma, _), (cb, mb, _) = parts
            ssw += ca * cb / (ca + cb) * (ma - mb) ** 2
        return n, mean, ssw


def stagewise_mean_diff(data: TrialData, I: IndexSet, stage: int) -> float:
    """Treatment-minus-control mean difference over S_I within one stage,
    pooling patients across the member subpopulations."""
    if I.is_empty:
        raise EmptyCell("mean difference over the empty set is undefined")
    I.validate_range(data.k)
    return data._arm_mean(I, 1, stage) - data._arm_mean(I, 0, stage)


def pooled_mle(data: TrialData, I: IndexSet) -> float:
    """Pooled two-stage mean difference over S_I (patient-level pooling).

    Subpopulations without stage-2 enrolment contribute stage-1 patients
    only, which the patient-level pooling handles automatically.
    """
    if I.is_empty:
        raise EmptyCell("mean difference over the empty set is undefined")
    I.validate_range(data.k)
    return data._arm_mean(I, 1, None) - data._arm_mean(I, 0, None)


def pice_sigma_hat(
    data: TrialData,
    E: IndexSet,
    k: int,
    df_mode: str = "selected-cells",
) -> float:
    """Pooled within-cell variance estimate over the selected subpopulations.

    Sums, over every (selected subpopulation, arm) cell, the squared
    deviations from the cell mean pooled across both stages.  The default
    divisor is the matching degrees of freedom, sum of (cell count - 1); the
    ``"paper-literal"`` mode divides by total patients minus 2k regardless
    of how many cells contributed.
    """
    if E.is_empty:
        raise EmptyCell("variance estimate requires a non-empty selection")
    if df_mode not in ("selected-cells", "paper-literal"):
        raise ShapeError(f"unknown df_mode {df_mode!r}")
    ssw_total = 0.0
    df = 0
    for m in E:
        for arm in (0, 1):
            n, _, ssw = data.pooled_cell(m, arm)
            if n < 2:
                raise InsufficientData(
                    f"cell (subpopulation {m}, arm {arm}) has fewer than 2 patients"
                )
            ssw_total += ssw
            df += n - 1
    if df_mode == "paper-literal":
        df = data.count(None) - 2 * k
    if df <= 0:
        raise InsufficientData(f"non-positive degrees of freedom ({df})")
    return ssw_total / df


def pice(
    x_pooled: float,
    bounds: ExtendedInterval,
    counts: int,
    r: float,
    sigma_hat2: float,
) -> float:
    """Plug-in conditional estimate: the conditionally unbiased formula with
    the variance replaced by its pooled within-cell estimate.

    ``counts`` is the total patients in the target scope, so the plugged-in
    standard deviation is ``sqrt(4 * sigma_hat2 / counts)``.
    """
    if counts <= 0:
        raise EmptyCell("counts must be positive")
    if not sigma_hat2 > 0:
        raise InsufficientData(f"sigma_hat2 must be positive, got {sigma_hat2}")
    v_hat = math.sqrt(4.0 * float(sigma_hat2) / counts)
    return umvcue(x_pooled, bounds, v_hat, r)


@dataclass(frozen=True)
class EstimateReport:
    """Estimates for one target, with the inputs that produced them.

    Exactly one of ``umvcue`` (known variance) and ``pice`` (plug-in
    variance) is populated; ``sigma_source`` records which.  ``v_pooled`` is
    the variance of the pooled mean difference that was used.
    """

    target: IndexSet
    mle: float
    umvcue: Optional[float]
    pice: Optional[float]
    bounds_used: ExtendedInterval
    v_pooled: float
    r: float
    sigma_source: str


def estimate_target(
    data: TrialData,
    spec: PopulationSpec,
    design: DesignSpec,
    outcome: SelectionOutcome,
    target: IndexSet,
    *,
    s1: Optional[Stage1Summary] = None,
    unconditional: bool = False,
    pice_df: str = "selected-cells",
    _sigma_hat2: Optional[float] = None,
) -> EstimateReport:
    """Full estimate report for one target under the realized selection."""
    if outcome.stopped:
        raise NoEstimateAfterStop("the trial stopped for futility; nothing to estimate")
    if design.rule is None:
        raise ShapeError("design carries no rule configuration")
    rule = get_rule(design.rule)
    rule._check_target(outcome, target)
    if s1 is None:
        s1 = data.stage1_summary()

    if unconditional:
        bounds = ExtendedInterval.unbounded()
    elif target == outcome.selected and outcome.bounds is not None:
        bounds = outcome.bounds
    else:
        bounds = rule.bounds_for_target(spec, s1, outcome, target)

    n1 = data.count(target, stage=1)
    n2 = data.count(target, stage=2)
    if n2 == 0:
        raise EmptyCell(f"target {target.members} has no stage-2 patients")
    n = n1 + n2
    r = n1 / n2
    x = pooled_mle(data, target)

    if design.sigma_known:
        v2 = 4.0 * design.sigma2 / n
        value = umvcue(x, bounds, math.sqrt(v2), r)
        return EstimateReport(target, x, value, None, bounds, v2, r, "known")

    sig2 = (
        _sigma_hat2
        if _sigma_hat2 is not None
        else pice_sigma_hat(data, outcome.selected, spec.k, df_mode=pice_df)
    )
    v2 = 4.0 * sig2 / n
    value = pice(x, bounds, n, r, sig2)
    return EstimateReport(target, x, None, value, bounds, v2, r, "plug-in")


def estimate_report(
    data: TrialData,
    spec: PopulationSpec,
    design: DesignSpec,
    outcome: SelectionOutcome,
    targets: Sequence[IndexSet],
    *,
    unconditional: bool = False,
    pice_df: str = "selected-cells",
) -> list[EstimateReport]:
    """Estimate reports for several targets; target-level errors propagate."""
    if outcome.stopped:
        raise NoEstimateAfterStop("the trial stopped for futility; nothing to estimate")
    s1 = data.stage1_summary()
    sigma_hat2 = None
    if not design.sigma_known:
        sigma_hat2 = pice_sigma_hat(data, outcome.selected, spec.k, df_mode=pice_df)
    return [
        estimate_target(
            data,
            spec,
            design,
            outcome,
            t,
            s1=s1,
            unconditional=unconditional,
            pice_df=pice_df,
            _sigma_hat2=sigma_hat2,
        )
        for t in targets
    ]
