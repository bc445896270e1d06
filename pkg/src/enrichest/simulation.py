"""Monte Carlo simulator for two-stage adaptive enrichment trials.

Each replication draws stage-1 outcomes for every subpopulation, applies
the configured selection rule to the stage-1 mean differences, draws stage-2
outcomes only for the selected subpopulations, and computes the pooled MLE,
the conditionally unbiased estimate, and the plug-in estimate.  Results are
aggregated per realized selection: selection proportions and conditional
bias / MSE of each estimator against the selected aggregate's true effect.

Reproducibility contract
------------------------
Replication ``i`` draws from a counter-based substream keyed by
``(master_seed, i)``, so its data depend only on the seed and its own index,
never on worker scheduling.  Reductions run over fixed-size chunks of
replications that are merged in index order, which makes aggregate output
byte-identical for any worker count.

Two generation modes are supported: ``per-patient`` draws every outcome
individually (exercising the within-cell variance computation exactly as a
real dataset would), while ``summary-fast`` samples each cell's mean and
sum of squared deviations directly from their exact sampling distributions.
The two agree in distribution; the test suite checks this.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError
from .estimators import TrialData, conditional_shift
from .population import (
    AllocationTable,
    DesignSpec,
    IndexSet,
    PopulationSpec,
    aggregate_effect,
    allocate,
)
from .rules import RuleConfig, SelectionOutcome, SelectionRule, Stage1Summary, get_rule

ESTIMATOR_NAMES = ("mle", "umvcue", "pice")

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class Scenario:
    """One data-generating configuration: true effects, control-arm means
    (default zero), and the true outcome variance."""

    name: str
    effects: tuple[float, ...]
    sigma2: float
    control_means: Optional[tuple[float, ...]] = None

    def __post_init__(self) -> None:
        eff = tuple(float(x) for x in self.effects)
        if any(not math.isfinite(x) for x in eff):
            raise ShapeError("effects must be finite")
        object.__setattr__(self, "effects", eff)
        if not (float(self.sigma2) > 0):
            raise ShapeError(f"sigma2 must be positive, got {self.sigma2}")
        object.__setattr__(self, "sigma2", float(self.sigma2))
        if self.control_means is not None:
            cm = tuple(float(x) for x in self.control_means)
            if len(cm) != len(eff):
                raise ShapeError("control_means length must match effects")
            object.__setattr__(self, "control_means", cm)

    def control_vector(self) -> tuple[float, ...]:
        return self.control_means or tuple(0.0 for _ in self.effects)


@dataclass(frozen=True)
class RngPolicy:
    """Master seed plus the fixed chunk size of the reduction tree.

    The chunk size only shapes the deterministic reduction order; it does
    not affect which random numbers a replication sees.
    """

    master_seed: int
    chunk_size: int = 4096

    def __post_init__(self) -> None:
        object.__setattr__(self, "master_seed", int(self.master_seed) & _MASK64)
        if self.chunk_size < 1:
            raise ShapeError("chunk_size must be positive")

    def replication_stream(self, index: int) -> np.random.Generator:
        key = np.array([self.master_seed, index], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def spawn(self, index: int) -> "RngPolicy":
        """Derived policy for a sub-study (e.g. one scenario of several)."""
        seed = np.random.SeedSequence([self.master_seed, int(index)]).generate_state(1)[0]
        return RngPolicy(master_seed=int(seed), chunk_size=self.chunk_size)


@dataclass(frozen=True)
class EstimatorStats:
    bias: float
    mse: float
    se: float
    n: int


@dataclass(frozen=True)
class CellResult:
    """Conditional summaries for one selection outcome."""

    outcome: IndexSet
    count: int
    proportion: float
    estimators: dict[str, EstimatorStats] = field(default_factory=dict)


@dataclass(frozen=True)
class ScenarioResult:
    scenario: str
    rule_id: str
    reps: int
    master_seed: int
    mode: str
    k: int
    cells: tuple[CellResult, ...]

    def cell(self, outcome: IndexSet) -> CellResult:
        for c in self.cells:
            if c.outcome == outcome:
                return c
        raise KeyError(f"no cell for outcome {outcome.members}")


class _TrialPlan:
    """Precomputed layout shared by every replication of one scenario run.

    Cell columns are indexed ``2*(m-1) + arm``.  Stage-1 patients are laid
    out subpopulation by subpopulation, treatment block before control
    block; stage-2 likewise over the selected subpopulations.
    """

    def __init__(
        self,
        scenario: Scenario,
        spec: PopulationSpec,
        design: DesignSpec,
        rule_cfg: RuleConfig,
    ) -> None:
        k = spec.k
        if len(scenario.effects) != k:
            raise ShapeError(
                f"scenario has {len(scenario.effects)} effects for k={k} subpopulations"
            )
        self.scenario = scenario
        self.spec = spec
        self.design = design
        self.rule_cfg = rule_cfg
        self.rule: SelectionRule = get_rule(rule_cfg)
        self.k = k
        self.n1 = design.n1
        self.n2 = design.n2
        self.sigma2 = scenario.sigma2
        self.sigma = math.sqrt(scenario.sigma2)
        self.outcomes = self.rule.outcomes(spec)

        ctrl = scenario.control_vector()
        arm_mean = np.empty(2 * k)
        for m in range(1, k + 1):
            arm_mean[2 * (m - 1) + 0] = ctrl[m - 1]
            arm_mean[2 * (m - 1) + 1] = ctrl[m - 1] + scenario.effects[m - 1]
        self.cell_means = arm_mean

        stage1 = allocate(spec, design, IndexSet.empty())
        self.c1 = self._cell_counts(stage1, stage=1)
        self.mu1, self.ind1 = self._patient_layout(self.c1, arm_mean)

        scen_spec = PopulationSpec(k, spec.prevalences, scenario.effects)
        self.c2: dict[int, np.ndarray] = {}
        self.mu2: dict[int, np.ndarray] = {}
        self.ind2: dict[int, np.ndarray] = {}
        self.delta: dict[int, float] = {}
        self.scope_cols: dict[int, np.ndarray] = {}
        self.treat_cols: dict[int, np.ndarray] = {}
        self.ctrl_cols: dict[int, np.ndarray] = {}
        for code, outcome in enumerate(self.outcomes):
            if outcome.is_empty:
                continue
            table = allocate(spec, design, outcome)
            c2 = self._cell_counts(table, stage=2)
            self.c2[code] = c2
            self.mu2[code], self.ind2[code] = self._patient_layout(c2, arm_mean)
            self.delta[code] = aggregate_effect(scen_spec, outcome)
            t_cols = np.array([2 * (m - 1) + 1 for m in outcome])
            c_cols = np.array([2 * (m - 1) + 0 for m in outcome])
            self.treat_cols[code] = t_cols
            self.ctrl_cols[code] = c_cols
            self.scope_cols[code] = np.concatenate([t_cols, c_cols])

        t_all = np.arange(k) * 2 + 1
        c_all = np.arange(k) * 2
        self.x1_t_cols, self.x1_c_cols = t_all, c_all

    @staticmethod
    def _cell_counts(table: AllocationTable, stage: int) -> np.ndarray:
        k = table.k
        out = np.zeros(2 * k, dtype=np.int64)
        for m in range(k):
            out[2 * m + 0] = table.counts[m, stage - 1, 0]
            out[2 * m + 1] = table.counts[m, stage - 1, 1]
        return out

    @staticmethod
    def _patient_layout(cells: np.ndarray, arm_mean: np.ndarray):
        """Per-patient mean vector and patient-to-cell indicator matrix."""
        total = int(cells.sum())
        mu = np.empty(total)
        ind = np.zeros((total, cells.size))
        pos = 0
        k = cells.size // 2
        for m in range(k):
            for a in (1, 0):
                col = 2 * m + a
                c = int(cells[col])
                mu[pos : pos + c] = arm_mean[col]
                ind[pos : pos + c, col] = 1.0
                pos += c
        return mu, ind


@dataclass
class _ChunkAccum:
    counts: np.ndarray  # per outcome code
    n: np.ndarray  # (codes, estimators)
    sum_d: np.ndarray
    sum_d2: np.ndarray

    @classmethod
    def zeros(cls, n_codes: int) -> "_ChunkAccum":
        shape = (n_codes, len(ESTIMATOR_NAMES))
        return cls(
            counts=np.zeros(n_codes, dtype=np.int64),
            n=np.zeros(shape, dtype=np.int64),
            sum_d=np.zeros(shape),
            sum_d2=np.zeros(shape),
        )

    def merge(self, other: "_ChunkAccum") -> None:
        self.counts += other.counts
        self.n += other.n
        self.sum_d += other.sum_d
        self.sum_d2 += other.sum_d2


def _draw_chunk_per_patient(plan: _TrialPlan, policy: RngPolicy, start: int, count: int):
    """Stage sums and within-cell deviation sums for one chunk of reps."""
    n1, n2 = plan.n1, plan.n2
    z = np.empty((count, n1 + n2))
    for i in range(count):
        z[i] = policy.replication_stream(start + i).standard_normal(n1 + n2)
    y1 = z[:, :n1] * plan.sigma + plan.mu1
    s1 = y1 @ plan.ind1
    ssw1 = (y1 * y1) @ plan.ind1 - s1 * s1 / plan.c1

    x1 = s1[:, plan.x1_t_cols] / plan.c1[plan.x1_t_cols] - s1[:, plan.x1_c_cols] / plan.c1[plan.x1_c_cols]
    codes, lo, hi = plan.rule.select_arrays(plan.spec, x1)

    s2 = np.zeros_like(s1)
    ssw2 = np.zeros_like(s1)
    for code in plan.c2:
        rows = np.flatnonzero(codes == code)
        if rows.size == 0:
            continue
        y2 = z[rows, n1:] * plan.sigma + plan.mu2[code]
        s = y2 @ plan.ind2[code]
        c2s = np.maximum(plan.c2[code], 1)  # zero columns stay exactly zero
        s2[rows] = s
        ssw2[rows] = (y2 * y2) @ plan.ind2[code] - s * s / c2s
    return s1, ssw1, s2, ssw2, codes, lo, hi


def _draw_chunk_fast(plan: _TrialPlan, policy: RngPolicy, start: int, count: int):
    """Sample cell means and deviation sums directly (no patient loop)."""
    if int(plan.c1.min()) < 2 or any(int(c[c > 0].min()) < 2 for c in plan.c2.values()):
        raise ShapeError("summary-fast mode requires at least 2 patients per cell")
    kk = 2 * plan.k
    gens = [policy.replication_stream(start + i) for i in range(count)]
    means1 = np.empty((count, kk))
    ssw1 = np.empty((count, kk))
    sd1 = plan.sigma / np.sqrt(plan.c1)
    for i, g in enumerate(gens):
        means1[i] = g.standard_normal(kk) * sd1 + plan.cell_means
        ssw1[i] = g.chisquare(plan.c1 - 1) * plan.sigma2
    s1 = means1 * plan.c1

    x1 = means1[:, plan.x1_t_cols] - means1[:, plan.x1_c_cols]
    codes, lo, hi = plan.rule.select_arrays(plan.spec, x1)

    s2 = np.zeros((count, kk))
    ssw2 = np.zeros((count, kk))
    for code in plan.c2:
        c2 = plan.c2[code]
        member = c2 > 0
        safe = np.maximum(c2, 1)
        sd2 = plan.sigma / np.sqrt(safe)
        df2 = np.maximum(c2 - 1, 1)
        for i in np.flatnonzero(codes == code):
            g = gens[i]
            mu = g.standard_normal(kk) * sd2 + plan.cell_means
            chi = g.chisquare(df2) * plan.sigma2
            s2[i] = np.where(member, mu * c2, 0.0)
            ssw2[i] = np.where(member, chi, 0.0)
    return s1, ssw1, s2, ssw2, codes, lo, hi


def _chunk_worker(
    plan: _TrialPlan,
    policy: RngPolicy,
    start: int,
    count: int,
    mode: str,
    pice_df: str,
) -> _ChunkAccum:
    draw = _draw_chunk_per_patient if mode == "per-patient" else _draw_chunk_fast
    s1, ssw1, s2, ssw2, codes, lo, hi = draw(plan, policy, start, count)
    acc = _ChunkAccum.zeros(len(plan.outcomes))
    acc.counts += np.bincount(codes, minlength=len(plan.outcomes))

    for code in plan.c2:
        rows = np.flatnonzero(codes == code)
        if rows.size == 0:
            continue
        c1, c2 = plan.c1, plan.c2[code]
        t_cols, c_cols = plan.treat_cols[code], plan.ctrl_cols[code]
        nt = int(c1[t_cols].sum() + c2[t_cols].sum())
        nc = int(c1[c_cols].sum() + c2[c_cols].sum())
        pooled_t = (s1[rows][:, t_cols].sum(axis=1) + s2[rows][:, t_cols].sum(axis=1)) / nt
        pooled_c = (s1[rows][:, c_cols].sum(axis=1) + s2[rows][:, c_cols].sum(axis=1)) / nc
        x = pooled_t - pooled_c

        scope = plan.scope_cols[code]
        n1_scope = int(c1[scope].sum())
        n2_scope = int(c2[scope].sum())
        n_scope = n1_scope + n2_scope
        r = n1_scope / n2_scope
        v = math.sqrt(4.0 * plan.sigma2 / n_scope)
        lo_r, hi_r = lo[rows], hi[rows]

        est = {
            "mle": x,
            "umvcue": x + conditional_shift(x, lo_r, hi_r, v, r),
        }
        # plug-in variance from within-cell deviations pooled over stages
        n_ma = c1[scope] + c2[scope]
        m1 = s1[rows][:, scope] / c1[scope]
        m2 = s2[rows][:, scope] / c2[scope]
        ssw_pool = (
            ssw1[rows][:, scope]
            + ssw2[rows][:, scope]
            + c1[scope] * c2[scope] / n_ma * (m1 - m2) ** 2
        )
        if pice_df == "paper-literal":
            df = plan.n1 + plan.n2 - 2 * plan.k
        else:
            df = int((n_ma - 1).sum())
        sig2_hat = ssw_pool.sum(axis=1) / df
        v_hat = np.sqrt(4.0 * sig2_hat / n_scope)
        est["pice"] = x + conditional_shift(x, lo_r, hi_r, v_hat, r)

        delta = plan.delta[code]
        for e_idx, name in enumerate(ESTIMATOR_NAMES):
            d = est[name] - delta
            acc.n[code, e_idx] = rows.size
            acc.sum_d[code, e_idx] = d.sum()
            acc.sum_d2[code, e_idx] = (d * d).sum()
    return acc


def run_scenario(
    scenario: Scenario,
    spec: PopulationSpec,
    design: DesignSpec,
    rule_cfg: RuleConfig,
    reps: int,
    rng: RngPolicy,
    *,
    mode: str = "per-patient",
    workers: int = 1,
    pice_df: str = "selected-cells",
) -> ScenarioResult:
    """Simulate ``reps`` trials and aggregate conditional operating
    characteristics per selection outcome."""
    if reps < 1:
        raise ShapeError("reps must be at least 1")
    if mode not in ("per-patient", "summary-fast"):
        raise ShapeError(f"unknown mode {mode!r}")
    plan = _TrialPlan(scenario, spec, design, rule_cfg)
    chunks = [
        (start, min(rng.chunk_size, reps - start))
        for start in range(0, reps, rng.chunk_size)
    ]
    if workers <= 1:
        accums = [
            _chunk_worker(plan, rng, start, count, mode, pice_df)
            for start, count in chunks
        ]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_chunk_worker, plan, rng, start, count, mode, pice_df)
                for start, count in chunks
            ]
            accums = [f.result() for f in futures]  # submission == chunk order

    total = _ChunkAccum.zeros(len(plan.outcomes))
    for acc in accums:
        total.merge(acc)

    cells = []
    for code, outcome in enumerate(plan.outcomes):
        count = int(total.counts[code])
        stats: dict[str, EstimatorStats] = {}
        if not outcome.is_empty and count > 0:
            for e_idx, name in enumerate(ESTIMATOR_NAMES):
                n = int(total.n[code, e_idx])
                sd_, sd2 = float(total.sum_d[code, e_idx]), float(total.sum_d2[code, e_idx])
                bias = sd_ / n
                mse = sd2 / n
                if n > 1:
                    var = max(sd2 - sd_ * sd_ / n, 0.0) / (n - 1)
                    se = math.sqrt(var / n)
                else:
                    se = math.nan
                stats[name] = EstimatorStats(bias=bias, mse=mse, se=se, n=n)
        cells.append(
            CellResult(
                outcome=outcome,
                count=count,
                proportion=count / reps,
                estimators=stats,
            )
        )
    return ScenarioResult(
        scenario=scenario.name,
        rule_id=plan.rule.rule_id,
        reps=reps,
        master_seed=rng.master_seed,
        mode=mode,
        k=spec.k,
        cells=tuple(cells),
    )


def generate_trial(
    scenario: Scenario,
    spec: PopulationSpec,
    design: DesignSpec,
    rule_cfg: RuleConfig,
    rng: np.random.Generator,
) -> tuple[TrialData, SelectionOutcome]:
    """Draw one complete trial at patient level.

    Stage-1 outcomes are drawn for every subpopulation, the rule picks the
    selection from the stage-1 mean differences, and stage-2 outcomes are
    drawn only for the selected subpopulations under proportional
    allocation.  Deterministic given the generator state.
    """
    k = spec.k
    if len(scenario.effects) != k:
        raise ShapeError(f"scenario has {len(scenario.effects)} effects for k={k}")
    ctrl = scenario.control_vector()
    sigma = math.sqrt(scenario.sigma2)
    rule = get_rule(rule_cfg)

    stage1 = allocate(spec, design, IndexSet.empty())
    records: list[tuple[int, int, int, float]] = []
    x1 = []
    counts1 = []
    for m in range(1, k + 1):
        arm_values = {}
        for a in (1, 0):
            c = int(stage1.counts[m - 1, 0, a])
            mu = ctrl[m - 1] + (scenario.effects[m - 1] if a == 1 else 0.0)
            ys = rng.normal(mu, sigma, size=c)
            arm_values[a] = ys
            records.extend((m, 1, a, float(y)) for y in ys)
        x1.append(float(arm_values[1].mean() - arm_values[0].mean()))
        counts1.append(int(stage1.counts[m - 1, 0, :].sum()))
    s1 = Stage1Summary(tuple(x1), tuple(counts1))
    outcome = rule.select(spec, s1)

    if not outcome.stopped:
        stage2 = allocate(spec, design, outcome.selected)
        for m in outcome.selected:
            for a in (1, 0):
                c = int(stage2.counts[m - 1, 1, a])
                mu = ctrl[m - 1] + (scenario.effects[m - 1] if a == 1 else 0.0)
                ys = rng.normal(mu, sigma, size=c)
                records.extend((m, 2, a, float(y)) for y in ys)
    return TrialData.from_patients(records, k), outcome


# --------------------------------------------------------------------------
# reporting
# --------------------------------------------------------------------------


def _cell_label(outcome: IndexSet, k: int) -> str:
    if outcome.is_empty:
        return "Stop"
    if len(outcome) == k:
        return "Continue with F"
    return "Enrich to S" + "+".join(str(m) for m in outcome)


def results_to_csv(results: Sequence[ScenarioResult]) -> str:
    """One row per scenario x selection x estimator; stop cells carry the
    proportion only.  Floats are written in shortest round-trip form."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(
        ["scenario", "cell", "estimator", "proportion", "bias_e3", "mse_e3", "se_e3", "n_cell"]
    )
    for res in results:
        for cell in res.cells:
            label = cell.outcome.label(res.k)
            if not cell.estimators:
                writer.writerow(
                    [res.scenario, label, "", repr(float(cell.proportion)), "", "", "", cell.count]
                )
                continue
            for name in ESTIMATOR_NAMES:
                st = cell.estimators[name]
                writer.writerow(
                    [
                        res.scenario,
                        label,
                        name,
                        repr(float(cell.proportion)),
                        repr(float(st.bias * 1e3)),
                        repr(float(st.mse * 1e3)),
                        repr(float(st.se * 1e3)),
                        st.n,
                    ]
                )
    return buf.getvalue()


def parse_results_csv(text: str) -> list[dict]:
    """Round-trip reader for the CSV schema above (used by golden tests)."""
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        for key in ("proportion", "bias_e3", "mse_e3", "se_e3"):
            rec[key] = float(rec[key]) if rec[key] else None
        rec["n_cell"] = int(rec["n_cell"])
        rows.append(rec)
    return rows


def bias_mse_table(results: Sequence[ScenarioResult]) -> str:
    """Markdown report: per scenario, the selection proportions and each
    estimator's conditional bias (MSE) scaled by 10^3."""
    lines: list[str] = []
    for res in results:
        labels = [_cell_label(c.outcome, res.k) for c in res.cells]
        lines.append(f"### {res.scenario} (rule {res.rule_id}, {res.reps} reps)")
        lines.append("")
        lines.append("| Method | " + " | ".join(labels) + " |")
        lines.append("|" + " --- |" * (len(labels) + 1))
        props = [f"{100 * c.proportion:.2f}%" for c in res.cells]
        lines.append("| Selection proportion | " + " | ".join(props) + " |")
        for name in ESTIMATOR_NAMES:
            row = []
            for c in res.cells:
                if name in c.estimators:
                    st = c.estimators[name]
                    row.append(f"{st.bias * 1e3:.2f} ({st.mse * 1e3:.2f})")
                else:
                    row.append("-")
            lines.append(f"| {name.upper() if name != 'pice' else 'PiCE'} | " + " | ".join(row) + " |")
        lines.append("")
    return "\n".join(lines)
