"""Independent verification engine.

The conditional estimators in :mod:`enrichest.estimators` have a closed
form.  This module recomputes the same quantity a completely different way:
the conditional density of the stage-2 mean difference given the pooled
statistic and the selection event is integrated numerically over its
support.  Agreement between the two routes (and the density integrating to
one) is the core correctness check, exposed through the ``verify`` CLI
command and the test suite.

Quadrature is adaptive with a change of variables ``t = anchor + (1-u)/u``
for infinite endpoints, and every integrand is scaled by the density value
at the point of the support closest to the origin so the numbers handed to
the integrator stay O(1) even for far-tail truncations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from typing import Callable, Optional

import numpy as np
from scipy.integrate import quad
from scipy.special import ndtr

from .errors import ConvergenceFailure, ShapeError
from .estimators import truncnorm_correction, umvcue
from .population import DesignSpec, PopulationSpec
from .rules import ExtendedInterval, RuleConfig

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class QuadratureSpec:
    """Tolerances and subdivision cap for the adaptive integrator."""

    abs_tol: float = 1e-13
    rel_tol: float = 1e-11
    max_subdivisions: int = 200

    def __post_init__(self) -> None:
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise ShapeError("tolerances must be positive")
        if self.rel_tol < 1e-13:
            raise ShapeError("rel_tol below 1e-13 is not achievable in double precision")
        if self.max_subdivisions < 10:
            raise ShapeError("max_subdivisions must be at least 10")


def _quad(fn: Callable[[float], float], lo: float, hi: float, q: QuadratureSpec) -> float:
    res = quad(
        fn,
        lo,
        hi,
        epsabs=q.abs_tol,
        epsrel=q.rel_tol,
        limit=q.max_subdivisions,
        full_output=True,
    )
    if len(res) > 3:  # quad appends an explanation message on failure
        raise ConvergenceFailure(
            f"quadrature did not converge on ({lo}, {hi}): {res[3]}"
        )
    return float(res[0])


def _scaled_moments(a: float, b: float, q: QuadratureSpec) -> tuple[float, float, float]:
    """Integrals of ``g`` and ``t*g`` over (a, b), ``g(t) = phi(t)/phi(anchor)``.

    Returns ``(i0, i1, anchor)`` where the anchor is the point of the support
    closest to the origin, so both integrands are O(1) at their peak.
    """
    if a > 0:
        anchor = a
    elif b < 0:
        anchor = b
    else:
        anchor = 0.0
    c2 = anchor * anchor

    def g(t: float) -> float:
        return math.exp(0.5 * (c2 - t * t))

    def tg(t: float) -> float:
        return t * math.exp(0.5 * (c2 - t * t))

    segments: list[tuple[Callable, float, float]] = []

    def add_finite(fn: Callable, lo: float, hi: float) -> None:
        # split at the anchor so the mass always touches a segment endpoint
        if lo < anchor < hi:
            segments.append((fn, lo, anchor))
            segments.append((fn, anchor, hi))
        else:
            segments.append((fn, lo, hi))

    def add_upper_tail(fn: Callable, lo: float) -> None:
        segments.append(
            (lambda u, f=fn, t0=lo: f(t0 + (1.0 - u) / u) / (u * u), 0.0, 1.0)
        )

    def add_lower_tail(fn: Callable, hi: float) -> None:
        segments.append(
            (lambda u, f=fn, t0=hi: f(t0 - (1.0 - u) / u) / (u * u), 0.0, 1.0)
        )

    i = [0.0, 0.0]
    for which, fn in enumerate((g, tg)):
        segments.clear()
        if math.isinf(a) and math.isinf(b):
            add_lower_tail(fn, 0.0)
            add_upper_tail(fn, 0.0)
        elif math.isinf(b):
            add_finite(fn, a, anchor) if a < anchor else None
            add_upper_tail(fn, max(a, anchor))
            if a < anchor:
                pass  # finite piece already queued by add_finite
        elif math.isinf(a):
            add_lower_tail(fn, min(b, anchor))
            if b > anchor:
                add_finite(fn, anchor, b)
        else:
            add_finite(fn, a, b)
        i[which] = math.fsum(_quad(f, lo, hi, q) for f, lo, hi in segments)
    return i[0], i[1], anchor


def conditional_mean_quadrature(
    x_pooled: float,
    bounds: ExtendedInterval,
    v: float,
    r: float,
    q: QuadratureSpec = QuadratureSpec(),
) -> float:
    """Conditional expectation of the stage-2 mean difference by quadrature.

    Given the pooled statistic ``x_pooled`` and the selection interval
    (L, U) for the stage-1 aggregate, the stage-2 mean difference is a
    normal with mean ``x_pooled`` and standard deviation ``v*sqrt(r)``
    truncated to ``((1+r)x - rU, (1+r)x - rL)``.  This integrates that
    truncated density directly, with no reference to the closed form.
    """
    if not (v > 0 and r > 0):
        raise ShapeError("v and r must be positive")
    x = float(x_pooled)
    if bounds.is_unbounded:
        return x  # untruncated normal: the mean is exact
    s = math.sqrt(r) * v
    # standardized support of the stage-2 mean difference
    a = math.sqrt(r) * (x - bounds.upper) / v
    b = math.sqrt(r) * (x - bounds.lower) / v
    i0, i1, _ = _scaled_moments(a, b, q)
    if i0 <= 0.0:
        raise ConvergenceFailure("support mass evaluated to zero; bounds too extreme")
    return x + s * (i1 / i0)


def _interval_probability(z_lo: float, z_hi: float) -> float:
    """P(z_lo < Z < z_hi) via the tail with less cancellation."""
    if z_lo + z_hi >= 0.0:
        return float(ndtr(-z_lo) - ndtr(-z_hi))
    return float(ndtr(z_hi) - ndtr(z_lo))


def density_normalization_check(
    x_pooled: float,
    bounds: ExtendedInterval,
    v: float,
    r: float,
    q: QuadratureSpec = QuadratureSpec(),
) -> float:
    """|integral of the conditional density - 1| over its support.

    The density's normalizing constant is the closed-form normal interval
    probability; integrating the density numerically and comparing with one
    therefore checks that constant against quadrature.
    """
    if not (v > 0 and r > 0):
        raise ShapeError("v and r must be positive")
    x = float(x_pooled)
    a = math.sqrt(r) * (x - bounds.upper) / v
    b = math.sqrt(r) * (x - bounds.lower) / v
    i0, _, anchor = _scaled_moments(a, b, q)
    log_mass = math.log(i0) - 0.5 * anchor * anchor - _LOG_SQRT_2PI
    prob = _interval_probability(a, b)
    if prob <= 0.0:
        raise ConvergenceFailure("interval probability underflowed to zero")
    return abs(math.expm1(log_mass - math.log(prob)))


def mc_conditional_bias(
    scenario,
    spec: PopulationSpec,
    design: DesignSpec,
    rule_cfg: RuleConfig,
    reps: int,
    seed: int,
    *,
    mode: str = "per-patient",
    workers: int = 1,
):
    """Monte Carlo conditional bias/MSE table (delegates to the simulator)."""
    from .simulation import RngPolicy, run_scenario

    return run_scenario(
        scenario,
        spec,
        design,
        rule_cfg,
        reps,
        RngPolicy(master_seed=seed),
        mode=mode,
        workers=workers,
    )


# --------------------------------------------------------------------------
# random configurations for the equivalence sweep
# --------------------------------------------------------------------------


def random_configurations(
    n: int, seed: int, z_max: float = 8.0
) -> list[tuple[float, ExtendedInterval, float, float]]:
    """Random (x, bounds, v, r) tuples spanning one-sided, two-sided, and
    same-sign far-tail truncations with standardized bounds up to z_max."""
    rng = np.random.default_rng(seed)
    configs = []
    for _ in range(n):
        v = float(np.exp(rng.uniform(np.log(0.02), np.log(2.0))))
        r = float(np.exp(rng.uniform(np.log(0.1), np.log(10.0))))
        x = float(rng.uniform(-2.0, 2.0))
        kind = int(rng.integers(0, 4))
        if kind == 0:
            z = np.sort(rng.uniform(-z_max, z_max, size=2))
            while z[1] - z[0] < 1e-3:
                z = np.sort(rng.uniform(-z_max, z_max, size=2))
            z_lo, z_hi = float(z[0]), float(z[1])
        elif kind == 1:
            z_lo, z_hi = -math.inf, float(rng.uniform(-z_max, z_max))
        elif kind == 2:
            z_lo, z_hi = float(rng.uniform(-z_max, z_max)), math.inf
        else:
            lo = rng.uniform(3.0, z_max - 0.5)
            hi = lo + rng.uniform(0.5, 2.0)
            if rng.random() < 0.5:
                lo, hi = -hi, -lo
            z_lo, z_hi = float(lo), float(hi)
        scale = v / math.sqrt(r)
        lower = -math.inf if math.isinf(z_lo) else x + scale * z_lo
        upper = math.inf if math.isinf(z_hi) else x + scale * z_hi
        configs.append((x, ExtendedInterval(lower, upper), v, r))
    return configs


def oracle_equivalence_sweep(
    n: int, seed: int, q: QuadratureSpec = QuadratureSpec()
) -> float:
    """Largest relative disagreement between the closed form and quadrature
    over ``n`` random configurations.

    Relative error is measured against ``max(|closed|, |quadrature|,
    v*sqrt(r))``; the last term is the natural scale of the stage-2 mean,
    which keeps the measure meaningful when the estimate crosses zero.
    """
    worst = 0.0
    for x, bounds, v, r in random_configurations(n, seed):
        closed = umvcue(x, bounds, v, r)
        numeric = conditional_mean_quadrature(x, bounds, v, r, q)
        scale = max(abs(closed), abs(numeric), v * math.sqrt(r))
        worst = max(worst, abs(closed - numeric) / scale)
    return worst


# --------------------------------------------------------------------------
# verification suite (drives the `verify` CLI command)
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    metric: float
    threshold: float
    detail: str = ""

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "metric": self.metric,
            "threshold": self.threshold,
            "detail": self.detail,
        }


def load_kernel_reference() -> list[tuple[float, float, float]]:
    """Frozen high-precision reference values for the correction kernel."""
    text = (resources.files("enrichest") / "data/kernel_reference.json").read_text()
    rows = json.loads(text)

    def num(s):
        if s == "-inf":
            return -math.inf
        if s == "inf":
            return math.inf
        return float(s)

    return [(num(zl), num(zu), float(val)) for zl, zu, val in rows]


def kernel_reference_check() -> CheckResult:
    worst = 0.0
    for z_lo, z_hi, ref in load_kernel_reference():
        got = truncnorm_correction(z_lo, z_hi)
        err = abs(got - ref) / max(abs(ref), 1e-300) if ref != 0.0 else abs(got)
        worst = max(worst, err)
    return CheckResult("kernel-reference", worst <= 1e-10, worst, 1e-10)


def kernel_domain_check(z_limit: float = 38.0) -> CheckResult:
    zs = np.arange(-z_limit, z_limit + 0.5, 1.0)
    bad = 0
    for i, z_lo in enumerate(zs):
        for z_hi in zs[i + 1 :]:
            val = truncnorm_correction(float(z_lo), float(z_hi))
            if not math.isfinite(val):
                bad += 1
        for val in (
            truncnorm_correction(float(z_lo), math.inf),
            truncnorm_correction(-math.inf, float(z_lo)),
        ):
            if not math.isfinite(val):
                bad += 1
    return CheckResult("kernel-domain", bad == 0, float(bad), 0.0)


def normalization_check(n: int, seed: int) -> CheckResult:
    worst = 0.0
    for x, bounds, v, r in random_configurations(n, seed):
        worst = max(worst, density_normalization_check(x, bounds, v, r))
    return CheckResult("density-normalization", worst <= 1e-9, worst, 1e-9)


def equivalence_check(n: int, seed: int) -> CheckResult:
    worst = oracle_equivalence_sweep(n, seed)
    return CheckResult(f"oracle-equivalence-{n}", worst <= 1e-8, worst, 1e-8)


def _study_checks(reps: int, seed: int, workers: int) -> list[CheckResult]:
    from .population import aggregate_effect
    from .simulation import RngPolicy, run_scenario
    from .studies import enrichment_study_k2, ordered_study_k3, winner_study_k4

    checks: list[CheckResult] = []
    for study_name, (spec, design, rule_cfg, scenarios) in (
        ("enrichment-k2", enrichment_study_k2()),
        ("ordered-k3", ordered_study_k3()),
        ("winner-k4", winner_study_k4()),
    ):
        policy = RngPolicy(master_seed=seed)
        for idx, scenario in enumerate(scenarios):
            result = run_scenario(
                scenario,
                spec,
                design,
                rule_cfg,
                reps,
                policy.spawn(idx),
                workers=workers,
            )
            worst_sig = 0.0
            worst_gap = 0.0
            for cell in result.cells:
                if cell.outcome.is_empty or cell.count < 1000:
                    continue
                u = cell.estimators["umvcue"]
                worst_sig = max(worst_sig, abs(u.bias) / u.se)
                worst_gap = max(
                    worst_gap, abs(cell.estimators["pice"].bias - u.bias) * 1e3
                )
            tag = f"{study_name}/{scenario.name}"
            checks.append(
                CheckResult(f"umvcue-unbiased[{tag}]", worst_sig <= 3.0, worst_sig, 3.0)
            )
            checks.append(
                CheckResult(f"pice-tracks-umvcue[{tag}]", worst_gap <= 1.0, worst_gap, 1.0)
            )
            if rule_cfg.kind == "D1":
                # closed-form check: stage-1 full-population mean is normal,
                # so the continue probability is an explicit CDF value
                delta_f = aggregate_effect(
                    PopulationSpec(spec.k, spec.prevalences, scenario.effects),
                    result.cells[0].outcome,
                )
                sd = math.sqrt(4.0 * scenario.sigma2 / design.n1)
                p_true = float(ndtr((delta_f - design.delta_star) / sd))
                p_hat = result.cells[0].proportion
                se = math.sqrt(max(p_hat * (1 - p_hat), 1e-12) / reps)
                z = abs(p_hat - p_true) / se
                checks.append(
                    CheckResult(f"continue-prob-closed-form[{tag}]", z <= 4.0, z, 4.0)
                )
    return checks


def run_verification(
    level: str = "fast", seed: int = 20260810, *, workers: int = 1
) -> list[CheckResult]:
    """The pass/fail battery behind ``enrich-est verify``.

    ``fast`` covers kernel accuracy, density normalization, and a 100-config
    equivalence sweep; ``full`` extends the sweep to 1000 configurations and
    adds Monte Carlo unbiasedness runs for all bundled studies.
    """
    if level not in ("fast", "full"):
        raise ShapeError(f"unknown verification level {level!r}")
    checks = [
        kernel_reference_check(),
        kernel_domain_check(),
        normalization_check(100, seed),
        equivalence_check(100, seed + 1),
    ]
    if level == "full":
        checks.append(equivalence_check(1000, seed + 2))
        checks.extend(_study_checks(reps=100_000, seed=seed + 3, workers=workers))
    return checks
