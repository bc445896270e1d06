"""Bundled example studies used by the demos, the verification suite, and
the golden tests.  Each returns (population, design, rule config, scenarios).
"""

from __future__ import annotations

from .population import DesignSpec, PopulationSpec
from .rules import RuleConfig
from .simulation import Scenario


def enrichment_study_k2():
    """Two equal subpopulations under the threshold rule D1.

    Five scenarios spanning homogeneous benefit, partial benefit, benefit in
    one subpopulation only, no benefit, and qualitative interaction.
    """
    spec = PopulationSpec(k=2, prevalences=(0.5, 0.5))
    rule = RuleConfig(kind="D1", delta_star=0.3)
    design = DesignSpec(n1=100, n2=100, sigma2=1.0, rule=rule)
    scenarios = (
        Scenario("scenario-1", effects=(0.5, 0.5), sigma2=1.0),
        Scenario("scenario-2", effects=(0.5, 0.2), sigma2=1.0),
        Scenario("scenario-3", effects=(0.5, 0.0), sigma2=1.0),
        Scenario("scenario-4", effects=(0.0, 0.0), sigma2=1.0),
        Scenario("scenario-5", effects=(0.5, -0.2), sigma2=1.0),
    )
    return spec, design, rule, scenarios


def ordered_study_k3():
    """Three ordered subpopulations under the prefix rule D2 with monotone
    effects; exercises selections strictly inside the population."""
    spec = PopulationSpec(k=3, prevalences=(1 / 3, 1 / 3, 1 / 3))
    rule = RuleConfig(kind="D2", delta_star=0.2, monotone_effects_assumed=True)
    design = DesignSpec(n1=120, n2=120, sigma2=1.0, rule=rule)
    scenarios = (Scenario("monotone", effects=(0.5, 0.3, 0.1), sigma2=1.0),)
    return spec, design, rule, scenarios


def winner_study_k4():
    """Four subpopulations under pick-the-winner D3."""
    spec = PopulationSpec(k=4, prevalences=(0.25, 0.25, 0.25, 0.25))
    rule = RuleConfig(kind="D3")
    design = DesignSpec(n1=160, n2=160, sigma2=1.0, rule=rule)
    scenarios = (Scenario("graded", effects=(0.4, 0.3, 0.2, 0.1), sigma2=1.0),)
    return spec, design, rule, scenarios


def worked_example():
    """The two-subpopulation known-variance design used in the estimation
    walkthrough: 200 stage-1 patients, 100 stage-2, threshold 0.025."""
    spec = PopulationSpec(k=2, prevalences=(0.5, 0.5))
    rule = RuleConfig(kind="D1", delta_star=0.025)
    design = DesignSpec(n1=200, n2=100, sigma2=0.36**2, rule=rule)
    return spec, design, rule
