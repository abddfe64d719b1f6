"""Occupation times of binary splitting trees: simulation and exact theory.

Individuals live i.i.d. unit-mean lifetimes and give birth at constant
rate ``delta`` while alive, starting from a single ancestor.  The package
provides

* ``lifetime`` -- validated phase-type lifetime laws and general samplers,
* ``simulate`` -- an exact event-driven simulator with reproducible
  parallel Monte Carlo drivers,
* ``markov`` -- finite-state chains on stage-count vectors: generators,
  stationary laws, closed forms, and exact expected occupation times,
* ``analysis`` -- closed-form theory values and rate estimators,
* ``cli`` -- the ``occupancy`` command-line interface.
"""

from occupancy.analysis import (
    MalthusianRoot,
    Regime,
    TheoryValues,
    estimate_delta_from_AK,
    estimate_delta_from_T,
    expected_extinction_time,
    expected_occupation,
    malthusian_eta,
    mean_total_progeny,
    regime_of,
    theory_values,
)
from occupancy.lifetime import (
    BUILTIN_SAMPLERS,
    BUILTIN_SPECS,
    DeterministicLifetime,
    InverseCdfSampler,
    LifetimeSampler,
    PhaseComponent,
    PhaseTypeSampler,
    PhaseTypeSpec,
    SpecValidationError,
    StageOccupancy,
    builtin_spec,
    laplace_transform,
    make_sampler,
    spec_from_json,
    spec_to_json,
    stage_occupancy,
    validate_spec,
)
from occupancy.markov import (
    CapacityError,
    GeneratorMatrix,
    NumericalError,
    StateSpace,
    StationaryDist,
    WVector,
    build_branching_generator,
    build_population_process_generator,
    build_regeneration_generator,
    closed_form_pi_subcritical,
    closed_form_pi_supercritical,
    expected_occupation_exact,
    solve_stationary,
    solve_w,
)
from occupancy.simulate import (
    AgeVaryingBirth,
    BatchBirth,
    HomogeneousBirth,
    MonteCarloSummary,
    OccupationRecord,
    ReplicateFault,
    StepIntensity,
    StoppingPolicy,
    ThinningBoundError,
    default_policy,
    monte_carlo,
    replicate_rng,
    run_replicate,
)

__version__ = "0.1.0"
