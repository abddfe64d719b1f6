"""Closed-form occupation-time theory and rate estimators.

For a binary splitting tree with birth rate ``delta`` and any unit-mean
lifetime law, the expected total time the population spends at level K is

    E(A_K) = delta^(K-1) / (K * max(1, delta)^K),

independent of the lifetime law beyond its mean.  This module evaluates
that family of values and everything that follows from it: the expected
extinction time for subcritical trees, the Malthusian growth rate and
extinction probability for supercritical ones, and the inverse maps that
recover ``delta`` from an observed occupation time or extinction time.

All scalar root-finding is plain bisection on monotone functions --
robustness over speed; every problem here is one-dimensional and cheap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

from occupancy.lifetime import PhaseTypeSpec, laplace_transform, stage_occupancy

__all__ = [
    "Regime",
    "TheoryValues",
    "MalthusianRoot",
    "regime_of",
    "expected_occupation",
    "expected_extinction_time",
    "malthusian_eta",
    "estimate_delta_from_AK",
    "estimate_delta_from_T",
    "local_time_regeneration_intensity",
    "mean_total_progeny",
    "theory_values",
]

BISECT_TOL = 1e-12


class Regime(Enum):
    SUBCRITICAL = "subcritical"
    CRITICAL = "critical"
    SUPERCRITICAL = "supercritical"


def regime_of(delta: float) -> Regime:
    if not (delta >= 0.0 and math.isfinite(delta)):
        raise ValueError(f"birth rate must be finite and >= 0, got {delta!r}")
    if delta < 1.0:
        return Regime.SUBCRITICAL
    if delta == 1.0:
        return Regime.CRITICAL
    return Regime.SUPERCRITICAL


def expected_occupation(delta: float, k: int) -> float:
    """Expected total time at population level ``k``, any unit-mean lifetime.

    ``delta^(k-1) / (k * max(1, delta)^k)``; at ``delta = 0`` the ancestor
    is never replaced, so level 1 collects exactly its unit lifetime and
    higher levels are never reached.
    """
    regime_of(delta)  # validates delta
    if not isinstance(k, (int,)) or isinstance(k, bool) or k < 1:
        raise ValueError(f"level must be an integer >= 1, got {k!r}")
    top = 1.0 if k == 1 else delta ** (k - 1)
    return top / (k * max(1.0, delta) ** k)


def expected_extinction_time(delta: float) -> float:
    """Mean extinction time ``-log(1-delta)/delta`` of a subcritical tree.

    Defined for ``0 <= delta < 1`` (value 1 at ``delta = 0`` by
    continuity); for ``delta >= 1`` extinction is not certain or the mean
    diverges, so the request is rejected.
    """
    if regime_of(delta) is not Regime.SUBCRITICAL:
        raise ValueError(
            f"mean extinction time diverges for delta >= 1 (got delta={delta!r})"
        )
    if delta == 0.0:
        return 1.0
    return -math.log1p(-delta) / delta


def mean_total_progeny(delta: float) -> float:
    """Expected total number ever born (ancestor included), ``1/(1-delta)``."""
    if regime_of(delta) is not Regime.SUBCRITICAL:
        raise ValueError(f"mean progeny is infinite for delta >= 1 (got delta={delta!r})")
    return 1.0 / (1.0 - delta)


def _bisect(f, lo: float, hi: float, *, tol: float = BISECT_TOL, maxiter: int = 300) -> float:
    """Bisection for a sign change of ``f`` on [lo, hi]; monotone callers."""
    flo, fhi = f(lo), f(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if (flo > 0.0) == (fhi > 0.0):
        raise ValueError(f"no sign change on [{lo!r}, {hi!r}]: f={flo!r}, {fhi!r}")
    for _ in range(maxiter):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi or hi - lo <= tol * max(1.0, abs(mid)):
            break
        fmid = f(mid)
        if fmid == 0.0:
            return mid
        if (fmid > 0.0) == (flo > 0.0):
            lo, flo = mid, fmid
        else:
            hi, fhi = mid, fmid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class MalthusianRoot:
    """Growth rate ``eta`` with extinction probability ``z = 1 - eta/delta``."""

    eta: float
    z: float
    residual: float


def malthusian_eta(spec: PhaseTypeSpec, delta: float) -> MalthusianRoot:
    """Solve ``delta * (1 - L_Q(eta)) / eta = 1`` for the growth rate.

    Requires ``delta > 1`` (supercritical).  The left side is strictly
    decreasing in ``eta`` with limit ``delta`` at 0+ and value
    ``1 - L_Q(delta) < 1`` at ``eta = delta``, so bisection on
    ``(0, delta]`` is safe.  The achieved residual is checked against
    1e-12 and returned.
    """
    if regime_of(delta) is not Regime.SUPERCRITICAL:
        raise ValueError(f"Malthusian rate requires delta > 1, got {delta!r}")

    def f(eta: float) -> float:
        return delta * (1.0 - laplace_transform(spec, eta)) / eta - 1.0

    eta = _bisect(f, 1e-12, delta, tol=1e-15)
    residual = abs(f(eta))
    if residual > 1e-12:
        raise ArithmeticError(
            f"Malthusian root did not meet residual 1e-12 (got {residual:.3e})"
        )
    return MalthusianRoot(eta=eta, z=1.0 - eta / delta, residual=residual)


def estimate_delta_from_AK(a_k: float, k: int, regime: Regime) -> float:
    """Invert ``E(A_K)`` for ``delta`` under a declared regime.

    Subcritical: ``delta = (K * a)^(1/(K-1))``; supercritical:
    ``delta = 1/(K * a)``.  Level 1 is rejected -- ``E(A_1)`` equals
    ``1/max(1, delta)``, which carries no information below criticality.
    The critical regime is rejected too (``E(A_K) = 1/K`` identically).
    """
    if not isinstance(k, int) or isinstance(k, bool) or k < 1:
        raise ValueError(f"level must be an integer >= 1, got {k!r}")
    if k == 1:
        raise ValueError("level 1 occupation cannot identify delta; use K >= 2")
    if not (a_k > 0.0 and math.isfinite(a_k)):
        raise ValueError(f"occupation time must be positive and finite, got {a_k!r}")
    if regime is Regime.SUBCRITICAL:
        return (k * a_k) ** (1.0 / (k - 1))
    if regime is Regime.SUPERCRITICAL:
        return 1.0 / (k * a_k)
    raise ValueError("critical regime has E(A_K) = 1/K for every delta; not invertible")


def estimate_delta_from_T(t: float) -> float:
    """Largest solution of ``1 - delta = exp(-delta t)`` on [0, 1).

    This inverts the subcritical mean extinction time: observations
    ``t <= 1`` map to 0 (the equation has no positive root there).
    Bisection with absolute tolerance 1e-12.
    """
    if not (t >= 0.0 and math.isfinite(t)):
        raise ValueError(f"extinction time must be finite and >= 0, got {t!r}")
    if t <= 1.0:
        return 0.0

    def g(delta: float) -> float:
        # 1 - delta - exp(-delta*t), written with expm1 for small delta
        return -delta - math.expm1(-delta * t)

    # g > 0 just above 0 (slope t-1 > 0), g(1) = -exp(-t) < 0
    return _bisect(g, 1e-12, 1.0, tol=1e-13)


def local_time_regeneration_intensity(spec: PhaseTypeSpec) -> float:
    """Rate at which a sole surviving individual's death regenerates it.

    Computed the long way round -- final-stage occupancy times
    final-stage rate, summed over components -- as a checksum of the
    occupancy bookkeeping; algebraically this telescopes to
    ``sum_i p_i = 1`` for every valid spec.
    """
    occ = stage_occupancy(spec)
    return math.fsum(
        occ.values[i][-1] * comp.stage_rates[-1] for i, comp in enumerate(spec.components)
    )


@dataclass(frozen=True)
class TheoryValues:
    """Bundle of closed-form values for one ``delta`` (and optional spec)."""

    delta: float
    regime: Regime
    occupation: tuple[float, ...]  # E(A_K), K = 1..len
    extinction_time: float | None  # subcritical only
    eta: float | None  # supercritical only, needs a spec
    z: float | None

    def occupation_at(self, k: int) -> float:
        return self.occupation[k - 1]


def theory_values(delta: float, k_max: int = 8, spec: PhaseTypeSpec | None = None) -> TheoryValues:
    """Evaluate the closed forms on levels ``1..k_max``.

    ``spec`` is only needed above criticality, where the Malthusian rate
    depends on the lifetime law (everything else does not).
    """
    regime = regime_of(delta)
    occ = tuple(expected_occupation(delta, k) for k in range(1, k_max + 1))
    ext = expected_extinction_time(delta) if regime is Regime.SUBCRITICAL else None
    eta = z = None
    if regime is Regime.SUPERCRITICAL and spec is not None:
        root = malthusian_eta(spec, delta)
        eta, z = root.eta, root.z
    return TheoryValues(
        delta=delta, regime=regime, occupation=occ, extinction_time=ext, eta=eta, z=z
    )
