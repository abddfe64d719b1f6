"""Lifetime distributions for binary splitting trees.

A lifetime law is specified as a finite mixture of hypoexponential
("generalized Erlang") components: with probability ``p_i`` an individual
walks through stages ``j = 1..n_i``, spending an independent
Exp(gamma_{i,j}) duration in each.  All built-in laws are normalized to
unit mean, so the birth rate ``delta`` is also the mean number of
offspring per individual.

The module owns validation (no silent rescaling -- a spec that does not
have unit mean within tolerance is rejected), Laplace transforms, the
per-stage expected occupancy ``q_{i,j} = p_i / gamma_{i,j}``, and samplers
for the forward simulation.  Samplers are deliberately more general than
validated phase-type specs: deterministic and tabulated inverse-CDF
lifetimes are supported so that insensitivity experiments can exercise
laws far outside the phase-type family.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "SpecValidationError",
    "PhaseComponent",
    "PhaseTypeSpec",
    "StageOccupancy",
    "validate_spec",
    "laplace_transform",
    "stage_occupancy",
    "LifetimeSampler",
    "PhaseTypeSampler",
    "DeterministicLifetime",
    "InverseCdfSampler",
    "BUILTIN_SPECS",
    "BUILTIN_SAMPLERS",
    "builtin_spec",
    "make_sampler",
    "spec_from_json",
    "spec_to_json",
]

WEIGHT_SUM_TOL = 1e-12
UNIT_MEAN_TOL = 1e-9


class SpecValidationError(ValueError):
    """A lifetime specification failed validation.

    ``field`` names the offending entry (e.g. ``components[1].rates[0]``)
    so callers can surface precise configuration errors.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class PhaseComponent:
    """One mixture component: weight ``p`` and per-stage rates ``gamma_j``."""

    weight: float
    stage_rates: tuple[float, ...]

    @property
    def mean(self) -> float:
        """Mean sojourn of the component's hypoexponential, sum of 1/gamma_j."""
        return sum(1.0 / g for g in self.stage_rates)


@dataclass(frozen=True)
class PhaseTypeSpec:
    """Validated unit-mean mixture of hypoexponential components.

    Instances are immutable; construction runs full validation, so any
    ``PhaseTypeSpec`` in hand satisfies: positive weights summing to one
    (within 1e-12), strictly positive finite stage rates, and overall
    mean one (within 1e-9).
    """

    components: tuple[PhaseComponent, ...]

    def __post_init__(self):
        _validate_components(self.components)

    @property
    def weights(self) -> tuple[float, ...]:
        return tuple(c.weight for c in self.components)

    @property
    def shape(self) -> tuple[int, ...]:
        """Number of stages per component, (n_1, ..., n_m)."""
        return tuple(len(c.stage_rates) for c in self.components)

    @property
    def n_stages(self) -> int:
        """Total stage count S = sum_i n_i (dimension of count vectors)."""
        return sum(self.shape)

    @property
    def mean(self) -> float:
        return sum(c.weight * c.mean for c in self.components)

    def flat_rates(self) -> tuple[float, ...]:
        """Stage rates in component-major order, length ``n_stages``."""
        return tuple(g for c in self.components for g in c.stage_rates)


def _validate_components(components: Sequence[PhaseComponent]) -> None:
    if len(components) == 0:
        raise SpecValidationError("components", "at least one component is required")
    for i, comp in enumerate(components):
        w = comp.weight
        if not (isinstance(w, (int, float)) and math.isfinite(w)):
            raise SpecValidationError(f"components[{i}].p", f"weight must be finite, got {w!r}")
        if w <= 0.0:
            raise SpecValidationError(f"components[{i}].p", f"weight must be positive, got {w!r}")
        if len(comp.stage_rates) == 0:
            raise SpecValidationError(f"components[{i}].rates", "at least one stage rate is required")
        for j, g in enumerate(comp.stage_rates):
            if not (isinstance(g, (int, float)) and math.isfinite(g)):
                raise SpecValidationError(
                    f"components[{i}].rates[{j}]", f"stage rate must be finite, got {g!r}"
                )
            if g <= 0.0:
                raise SpecValidationError(
                    f"components[{i}].rates[{j}]", f"stage rate must be positive, got {g!r}"
                )
    wsum = math.fsum(c.weight for c in components)
    if abs(wsum - 1.0) > WEIGHT_SUM_TOL:
        raise SpecValidationError(
            "components[*].p", f"mixture weights must sum to 1 within {WEIGHT_SUM_TOL:g}, got {wsum!r}"
        )
    mean = math.fsum(c.weight * c.mean for c in components)
    if abs(mean - 1.0) > UNIT_MEAN_TOL:
        raise SpecValidationError(
            "mean",
            f"spec mean must equal 1 within {UNIT_MEAN_TOL:g}, got {mean!r} "
            "(rescale the rates yourself; nothing is rescaled silently)",
        )


def validate_spec(components: Iterable) -> PhaseTypeSpec:
    """Build a validated ``PhaseTypeSpec`` from loosely-typed input.

    Accepts an existing spec, an iterable of ``PhaseComponent``, of
    ``(weight, rates)`` pairs, or of ``{"p": ..., "rates": [...]}`` dicts.
    Raises :class:`SpecValidationError` naming the offending field.
    """
    if isinstance(components, PhaseTypeSpec):
        return components
    built: list[PhaseComponent] = []
    for i, item in enumerate(components):
        if isinstance(item, PhaseComponent):
            built.append(item)
        elif isinstance(item, dict):
            try:
                p, rates = item["p"], item["rates"]
            except KeyError as exc:
                raise SpecValidationError(
                    f"components[{i}]", f"missing key {exc.args[0]!r} (need 'p' and 'rates')"
                ) from None
            built.append(PhaseComponent(float(p), tuple(float(g) for g in rates)))
        else:
            try:
                p, rates = item
            except (TypeError, ValueError):
                raise SpecValidationError(
                    f"components[{i}]", f"cannot interpret {item!r} as (weight, rates)"
                ) from None
            built.append(PhaseComponent(float(p), tuple(float(g) for g in rates)))
    return PhaseTypeSpec(tuple(built))


def laplace_transform(spec: PhaseTypeSpec, s):
    """Laplace transform ``E[exp(-s Q)]`` of the lifetime law at ``s >= 0``.

    For a hypoexponential mixture this is
    ``sum_i p_i prod_j gamma_ij / (gamma_ij + s)``.  Accepts a scalar or
    an array; negative arguments are rejected (the transform is only
    needed on the nonnegative half-line and blows up at -min(gamma)).
    """
    arr = np.asarray(s, dtype=float)
    if np.any(arr < 0.0):
        raise ValueError(f"laplace_transform requires s >= 0, got {s!r}")
    out = np.zeros_like(arr)
    for comp in spec.components:
        term = np.full_like(arr, comp.weight)
        for g in comp.stage_rates:
            term = term * (g / (g + arr))
        out = out + term
    if np.isscalar(s) or arr.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class StageOccupancy:
    """Expected time an individual spends in each stage, ``q_ij = p_i/gamma_ij``.

    The entries sum to the lifetime mean, i.e. to 1 for validated specs.
    """

    values: tuple[tuple[float, ...], ...]

    @property
    def flat(self) -> tuple[float, ...]:
        return tuple(q for row in self.values for q in row)

    @property
    def total(self) -> float:
        return math.fsum(self.flat)


def stage_occupancy(spec: PhaseTypeSpec) -> StageOccupancy:
    """Per-stage expected occupancy of a single lifetime (sums to 1)."""
    return StageOccupancy(
        tuple(tuple(c.weight / g for g in c.stage_rates) for c in spec.components)
    )


# ---------------------------------------------------------------------------
# Samplers


class LifetimeSampler:
    """Draws positive lifetime durations; reports its exact mean.

    Subclasses implement :meth:`draw_many`.  ``mean`` is analytic
    metadata (not estimated), used by experiment drivers to refuse
    configurations that require unit-mean lifetimes.
    """

    name: str = "lifetime"
    mean: float = float("nan")

    def draw(self, rng: np.random.Generator) -> float:
        return float(self.draw_many(rng, 1)[0])

    def draw_many(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def draw_batch(self, rng: np.random.Generator, n: int) -> list[float]:
        """Like :meth:`draw_many` but returning plain floats (hot-loop use)."""
        return self.draw_many(rng, n).tolist()

    def __repr__(self):  # pragma: no cover - cosmetic
        return f"{type(self).__name__}({self.name!r}, mean={self.mean:g})"


class PhaseTypeSampler(LifetimeSampler):
    """Samples lifetimes from a validated phase-type mixture spec."""

    def __init__(self, spec: PhaseTypeSpec, name: str = "phase-type"):
        self.spec = validate_spec(spec)
        self.name = name
        self.mean = self.spec.mean
        self._weights = np.asarray(self.spec.weights)
        self._rates = [np.asarray(c.stage_rates) for c in self.spec.components]

    def draw_many(self, rng: np.random.Generator, n: int) -> np.ndarray:
        out = np.zeros(n)
        if len(self._rates) == 1:
            which = np.zeros(n, dtype=np.intp)
        else:
            which = rng.choice(len(self._rates), size=n, p=self._weights)
        for i, rates in enumerate(self._rates):
            idx = np.nonzero(which == i)[0]
            if idx.size == 0:
                continue
            acc = np.zeros(idx.size)
            for g in rates:
                acc += rng.standard_exponential(idx.size) / g
            out[idx] = acc
        return out


class DeterministicLifetime(LifetimeSampler):
    """Every individual lives exactly ``duration`` (default 1)."""

    def __init__(self, duration: float = 1.0, name: str = "det1"):
        if not (duration > 0.0 and math.isfinite(duration)):
            raise SpecValidationError("duration", f"must be positive and finite, got {duration!r}")
        self.duration = float(duration)
        self.name = name
        self.mean = self.duration

    def draw_many(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.full(n, self.duration)

    def draw_batch(self, rng: np.random.Generator, n: int) -> list[float]:
        return [self.duration] * n


class InverseCdfSampler(LifetimeSampler):
    """Lifetimes via a tabulated quantile function (inverse CDF).

    ``grid`` is an increasing probability grid from 0 to 1 and
    ``quantiles`` the corresponding lifetime values; draws interpolate
    linearly, i.e. the law is the piecewise-linear quantile function
    through the table.  The reported mean is the exact integral of that
    interpolant (trapezoid rule on the probability grid), not a Monte
    Carlo estimate.
    """

    def __init__(self, grid, quantiles, name: str = "table"):
        u = np.asarray(grid, dtype=float)
        q = np.asarray(quantiles, dtype=float)
        if u.ndim != 1 or u.shape != q.shape or u.size < 2:
            raise SpecValidationError("grid", "grid and quantiles must be equal-length 1-D, size >= 2")
        if u[0] != 0.0 or u[-1] != 1.0 or np.any(np.diff(u) <= 0.0):
            raise SpecValidationError("grid", "grid must increase strictly from 0 to 1")
        if np.any(~np.isfinite(q)) or np.any(q < 0.0) or np.any(np.diff(q) < 0.0):
            raise SpecValidationError("quantiles", "quantiles must be finite, nonnegative, nondecreasing")
        if q[-1] <= 0.0:
            raise SpecValidationError("quantiles", "lifetime must be positive with positive probability")
        self._u = u
        self._q = q
        self.name = name
        self.mean = float(np.trapezoid(q, u))

    def draw_many(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.interp(rng.random(n), self._u, self._q)


# ---------------------------------------------------------------------------
# Built-in laws and serialization

BUILTIN_SPECS: dict[str, PhaseTypeSpec] = {
    # Exp(1): the memoryless baseline.
    "exp1": PhaseTypeSpec((PhaseComponent(1.0, (1.0,)),)),
    # Gamma(2, 2): two Exp(2) stages, unit mean, the lightest-tailed built-in.
    "gamma22": PhaseTypeSpec((PhaseComponent(1.0, (2.0, 2.0)),)),
    # Half/half mixture of Exp(2) and Exp(2/3): unit mean, overdispersed.
    "mix": PhaseTypeSpec((PhaseComponent(0.5, (2.0,)), PhaseComponent(0.5, (2.0 / 3.0,)))),
}


def builtin_spec(name: str) -> PhaseTypeSpec:
    """Look up a built-in phase-type spec; ``det1`` is *not* phase-type."""
    try:
        return BUILTIN_SPECS[name]
    except KeyError:
        known = ", ".join(sorted(BUILTIN_SPECS))
        raise SpecValidationError(
            "dist",
            f"{name!r} is not a built-in phase-type spec (known: {known}); "
            "note det1 is deterministic, not phase-type",
        ) from None


def make_sampler(dist) -> LifetimeSampler:
    """Resolve a sampler from a name, spec, or existing sampler.

    Names: any built-in spec name, or ``det1`` for the deterministic
    unit lifetime.
    """
    if isinstance(dist, LifetimeSampler):
        return dist
    if isinstance(dist, PhaseTypeSpec):
        return PhaseTypeSampler(dist)
    if isinstance(dist, str):
        if dist == "det1":
            return DeterministicLifetime(1.0)
        return PhaseTypeSampler(builtin_spec(dist), name=dist)
    raise SpecValidationError("dist", f"cannot interpret {dist!r} as a lifetime law")


BUILTIN_SAMPLERS: tuple[str, ...] = ("exp1", "gamma22", "mix", "det1")


def spec_from_json(text: str) -> PhaseTypeSpec:
    """Parse ``{"components": [{"p": ..., "rates": [...]}, ...]}``."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecValidationError("json", f"invalid JSON: {exc}") from None
    if not isinstance(obj, dict) or "components" not in obj:
        raise SpecValidationError("components", "top-level object must have a 'components' list")
    return validate_spec(obj["components"])


def spec_to_json(spec: PhaseTypeSpec) -> str:
    """Serialize a spec; round-trips bit-for-bit through :func:`spec_from_json`.

    Floats are emitted with ``repr`` (shortest round-trip form), so
    re-parsing reproduces exactly the same float bits.
    """
    obj = {
        "components": [
            {"p": c.weight, "rates": list(c.stage_rates)} for c in spec.components
        ]
    }
    return json.dumps(obj)
