"""Finite-state chains on stage-count vectors for splitting trees.

A population whose lifetime law is a phase-type mixture is a Markov chain
on count vectors ``k = (k_{i,j})``: ``k_{i,j}`` individuals currently sit
in stage ``j`` of component ``i``.  Stage ``j`` of component ``i``
advances at rate ``k_{i,j} * gamma_{i,j}`` (death if ``j`` is the final
stage), and the whole population of size ``K`` gives birth at rate
``K * delta``, the newborn entering stage ``(l, 1)`` with probability
``p_l``.

Three chains are built here, all sharing that transition core:

* the **branching** chain itself, absorbing at the empty state, with
  births out of the truncation level killed (sent to an explicit sink);
* the **regeneration** chain for ``delta < 1``, where the death of a sole
  surviving individual immediately re-seeds a fresh one -- its stationary
  law has the closed form ``pi_k = C (K-1)! delta^(K-1) prod q^k / k!``
  with ``q_{i,j} = p_i/gamma_{i,j}`` and ``C = -delta/log(1-delta)``;
* the **population** chain ``P_N`` for supercritical and critical rates,
  living on levels ``1..N``: a birth at level ``N`` re-routes to a single
  individual in stage ``(l, 1)``, and the sole individual's death jumps
  to a level-``N`` configuration drawn from Multinomial(N, w) -- its
  closed form is ``pi_k = L_N (K-1)! prod w^k / k!`` with
  ``L_N = 1/(1 + 1/2 + ... + 1/N)``.

The ``w`` vector solves a per-stage fixed-point system coupled through
the scalar ``D = sum_l w_{l,n_l} gamma_{l,n_l}``; at ``delta = 1`` it
collapses to the stage occupancy ``q``.

Expected occupation times of the transient branching chain are computed
exactly by a block-tridiagonal solve over population levels (levels only
couple to their neighbours), with one step of iterative refinement; at
criticality the truncation bias is first order in ``1/N`` and is removed
by Richardson extrapolation over ``N`` and ``2N``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lu_factor, lu_solve
from scipy.sparse.linalg import splu

from occupancy.lifetime import PhaseTypeSpec, stage_occupancy

__all__ = [
    "CapacityError",
    "NumericalError",
    "StateSpace",
    "GeneratorMatrix",
    "StationaryDist",
    "WVector",
    "enumerate_states",
    "build_branching_generator",
    "build_regeneration_generator",
    "build_population_process_generator",
    "closed_form_pi_subcritical",
    "closed_form_pi_supercritical",
    "subcritical_normalizer",
    "subcritical_level_marginal",
    "harmonic_normalizer",
    "supercritical_level_marginal",
    "solve_w",
    "solve_stationary",
    "balance_residuals",
    "expected_occupation_exact",
    "state_to_nested",
    "generator_to_triplet_csv",
    "distribution_to_json",
]

logger = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-12
STATIONARY_RESIDUAL_TOL = 1e-10
W_RESIDUAL_TOL = 1e-10
DEFAULT_MAX_STATES = 2_000_000
# dense per-level LU pivots; ~1.3 GB of float64 at the default
PIVOT_BUDGET_DOUBLES = 160_000_000


class CapacityError(ValueError):
    """A requested enumeration exceeds the configured state budget."""


class NumericalError(ArithmeticError):
    """A linear solve or iteration failed to meet its tolerance."""


# ---------------------------------------------------------------------------
# State enumeration


def _compositions(total: int, parts: int):
    """Weak compositions of ``total`` into ``parts`` slots, first slot descending."""
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def _level_count(k: int, parts: int) -> int:
    return math.comb(k + parts - 1, parts - 1)


class StateSpace:
    """Stage-count vectors enumerated level by level (graded lexicographic).

    States are flat tuples in component-major stage order; within a level
    they appear in lexicographic order with the first coordinate
    descending, so each level occupies one contiguous slice.
    """

    def __init__(self, spec: PhaseTypeSpec, min_level: int, max_level: int,
                 states: list, level_start: list):
        self.spec = spec
        self.min_level = min_level
        self.max_level = max_level
        self.states = states
        self._level_start = level_start  # offsets, indexed by K - min_level; sentinel at end
        self._index = {s: i for i, s in enumerate(states)}

    @property
    def size(self) -> int:
        return len(self.states)

    def level_slice(self, k: int) -> slice:
        if not (self.min_level <= k <= self.max_level):
            raise ValueError(f"level {k} outside [{self.min_level}, {self.max_level}]")
        i = k - self.min_level
        return slice(self._level_start[i], self._level_start[i + 1])

    def index_of(self, state) -> int:
        return self._index[tuple(state)]

    def level_of(self, state) -> int:
        return sum(state)


def enumerate_states(spec: PhaseTypeSpec, max_level: int, *, min_level: int = 1,
                     max_states: int = DEFAULT_MAX_STATES) -> StateSpace:
    """Enumerate all count vectors with ``min_level <= sum(k) <= max_level``.

    The per-level count is ``C(K+S-1, S-1)`` (stars and bars over the
    ``S`` flat stages); the total is checked against ``max_states``
    before anything is materialized.
    """
    if max_level < min_level or min_level < 0:
        raise ValueError(f"bad level range [{min_level}, {max_level}]")
    s = spec.n_stages
    total = sum(_level_count(k, s) for k in range(min_level, max_level + 1))
    if total > max_states:
        raise CapacityError(
            f"state space needs {total} states for levels [{min_level}, {max_level}] "
            f"with {s} stages, exceeding the budget of {max_states}"
        )
    states: list = []
    level_start = []
    for k in range(min_level, max_level + 1):
        level_start.append(len(states))
        states.extend(_compositions(k, s))
    level_start.append(len(states))
    return StateSpace(spec, min_level, max_level, states, level_start)


# ---------------------------------------------------------------------------
# Transition kernel shared by every builder


class _Kernel:
    """Flat-stage bookkeeping: rates, component boundaries, birth entries."""

    def __init__(self, spec: PhaseTypeSpec, delta: float):
        if not (delta >= 0.0 and math.isfinite(delta)):
            raise ValueError(f"birth rate must be finite and >= 0, got {delta!r}")
        self.spec = spec
        self.delta = delta
        self.gamma = spec.flat_rates()
        self.s = spec.n_stages
        shape = spec.shape
        self.first_of = []
        self.is_final = []
        pos = 0
        for n_i in shape:
            self.first_of.append(pos)
            self.is_final.extend([False] * (n_i - 1) + [True])
            pos += n_i
        self.weights = spec.weights

    def advances_and_deaths(self, k: tuple):
        """Yield ('advance', rate, target) and ('death', rate, target) from ``k``."""
        for s_idx, count in enumerate(k):
            if count == 0:
                continue
            rate = count * self.gamma[s_idx]
            if self.is_final[s_idx]:
                target = k[:s_idx] + (count - 1,) + k[s_idx + 1:]
                yield "death", rate, target
            else:
                target = (k[:s_idx] + (count - 1, k[s_idx + 1] + 1) + k[s_idx + 2:])
                yield "advance", rate, target

    def births(self, k: tuple):
        """Yield ('birth', rate, target) for each component, rate K*delta*p_l."""
        if self.delta == 0.0:
            return
        level = sum(k)
        base = level * self.delta
        for l, first in enumerate(self.first_of):
            target = k[:first] + (k[first] + 1,) + k[first + 1:]
            yield "birth", base * self.weights[l], target


# ---------------------------------------------------------------------------
# Generators


@dataclass
class GeneratorMatrix:
    """A CTMC generator over a :class:`StateSpace` (plus optional sink).

    ``kind`` is one of ``"branching"`` (absorbing at empty, boundary
    births killed into ``sink_index``), ``"regeneration"`` (sole death
    re-seeds, subcritical), ``"population"`` (the restricted chain P_N).
    Every row sums to zero within build tolerance.
    """

    kind: str
    space: StateSpace
    matrix: sp.csr_matrix
    delta: float
    sink_index: int | None = None
    truncation_level: int | None = None
    w_flat: tuple | None = None

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def max_row_sum(self) -> float:
        return float(np.abs(self.matrix @ np.ones(self.size)).max())


def _finish_generator(kind, space, entries, diag, delta, sink_index=None,
                      truncation_level=None, w_flat=None) -> GeneratorMatrix:
    n = space.size + (1 if sink_index is not None else 0)
    rows, cols, vals = entries
    for i, d in enumerate(diag):
        if d != 0.0:
            rows.append(i)
            cols.append(i)
            vals.append(-d)
    m = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    gen = GeneratorMatrix(kind=kind, space=space, matrix=m, delta=delta,
                          sink_index=sink_index, truncation_level=truncation_level,
                          w_flat=w_flat)
    scale = max(1.0, float(np.abs(m.diagonal()).max()) if n else 1.0)
    if gen.max_row_sum() > ROW_SUM_TOL * scale:
        raise NumericalError(
            f"generator rows do not sum to zero: max |row sum| = {gen.max_row_sum():.3e}"
        )
    return gen


def build_branching_generator(spec: PhaseTypeSpec, delta: float, max_level: int,
                              *, max_states: int = DEFAULT_MAX_STATES) -> GeneratorMatrix:
    """The absorbing branching chain on levels 0..max_level.

    The empty state (level 0) is absorbing; birth events at
    ``max_level`` are killed -- their rate leaves through an explicit
    sink state appended after the enumerated space, so rows still sum
    to zero and the restriction of the chain to levels ``<= max_level``
    is exactly sub-Markovian.
    """
    space = enumerate_states(spec, max_level, min_level=0, max_states=max_states)
    kern = _Kernel(spec, delta)
    sink = space.size
    rows: list = []
    cols: list = []
    vals: list = []
    diag = [0.0] * space.size
    for i, k in enumerate(space.states):
        level = sum(k)
        if level == 0:
            continue  # absorbing
        out = 0.0
        for _, rate, target in kern.advances_and_deaths(k):
            if rate == 0.0:
                continue
            rows.append(i)
            cols.append(space.index_of(target))
            vals.append(rate)
            out += rate
        for _, rate, target in kern.births(k):
            if rate == 0.0:
                continue
            rows.append(i)
            cols.append(sink if level == max_level else space.index_of(target))
            vals.append(rate)
            out += rate
        diag[i] = out
    diag.append(0.0)  # sink row is absorbing too
    return _finish_generator("branching", space, (rows, cols, vals), diag, delta,
                             sink_index=sink, truncation_level=max_level)


def build_regeneration_generator(spec: PhaseTypeSpec, delta: float, n_trunc: int,
                                 *, max_states: int = DEFAULT_MAX_STATES) -> GeneratorMatrix:
    """The subcritical regeneration chain truncated at ``n_trunc``.

    The death of the sole surviving individual (a final-stage death at
    level 1) re-seeds a fresh individual in stage ``(l, 1)`` with
    probability ``p_l`` -- transitions back into level 1.  Truncation
    kills births out of level ``n_trunc`` (the chain stays put): by the
    partial balance of the closed form, the truncated chain's stationary
    law is exactly the closed form restricted to levels ``<= n_trunc``
    and renormalized.
    """
    if not (0.0 <= delta < 1.0):
        raise ValueError(f"regeneration chain requires 0 <= delta < 1, got {delta!r}")
    space = enumerate_states(spec, n_trunc, min_level=1, max_states=max_states)
    kern = _Kernel(spec, delta)
    rows: list = []
    cols: list = []
    vals: list = []
    diag = [0.0] * space.size
    for i, k in enumerate(space.states):
        level = sum(k)
        out = 0.0
        for event, rate, target in kern.advances_and_deaths(k):
            if rate == 0.0:
                continue
            if event == "death" and level == 1:
                # sole individual dies: re-seed in stage (l, 1) w.p. p_l
                for l, first in enumerate(kern.first_of):
                    reseed = tuple(1 if s == first else 0 for s in range(kern.s))
                    r = rate * kern.weights[l]
                    if r == 0.0 or reseed == k:
                        continue  # self-loops are no-ops
                    rows.append(i)
                    cols.append(space.index_of(reseed))
                    vals.append(r)
                    out += r
            else:
                rows.append(i)
                cols.append(space.index_of(target))
                vals.append(rate)
                out += rate
        if level < n_trunc:
            for _, rate, target in kern.births(k):
                if rate == 0.0:
                    continue
                rows.append(i)
                cols.append(space.index_of(target))
                vals.append(rate)
                out += rate
        # births at the truncation level are killed: no transition, no rate
        diag[i] = out
    return _finish_generator("regeneration", space, (rows, cols, vals), diag, delta,
                             truncation_level=n_trunc)


def build_population_process_generator(spec: PhaseTypeSpec, delta: float, n_level: int,
                                       w: "WVector | tuple", *,
                                       max_states: int = DEFAULT_MAX_STATES) -> GeneratorMatrix:
    """The restricted population chain P_N on levels 1..N.

    Births at level ``N`` re-route the whole population to a single
    newborn in stage ``(l, 1)`` (rate ``N delta p_l``); the death of a
    sole surviving individual jumps to a level-``N`` configuration drawn
    from Multinomial(N, w).  With the fixed-point ``w`` these wrap-around
    moves make ``pi_k = L_N (K-1)! prod w^k / k!`` stationary.
    """
    if n_level < 1:
        raise ValueError(f"population chain needs N >= 1, got {n_level}")
    if delta <= 0.0:
        raise ValueError(f"population chain requires delta > 0, got {delta!r}")
    w_flat = tuple(w.flat) if isinstance(w, WVector) else tuple(w)
    spec_s = spec.n_stages
    if len(w_flat) != spec_s:
        raise ValueError(f"w has {len(w_flat)} entries, spec has {spec_s} stages")
    space = enumerate_states(spec, n_level, min_level=1, max_states=max_states)
    kern = _Kernel(spec, delta)
    top = space.level_slice(n_level)
    top_states = space.states[top.start:top.stop]
    log_w = [math.log(x) for x in w_flat]
    lgam_n = math.lgamma(n_level + 1)

    def multinomial_pmf(counts: tuple) -> float:
        acc = lgam_n
        for c, lw in zip(counts, log_w):
            acc += c * lw - math.lgamma(c + 1)
        return math.exp(acc)

    top_pmf = [(space.index_of(s), multinomial_pmf(s)) for s in top_states]
    rows: list = []
    cols: list = []
    vals: list = []
    diag = [0.0] * space.size
    for i, k in enumerate(space.states):
        level = sum(k)
        out = 0.0
        for event, rate, target in kern.advances_and_deaths(k):
            if rate == 0.0:
                continue
            if event == "death" and level == 1:
                # sole death: jump to a Multinomial(N, w) level-N state
                for j, pmf in top_pmf:
                    r = rate * pmf
                    if r == 0.0 or j == i:
                        continue
                    rows.append(i)
                    cols.append(j)
                    vals.append(r)
                    out += r
            else:
                rows.append(i)
                cols.append(space.index_of(target))
                vals.append(rate)
                out += rate
        for l_comp, (_, rate, target) in enumerate(kern.births(k)):
            if rate == 0.0:
                continue
            if level == n_level:
                # newborn would exceed N: restart from a sole individual (l, 1)
                first = kern.first_of[l_comp]
                reseed = tuple(1 if s == first else 0 for s in range(kern.s))
                j = space.index_of(reseed)
                if j == i:
                    continue
                rows.append(i)
                cols.append(j)
                vals.append(rate)
                out += rate
            else:
                rows.append(i)
                cols.append(space.index_of(target))
                vals.append(rate)
                out += rate
        diag[i] = out
    return _finish_generator("population", space, (rows, cols, vals), diag, delta,
                             truncation_level=n_level, w_flat=w_flat)


# ---------------------------------------------------------------------------
# Closed-form stationary laws


def subcritical_normalizer(delta: float) -> float:
    """``C = -delta/log(1-delta)``, continuous value 1 at ``delta = 0``."""
    if not (0.0 <= delta < 1.0):
        raise ValueError(f"requires 0 <= delta < 1, got {delta!r}")
    if delta == 0.0:
        return 1.0
    return -delta / math.log1p(-delta)


def subcritical_level_marginal(delta: float, k: int) -> float:
    """Stationary mass of level ``k``: ``C delta^(k-1) / k``."""
    if k < 1:
        raise ValueError(f"level must be >= 1, got {k}")
    top = 1.0 if k == 1 else delta ** (k - 1)
    return subcritical_normalizer(delta) * top / k


def closed_form_pi_subcritical(spec: PhaseTypeSpec, delta: float, state) -> float:
    """Regeneration-chain stationary probability of one count vector.

    ``pi_k = C (K-1)! delta^(K-1) prod_s q_s^{k_s} / k_s!`` with
    ``q = p_i/gamma_{i,j}``.  Evaluated in log space.
    """
    k = tuple(state)
    level = sum(k)
    if level < 1:
        raise ValueError("state must have at least one individual")
    c = subcritical_normalizer(delta)
    if delta == 0.0 and level >= 2:
        return 0.0
    q = stage_occupancy(spec).flat
    acc = math.log(c) + math.lgamma(level)
    if level > 1:
        acc += (level - 1) * math.log(delta)
    for count, qs in zip(k, q):
        if count:
            acc += count * math.log(qs) - math.lgamma(count + 1)
    return math.exp(acc)


def harmonic_normalizer(n: int) -> float:
    """``L_N = 1/(1 + 1/2 + ... + 1/N)``."""
    if n < 1:
        raise ValueError(f"N must be >= 1, got {n}")
    return 1.0 / math.fsum(1.0 / j for j in range(1, n + 1))


def supercritical_level_marginal(n: int, k: int) -> float:
    """Stationary mass of level ``k`` under P_N: ``L_N / k``."""
    if not 1 <= k <= n:
        raise ValueError(f"level {k} outside [1, {n}]")
    return harmonic_normalizer(n) / k


def closed_form_pi_supercritical(spec: PhaseTypeSpec, delta: float, n: int,
                                 w, state) -> float:
    """P_N stationary probability: ``L_N (K-1)! prod_s w_s^{k_s} / k_s!``."""
    w_flat = tuple(w.flat) if isinstance(w, WVector) else tuple(w)
    k = tuple(state)
    level = sum(k)
    if not 1 <= level <= n:
        raise ValueError(f"state level {level} outside [1, {n}]")
    acc = math.log(harmonic_normalizer(n)) + math.lgamma(level)
    for count, ws in zip(k, w_flat):
        if count:
            acc += count * math.log(ws) - math.lgamma(count + 1)
    return math.exp(acc)


# ---------------------------------------------------------------------------
# The w fixed point


@dataclass(frozen=True)
class WVector:
    """Solution of the per-stage balance system for P_N.

    ``values`` mirrors the spec's component/stage shape; ``d_scalar`` is
    the death-flow total ``sum_l w_{l,n_l} gamma_{l,n_l}`` at the
    solution, and ``residual`` the largest absolute defect of the
    defining equations (including ``|sum w - 1|``).
    """

    spec: PhaseTypeSpec
    delta: float
    values: tuple[tuple[float, ...], ...]
    d_scalar: float
    residual: float
    iterations: int
    method: str

    @property
    def flat(self) -> tuple[float, ...]:
        return tuple(x for row in self.values for x in row)


def _w_forward(spec: PhaseTypeSpec, delta: float, d: float):
    """Closed-form forward substitution for unnormalized w given D.

    Stage 1: ``w_{i,1} = p_i delta / (gamma_{i,1} + delta - D)``; later
    stages: ``w_{i,j} = gamma_{i,j-1} w_{i,j-1} / (gamma_{i,j} + delta - D)``.
    Returns None if any denominator is not strictly positive.
    """
    out = []
    for comp in spec.components:
        rates = comp.stage_rates
        den = rates[0] + delta - d
        if den <= 0.0:
            return None
        row = [comp.weight * delta / den]
        for j in range(1, len(rates)):
            den = rates[j] + delta - d
            if den <= 0.0:
                return None
            row.append(rates[j - 1] * row[j - 1] / den)
        out.append(row)
    return out


def _w_residual(spec: PhaseTypeSpec, delta: float, values) -> tuple[float, float]:
    """(max equation defect, implied D) for a normalized w candidate."""
    d = math.fsum(row[-1] * comp.stage_rates[-1]
                  for row, comp in zip(values, spec.components))
    res = abs(math.fsum(x for row in values for x in row) - 1.0)
    for comp, row in zip(spec.components, values):
        rates = comp.stage_rates
        res = max(res, abs(rates[0] + delta - comp.weight * delta / row[0] - d))
        for j in range(1, len(rates)):
            res = max(res, abs(rates[j] + delta - rates[j - 1] * row[j - 1] / row[j] - d))
    return res, d


def _w_candidate(spec, delta, d):
    """Normalized w from the forward substitution at scalar D (or None)."""
    raw = _w_forward(spec, delta, d)
    if raw is None:
        return None
    total = math.fsum(x for row in raw for x in row)
    if not (total > 0.0 and math.isfinite(total)):
        return None
    return [[x / total for x in row] for row in raw]


def _w_fixed_point(spec, delta, d0, damping=0.5, max_iter=500):
    """Damped iteration on D; returns (values, D, iterations) or None."""
    d = d0
    for it in range(1, max_iter + 1):
        values = _w_candidate(spec, delta, d)
        if values is None:
            return None
        d_new = math.fsum(row[-1] * comp.stage_rates[-1]
                          for row, comp in zip(values, spec.components))
        step = d_new - d
        d = d + damping * step
        if abs(step) <= 1e-15 * max(1.0, abs(d)):
            return values, d, it
    return values, d, max_iter


def solve_w(spec: PhaseTypeSpec, delta: float, *, damping: float = 0.5,
            max_iter: int = 500) -> WVector:
    """Solve the w system: damped fixed point on D, bisection fallback.

    The unnormalized forward substitution ``w~(D)`` is increasing in
    ``D``, so ``h(D) = sum w~(D) - 1`` brackets a root on
    ``(0, min(gamma) + delta)``; summing the defining equations shows
    ``h(D) = 0`` already implies the self-consistency
    ``D = sum_l w_{l,n_l} gamma_{l,n_l}``.  The damped fixed point
    (init ``D = 1``, which is exact at ``delta = 1`` where ``w = q``)
    is tried first per the design intent; if it stalls, the bracketed
    root is used.  A solution must meet residual 1e-10 or a
    :class:`NumericalError` carrying the last residual is raised.
    After success the fixed point is re-run from perturbed starts and
    any *different* admissible solution is logged, not resolved.
    """
    if delta <= 0.0 or not math.isfinite(delta):
        raise ValueError(f"w system requires delta > 0, got {delta!r}")
    best = None
    out = _w_fixed_point(spec, delta, 1.0, damping=damping, max_iter=max_iter)
    if out is not None:
        values, d, iters = out
        res, d_implied = _w_residual(spec, delta, values)
        best = (values, d_implied, res, iters, "fixed-point")
    if best is None or best[2] > W_RESIDUAL_TOL:
        # bracketed bisection on h(D) = sum of unnormalized w(D) - 1
        hi_lim = min(g for c in spec.components for g in c.stage_rates) + delta

        def h(d):
            raw = _w_forward(spec, delta, d)
            if raw is None:
                return math.inf
            return math.fsum(x for row in raw for x in row) - 1.0

        lo, hi = 0.0, hi_lim * (1.0 - 1e-14)
        if h(lo) >= 0.0:
            raise NumericalError(
                f"cannot bracket the w root: sum w(0) = {h(lo) + 1.0:.6g} >= 1"
            )
        for it in range(200):
            mid = 0.5 * (lo + hi)
            if mid == lo or mid == hi:
                break
            if h(mid) < 0.0:
                lo = mid
            else:
                hi = mid
        values = _w_candidate(spec, delta, lo)
        if values is None:
            raise NumericalError("w forward substitution failed at the bracketed root")
        res, d_implied = _w_residual(spec, delta, values)
        best = (values, d_implied, res, it + 1, "bisection")
    values, d_scalar, residual, iterations, method = best
    if residual > W_RESIDUAL_TOL:
        raise NumericalError(
            f"w solve stalled: residual {residual:.3e} exceeds {W_RESIDUAL_TOL:g} "
            f"after {iterations} iterations ({method})"
        )
    # multiple-solution probe: perturbed restarts are logged, not resolved
    for factor in (0.5, 1.5):
        probe = _w_fixed_point(spec, delta, d_scalar * factor,
                               damping=damping, max_iter=max_iter)
        if probe is None:
            continue
        p_values, _, _ = probe
        p_res, p_d = _w_residual(spec, delta, p_values)
        if p_res <= W_RESIDUAL_TOL and abs(p_d - d_scalar) > 1e-8 * max(1.0, d_scalar):
            logger.warning(
                "w system for delta=%g admits another solution: D=%r vs D=%r",
                delta, p_d, d_scalar,
            )
    return WVector(
        spec=spec,
        delta=delta,
        values=tuple(tuple(row) for row in values),
        d_scalar=d_scalar,
        residual=residual,
        iterations=iterations,
        method=method,
    )


# ---------------------------------------------------------------------------
# Stationary solves


@dataclass
class StationaryDist:
    """A stationary law over a state space, with its achieved residual."""

    space: StateSpace
    probabilities: np.ndarray
    residual: float

    def probability(self, state) -> float:
        return float(self.probabilities[self.space.index_of(state)])

    def level_marginals(self) -> np.ndarray:
        """Mass per level, index 0 = ``space.min_level``."""
        out = np.empty(self.space.max_level - self.space.min_level + 1)
        for k in range(self.space.min_level, self.space.max_level + 1):
            sl = self.space.level_slice(k)
            out[k - self.space.min_level] = self.probabilities[sl.start:sl.stop].sum()
        return out

    def level_marginal(self, k: int) -> float:
        return float(self.level_marginals()[k - self.space.min_level])


def solve_stationary(gen: GeneratorMatrix) -> StationaryDist:
    """Solve ``pi G = 0``, ``sum pi = 1`` by sparse LU.

    One balance equation (the last) is replaced by the normalization row;
    a single step of iterative refinement follows.  The residual
    ``max |pi G|`` is checked against 1e-10 over the *original* generator
    and stored on the result.
    """
    if gen.kind == "branching":
        raise ValueError("the absorbing branching chain has no stationary law; "
                         "solve the regeneration or population chain instead")
    n = gen.size
    gt = gen.matrix.T.tocsr()
    a = sp.vstack([gt[:-1, :], sp.csr_matrix(np.ones((1, n)))]).tocsc()
    b = np.zeros(n)
    b[-1] = 1.0
    try:
        lu = splu(a)
    except RuntimeError as exc:  # singular factorization
        raise NumericalError(f"stationary solve failed: {exc}") from None
    x = lu.solve(b)
    x += lu.solve(b - a @ x)
    if not np.all(np.isfinite(x)):
        raise NumericalError("stationary solve produced non-finite entries")
    if x.min() < -1e-10:
        raise NumericalError(f"stationary solve produced negative mass {x.min():.3e}")
    x = np.clip(x, 0.0, None)
    residual = float(np.abs(gt @ x).max())
    if residual > STATIONARY_RESIDUAL_TOL:
        raise NumericalError(
            f"stationary residual {residual:.3e} exceeds {STATIONARY_RESIDUAL_TOL:g}"
        )
    total = float(x.sum())
    if abs(total - 1.0) > 1e-10:
        raise NumericalError(f"stationary mass sums to {total!r}, not 1")
    return StationaryDist(space=gen.space, probabilities=x, residual=residual)


def balance_residuals(gen: GeneratorMatrix, probabilities) -> float:
    """Largest net-flow defect of a candidate stationary law, relative scale.

    Returns ``max_k |(pi G)_k| / max_j (pi_j |G_jj|)`` -- the worst net
    flow into any state measured against the largest gross flow in the
    chain.  Scale-invariant in ``pi`` (unnormalized closed forms are
    fine).  A correct stationary law sits at float precision; a wrong
    candidate (the uniform law, say) lands at order one.
    """
    if gen.kind == "branching":
        raise ValueError("balance residuals are for stationary chains, not the "
                         "absorbing branching chain")
    p = np.asarray(probabilities, dtype=float)
    if p.shape != (gen.size,):
        raise ValueError(f"probabilities must have shape ({gen.size},), got {p.shape}")
    net = gen.matrix.T @ p
    scale = float((p * np.abs(gen.matrix.diagonal())).max())
    if scale <= 0.0:
        raise ValueError("candidate law puts no mass on any state with outflow")
    return float(np.abs(net).max() / scale)


# ---------------------------------------------------------------------------
# Exact expected occupation times (block-tridiagonal transient solve)


def _level_blocks(kern: _Kernel, states: list, index: dict, index_up: dict | None,
                  index_down: dict | None, level: int, n_trunc: int):
    """Sparse (D, A, B) blocks of the branching generator for one level.

    D: within-level advances plus the diagonal (all out-rates, including
    killed boundary births and deaths to the absorbed empty state);
    A: deaths to level-1 states (None at level 1); B: births to level+1
    states (None at the truncation level, where births are killed).
    """
    b = len(states)
    d_rows, d_cols, d_vals = [], [], []
    a_rows, a_cols, a_vals = [], [], []
    b_rows, b_cols, b_vals = [], [], []
    for i, k in enumerate(states):
        out = 0.0
        for event, rate, target in kern.advances_and_deaths(k):
            if rate == 0.0:
                continue
            out += rate
            if event == "advance":
                d_rows.append(i)
                d_cols.append(index[target])
                d_vals.append(rate)
            elif index_down is not None:
                a_rows.append(i)
                a_cols.append(index_down[target])
                a_vals.append(rate)
            # deaths at level 1 go to the absorbed empty state: rate only
        for _, rate, target in kern.births(k):
            if rate == 0.0:
                continue
            out += rate
            if level < n_trunc:
                b_rows.append(i)
                b_cols.append(index_up[target])
                b_vals.append(rate)
            # births at the truncation level are killed: rate only
        d_rows.append(i)
        d_cols.append(i)
        d_vals.append(-out)
    d = sp.coo_matrix((d_vals, (d_rows, d_cols)), shape=(b, b)).tocsr()
    a = None
    if index_down is not None:
        a = sp.coo_matrix((a_vals, (a_rows, a_cols)), shape=(b, len(index_down))).tocsr()
    bb = None
    if level < n_trunc:
        bb = sp.coo_matrix((b_vals, (b_rows, b_cols)), shape=(b, len(index_up))).tocsr()
    return d, a, bb


def _occupation_block_solve(spec: PhaseTypeSpec, delta: float, k_max: int,
                            n_trunc: int, max_states: int) -> np.ndarray:
    """E(A_K), K = 1..k_max, for the chain truncated (killed) at n_trunc.

    Solves ``(-G_TT)^T tau = alpha`` where alpha puts mass ``p_i`` on the
    single-ancestor states ``(i, 1)``; ``tau`` sums over a level to that
    level's expected occupation.  Levels couple only to neighbours, so a
    block-tridiagonal LU sweep (dense per-level pivots, sparse
    couplings) runs in one pass; one step of iterative refinement with
    the stored factors follows.
    """
    kern = _Kernel(spec, delta)
    s = kern.s
    total = sum(_level_count(k, s) for k in range(1, n_trunc + 1))
    if total > max_states:
        raise CapacityError(
            f"occupation solve needs {total} states for n_trunc={n_trunc} "
            f"with {s} stages, exceeding the budget of {max_states}"
        )
    pivot_doubles = sum(_level_count(k, s) ** 2 for k in range(1, n_trunc + 1))
    if pivot_doubles > PIVOT_BUDGET_DOUBLES:
        raise CapacityError(
            f"occupation solve needs {pivot_doubles} stored pivot entries for "
            f"n_trunc={n_trunc} with {s} stages, exceeding the budget of "
            f"{PIVOT_BUDGET_DOUBLES}; reduce n_trunc"
        )
    level_states = [None] * (n_trunc + 1)
    level_index = [None] * (n_trunc + 1)
    for k in range(1, n_trunc + 1):
        level_states[k] = list(_compositions(k, s))
        level_index[k] = {st: i for i, st in enumerate(level_states[k])}

    # alpha: ancestor enters stage (i, 1) with probability p_i
    alphas = [None] * (n_trunc + 1)
    a1 = np.zeros(len(level_states[1]))
    for l, first in enumerate(kern.first_of):
        e = tuple(1 if j == first else 0 for j in range(s))
        a1[level_index[1][e]] = kern.weights[l]
    alphas[1] = a1
    for k in range(2, n_trunc + 1):
        alphas[k] = np.zeros(len(level_states[k]))

    # blocks of M = (-G_TT)^T: diag -D_K^T, lower -B_{K-1}^T, upper -A_{K+1}^T
    diag_sp = [None] * (n_trunc + 1)   # -D_K^T, sparse (for refinement)
    lower = [None] * (n_trunc + 1)     # M[K, K-1]
    upper = [None] * (n_trunc + 1)     # M[K, K+1]
    b_blocks = [None] * (n_trunc + 1)  # B_K (births), to build lower on the fly
    lus = [None] * (n_trunc + 1)
    gvec = [None] * (n_trunc + 1)
    for k in range(1, n_trunc + 1):
        d_k, a_k, b_k = _level_blocks(
            kern, level_states[k], level_index[k],
            level_index[k + 1] if k < n_trunc else None,
            level_index[k - 1] if k > 1 else None,
            k, n_trunc,
        )
        b_blocks[k] = b_k
        diag_sp[k] = (-d_k.T).tocsr()
        if k > 1:
            lower[k] = (-b_blocks[k - 1].T).tocsr()
            upper[k - 1] = (-a_k.T).tocsr()
        pivot = diag_sp[k].toarray()
        g = alphas[k].copy()
        if k > 1:
            coupling = lu_solve(lus[k - 1], upper[k - 1].toarray())
            pivot -= lower[k] @ coupling
            g -= lower[k] @ lu_solve(lus[k - 1], gvec[k - 1])
        lus[k] = lu_factor(pivot)
        gvec[k] = g

    tau = [None] * (n_trunc + 1)
    tau[n_trunc] = lu_solve(lus[n_trunc], gvec[n_trunc])
    for k in range(n_trunc - 1, 0, -1):
        rhs = gvec[k] - upper[k] @ tau[k + 1]
        tau[k] = lu_solve(lus[k], rhs)

    def residual_blocks(t):
        out = []
        for k in range(1, n_trunc + 1):
            r = alphas[k] - diag_sp[k] @ t[k]
            if k > 1:
                r -= lower[k] @ t[k - 1]
            if k < n_trunc:
                r -= upper[k] @ t[k + 1]
            out.append(r)
        return out

    # one step of iterative refinement with the stored factors
    res = residual_blocks(tau)
    gfix = [None] * (n_trunc + 1)
    for k in range(1, n_trunc + 1):
        g = res[k - 1].copy()
        if k > 1:
            g -= lower[k] @ lu_solve(lus[k - 1], gfix[k - 1])
        gfix[k] = g
    dtau = [None] * (n_trunc + 1)
    dtau[n_trunc] = lu_solve(lus[n_trunc], gfix[n_trunc])
    for k in range(n_trunc - 1, 0, -1):
        dtau[k] = lu_solve(lus[k], gfix[k] - upper[k] @ dtau[k + 1])
    for k in range(1, n_trunc + 1):
        tau[k] = tau[k] + dtau[k]

    final = residual_blocks(tau)
    worst = max(float(np.abs(r).max()) for r in final)
    if worst > 1e-8:
        raise NumericalError(f"occupation solve residual {worst:.3e} exceeds 1e-8")
    return np.array([float(tau[k].sum()) for k in range(1, k_max + 1)])


def expected_occupation_exact(spec: PhaseTypeSpec, delta: float, k_max: int,
                              n_trunc: int, *,
                              max_states: int = DEFAULT_MAX_STATES) -> np.ndarray:
    """Exact E(A_K), K = 1..k_max, from the truncated transient chain.

    Away from criticality the truncation bias decays geometrically and a
    single solve at ``n_trunc`` is returned.  At ``delta == 1`` the bias
    is first order in ``1/n_trunc``, so the solve runs at ``n_trunc``
    and ``2 n_trunc`` and returns the Richardson extrapolation
    ``2 E_{2N} - E_N``.
    """
    if k_max < 1:
        raise ValueError(f"k_max must be >= 1, got {k_max}")
    if n_trunc <= k_max:
        raise ValueError(f"n_trunc must exceed k_max, got n_trunc={n_trunc}, k_max={k_max}")
    if not (delta >= 0.0 and math.isfinite(delta)):
        raise ValueError(f"birth rate must be finite and >= 0, got {delta!r}")
    if delta == 1.0:
        e_n = _occupation_block_solve(spec, delta, k_max, n_trunc, max_states)
        e_2n = _occupation_block_solve(spec, delta, k_max, 2 * n_trunc, max_states)
        return 2.0 * e_2n - e_n
    return _occupation_block_solve(spec, delta, k_max, n_trunc, max_states)


# ---------------------------------------------------------------------------
# Debug exports


def state_to_nested(spec: PhaseTypeSpec, state) -> list:
    """Flat count tuple -> nested per-component stage counts."""
    out = []
    pos = 0
    for n_i in spec.shape:
        out.append(list(state[pos:pos + n_i]))
        pos += n_i
    return out


def generator_to_triplet_csv(gen: GeneratorMatrix) -> str:
    """``row,col,rate`` lines for every nonzero, row-major order."""
    coo = gen.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    lines = ["row,col,rate"]
    for i in order:
        lines.append(f"{coo.row[i]},{coo.col[i]},{float(coo.data[i])!r}")
    return "\n".join(lines) + "\n"


def distribution_to_json(dist: StationaryDist) -> str:
    """State-indexed JSON map with nested count labels, for debugging."""
    spec = dist.space.spec
    obj = {
        "min_level": dist.space.min_level,
        "max_level": dist.space.max_level,
        "residual": dist.residual,
        "states": [state_to_nested(spec, s) for s in dist.space.states],
        "probabilities": [float(p) for p in dist.probabilities],
    }
    return json.dumps(obj)
