"""Event-driven simulation of splitting populations.

Each individual lives an independent unit-mean lifetime drawn from a
configurable distribution and produces offspring according to a birth
model:

* :class:`HomogeneousBirth` -- every individual gives birth singly at
  constant rate ``delta`` throughout its life.
* :class:`BatchBirth` -- birth events arrive at rate ``delta`` per
  individual, but each event inserts ``batch_size`` newborns at once.
* :class:`AgeVaryingBirth` -- births arrive singly with an age-dependent
  intensity ``lam(a)`` bounded by ``bound``; simulated by thinning.

A replicate starts from a single newborn and runs until extinction or
the first violated stopping cap.  The per-level occupation profile (the
time spent while exactly K individuals are alive) is recorded exactly,
interval by interval, so the accounting identities

* ``sum_K a_K == total_time`` and
* ``sum_K K * a_K == integral_x``

hold by construction.

The Monte Carlo driver runs independent replicates on counter-based RNG
substreams and aggregates them with error-free accumulators, so a
summary is bit-identical for fixed inputs regardless of worker count,
chunk completion order, or how partial summaries are merged.
"""

from __future__ import annotations

import heapq
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .analysis import expected_occupation
from .lifetime import DeterministicLifetime, LifetimeSampler, make_sampler

__all__ = [
    "AgeVaryingBirth",
    "BatchBirth",
    "EXPERIMENT_COLUMNS",
    "ExactSum",
    "HomogeneousBirth",
    "MonteCarloSummary",
    "OccupationRecord",
    "ReplicateFault",
    "StepIntensity",
    "StoppingPolicy",
    "ThinningBoundError",
    "counterexample_age_varying",
    "counterexample_batch",
    "default_policy",
    "insensitivity_experiment",
    "monte_carlo",
    "replicate_rng",
    "run_replicate",
    "tn_growth_experiment",
]

_MASK64 = (1 << 64) - 1

# Buffered draws for the event loops start small (most replicates are
# short) and double on each refill up to the maximum.
_EXP_BUF0, _EXP_BUF = 32, 4096
_UNIF_BUF0, _UNIF_BUF = 64, 4096
_LIFE_BUF0, _LIFE_BUF = 16, 2048

# Replicate indices are processed in fixed chunks so that the merge
# order of partial summaries never depends on the worker count.
_CHUNK_SIZE = 4096

#: Column order of experiment report rows (CSV schema).
EXPERIMENT_COLUMNS = (
    "experiment",
    "delta",
    "dist",
    "K",
    "estimate",
    "stderr",
    "theory",
    "z_score",
    "n_reps",
    "capped_frac",
    "seed",
)


class ThinningBoundError(RuntimeError):
    """The declared intensity bound was exceeded during thinning."""

    def __init__(self, age: float, value: float, bound: float):
        super().__init__(age, value, bound)
        self.age = age
        self.value = value
        self.bound = bound

    def __str__(self) -> str:
        return (
            f"intensity {self.value!r} at age {self.age!r} exceeds the "
            f"declared bound {self.bound!r}"
        )


class ReplicateFault(RuntimeError):
    """A replicate failed; carries the failing replicate index."""

    def __init__(self, replicate: int, message: str):
        super().__init__(replicate, message)
        self.replicate = replicate
        self.message = message

    def __str__(self) -> str:
        return f"replicate {self.replicate}: {self.message}"


# ---------------------------------------------------------------------------
# Birth models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HomogeneousBirth:
    """Single births at constant rate ``delta`` per individual."""

    delta: float

    def __post_init__(self):
        d = float(self.delta)
        if not (math.isfinite(d) and d >= 0.0):
            raise ValueError(f"delta must be finite and >= 0, got {self.delta!r}")
        object.__setattr__(self, "delta", d)


@dataclass(frozen=True)
class BatchBirth:
    """Birth events at rate ``delta`` per individual, each inserting
    ``batch_size`` newborns simultaneously."""

    delta: float
    batch_size: int

    def __post_init__(self):
        d = float(self.delta)
        if not (math.isfinite(d) and d >= 0.0):
            raise ValueError(f"delta must be finite and >= 0, got {self.delta!r}")
        b = self.batch_size
        if not isinstance(b, (int, np.integer)) or isinstance(b, bool) or b < 1:
            raise ValueError(f"batch_size must be an integer >= 1, got {b!r}")
        object.__setattr__(self, "delta", d)
        object.__setattr__(self, "batch_size", int(b))


@dataclass(frozen=True)
class StepIntensity:
    """Piecewise-constant age intensity: ``rate`` on each half-open
    window ``[start, end)``, zero elsewhere.  Picklable, so it works
    with multiprocessing workers."""

    windows: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        cleaned = []
        last_end = 0.0
        for idx, win in enumerate(self.windows):
            if len(win) != 3:
                raise ValueError(f"windows[{idx}] must be (start, end, rate)")
            s, e, r = (float(v) for v in win)
            if not (math.isfinite(s) and math.isfinite(e) and math.isfinite(r)):
                raise ValueError(f"windows[{idx}] has a non-finite entry")
            if s < 0.0 or e <= s:
                raise ValueError(f"windows[{idx}] needs 0 <= start < end")
            if r < 0.0:
                raise ValueError(f"windows[{idx}] has negative rate")
            if s < last_end:
                raise ValueError(f"windows[{idx}] overlaps the previous window")
            last_end = e
            cleaned.append((s, e, r))
        object.__setattr__(self, "windows", tuple(cleaned))

    @property
    def bound(self) -> float:
        return max((r for _, _, r in self.windows), default=0.0)

    @property
    def mass(self) -> float:
        return math.fsum(r * (e - s) for s, e, r in self.windows)

    def __call__(self, age: float) -> float:
        for s, e, r in self.windows:
            if s <= age < e:
                return r
        return 0.0


@dataclass(frozen=True)
class AgeVaryingBirth:
    """Single births driven by an age-dependent intensity.

    ``intensity(a)`` is the birth rate of an individual at age ``a``,
    ``bound`` a declared finite upper bound for it (used for thinning;
    exceeding it is a hard fault), and ``mass`` the declared total
    integral of the intensity over a lifetime -- the per-individual mean
    number of births, playing the role of ``delta``.
    """

    intensity: Callable[[float], float]
    bound: float
    mass: float

    def __post_init__(self):
        if not callable(self.intensity):
            raise ValueError("intensity must be callable")
        b = float(self.bound)
        m = float(self.mass)
        if not (math.isfinite(b) and b >= 0.0):
            raise ValueError(f"bound must be finite and >= 0, got {self.bound!r}")
        if not (math.isfinite(m) and m >= 0.0):
            raise ValueError(f"mass must be finite and >= 0, got {self.mass!r}")
        if m > 0.0 and b == 0.0:
            raise ValueError("positive mass requires a positive bound")
        object.__setattr__(self, "bound", b)
        object.__setattr__(self, "mass", m)

    @classmethod
    def from_step(cls, step: StepIntensity) -> "AgeVaryingBirth":
        return cls(intensity=step, bound=step.bound, mass=step.mass)

    @property
    def delta(self) -> float:
        return self.mass


BirthModel = HomogeneousBirth | BatchBirth | AgeVaryingBirth


def _model_delta(model: BirthModel) -> float:
    if isinstance(model, AgeVaryingBirth):
        return model.mass
    return model.delta


# ---------------------------------------------------------------------------
# Stopping policy and replicate record
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StoppingPolicy:
    """Caps that stop a replicate before extinction.

    ``population_cap``: stop as soon as the population reaches this
    size (no occupation time is accumulated at or above the cap).
    ``event_cap``: maximum number of events processed (thinning
    candidate points count as events).  ``time_cap``: stop once the
    clock reaches this time.
    """

    population_cap: int | None = None
    event_cap: int = 10**8
    time_cap: float | None = None

    def __post_init__(self):
        if self.population_cap is not None:
            p = self.population_cap
            if not isinstance(p, (int, np.integer)) or isinstance(p, bool) or p < 2:
                raise ValueError(
                    f"population_cap must be an integer >= 2 or None, got {p!r}"
                )
            object.__setattr__(self, "population_cap", int(p))
        e = self.event_cap
        if not isinstance(e, (int, np.integer)) or isinstance(e, bool) or e < 1:
            raise ValueError(f"event_cap must be an integer >= 1, got {e!r}")
        object.__setattr__(self, "event_cap", int(e))
        if self.time_cap is not None:
            t = float(self.time_cap)
            if not (math.isfinite(t) and t > 0.0):
                raise ValueError(f"time_cap must be finite and > 0, got {self.time_cap!r}")
            object.__setattr__(self, "time_cap", t)


def default_policy(delta: float) -> StoppingPolicy:
    """Default stopping policy for a given birth intensity.

    Below 1 the process dies out almost surely, so only a generous
    event-cap safety net is installed (it should never trigger).  At
    exactly 1 extinction still happens but the total progeny has
    infinite mean, so replicates are truncated by an event cap and the
    capped fraction must be reported alongside any estimate.  Above 1 a
    population cap stops explosive replicates; returns from a large
    population back down to a small level are vanishingly rare, so the
    neglected occupation is negligible for the default cap.
    """

    d = float(delta)
    if not (math.isfinite(d) and d >= 0.0):
        raise ValueError(f"delta must be finite and >= 0, got {delta!r}")
    if d < 1.0:
        return StoppingPolicy(event_cap=10**8)
    if d == 1.0:
        return StoppingPolicy(event_cap=10**6)
    return StoppingPolicy(population_cap=1000, event_cap=10**8)


@dataclass(frozen=True)
class OccupationRecord:
    """Exact per-replicate accounting of one simulated population.

    ``a_k[i]`` is the time spent with exactly ``i + 1`` individuals
    alive.  ``total_time`` is the time until the replicate stopped and
    equals ``fsum(a_k)`` exactly; ``integral_x`` is the time integral
    of the population size and equals ``fsum(K * a_K)`` exactly.
    ``total_births`` counts every individual ever alive, ancestor
    included.  ``sum_lifetimes`` adds up the lifetimes drawn for those
    individuals; on extinction it retraces ``integral_x`` up to float
    rounding.
    """

    a_k: tuple[float, ...]
    total_time: float
    total_births: int
    integral_x: float
    stop_reason: str  # "extinction" | "cap"
    cap_kind: str | None  # "population" | "event" | "time" | None
    events: int
    sum_lifetimes: float

    def occupation(self, k: int) -> float:
        """Time spent at population size ``k`` (0.0 beyond the record)."""
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k!r}")
        if k > len(self.a_k):
            return 0.0
        return self.a_k[k - 1]


# ---------------------------------------------------------------------------
# Event loops
# ---------------------------------------------------------------------------


def _finish(acc, births, stop_reason, cap_kind, events, sum_life) -> OccupationRecord:
    while acc and acc[-1] == 0.0:
        acc.pop()
    total_time = math.fsum(acc)
    integral_x = math.fsum((i + 1) * a for i, a in enumerate(acc))
    return OccupationRecord(
        a_k=tuple(acc),
        total_time=total_time,
        total_births=births,
        integral_x=integral_x,
        stop_reason=stop_reason,
        cap_kind=cap_kind,
        events=events,
        sum_lifetimes=sum_life,
    )


def _pooled_loop(
    delta: float,
    batch: int,
    sampler: LifetimeSampler,
    policy: StoppingPolicy,
    rng: np.random.Generator,
) -> OccupationRecord:
    """Shared loop for the constant-rate models.

    The aggregate birth clock of ``x`` individuals is Exp(x * delta)
    and, by memorylessness, redrawing it after every event is exact.
    """

    pop_cap = policy.population_cap
    event_cap = policy.event_cap
    time_cap = policy.time_cap

    heappush = heapq.heappush
    heappop = heapq.heappop
    draw_batch = sampler.draw_batch
    std_exp = rng.standard_exponential

    ebuf: list[float] = []
    epos = 0
    elen = _EXP_BUF0
    lbuf = draw_batch(rng, _LIFE_BUF0)
    lpos = 0
    llen = _LIFE_BUF0

    life = lbuf[lpos]
    lpos += 1
    sum_life = life
    heap = [life]
    x = 1
    t = 0.0
    acc = [0.0]
    events = 0
    births = 1
    stop_reason = "extinction"
    cap_kind = None

    while True:
        if events >= event_cap:
            stop_reason = "cap"
            cap_kind = "event"
            break
        nd = heap[0]
        if delta > 0.0:
            if epos >= len(ebuf):
                ebuf = std_exp(elen).tolist()
                epos = 0
                if elen < _EXP_BUF:
                    elen *= 2
            nb = t + ebuf[epos] / (x * delta)
            epos += 1
        else:
            nb = math.inf
        if nb < nd:
            te = nb
            is_birth = True
        else:
            te = nd
            is_birth = False
        if time_cap is not None and te > time_cap:
            acc[x - 1] += time_cap - t
            stop_reason = "cap"
            cap_kind = "time"
            break
        acc[x - 1] += te - t
        t = te
        events += 1
        if is_birth:
            if batch == 1:
                if lpos >= len(lbuf):
                    lbuf = draw_batch(rng, llen)
                    lpos = 0
                    if llen < _LIFE_BUF:
                        llen *= 2
                life = lbuf[lpos]
                lpos += 1
                sum_life += life
                heappush(heap, t + life)
                x += 1
                births += 1
            else:
                for _ in range(batch):
                    if lpos >= len(lbuf):
                        lbuf = draw_batch(rng, llen)
                        lpos = 0
                        if llen < _LIFE_BUF:
                            llen *= 2
                    life = lbuf[lpos]
                    lpos += 1
                    sum_life += life
                    heappush(heap, t + life)
                x += batch
                births += batch
            if x > len(acc):
                acc.extend([0.0] * (x - len(acc)))
            if pop_cap is not None and x >= pop_cap:
                stop_reason = "cap"
                cap_kind = "population"
                break
        else:
            heappop(heap)
            x -= 1
            if x == 0:
                break

    return _finish(acc, births, stop_reason, cap_kind, events, sum_life)


def _age_varying_loop(
    model: AgeVaryingBirth,
    sampler: LifetimeSampler,
    policy: StoppingPolicy,
    rng: np.random.Generator,
) -> OccupationRecord:
    """Thinning loop: candidate points arrive at aggregate rate
    ``x * bound``; each is attributed to a uniformly chosen individual
    and accepted with probability ``intensity(age) / bound``.  Candidate
    points (accepted or not) count toward the event cap."""

    lam = model.intensity
    lam_max = model.bound
    pop_cap = policy.population_cap
    event_cap = policy.event_cap
    time_cap = policy.time_cap

    # Hot path: piecewise-constant profiles with a single window are
    # evaluated inline instead of through the callable.
    one_window = (
        isinstance(lam, StepIntensity) and len(lam.windows) == 1
    )
    if one_window:
        win_s, win_e, win_r = lam.windows[0]

    heappush = heapq.heappush
    heappop = heapq.heappop
    draw_batch = sampler.draw_batch
    std_exp = rng.standard_exponential
    std_unif = rng.random

    ebuf: list[float] = []
    epos = 0
    elen = _EXP_BUF0
    ubuf: list[float] = []
    upos = 0
    ulen = _UNIF_BUF0
    lbuf = draw_batch(rng, _LIFE_BUF0)
    lpos = 0
    llen = _LIFE_BUF0

    life = lbuf[lpos]
    lpos += 1
    sum_life = life

    # Alive individuals: birth times in a swap-remove list, with id
    # indirection so heap entries survive the swaps.
    born_at = [0.0]
    slot_id = [0]
    id_pos = {0: 0}
    next_id = 1
    heap: list[tuple[float, int]] = [(life, 0)]

    x = 1
    t = 0.0
    acc = [0.0]
    events = 0
    births = 1
    stop_reason = "extinction"
    cap_kind = None
    nd = heap[0][0]

    while True:
        if events >= event_cap:
            stop_reason = "cap"
            cap_kind = "event"
            break
        if lam_max > 0.0:
            if epos >= len(ebuf):
                ebuf = std_exp(elen).tolist()
                epos = 0
                if elen < _EXP_BUF:
                    elen *= 2
            nc = t + ebuf[epos] / (x * lam_max)
            epos += 1
        else:
            nc = math.inf
        if nc < nd:
            te = nc
            is_candidate = True
        else:
            te = nd
            is_candidate = False
        if time_cap is not None and te > time_cap:
            acc[x - 1] += time_cap - t
            stop_reason = "cap"
            cap_kind = "time"
            break
        acc[x - 1] += te - t
        t = te
        events += 1
        if is_candidate:
            if upos >= len(ubuf):
                ubuf = std_unif(ulen).tolist()
                upos = 0
                if ulen < _UNIF_BUF:
                    ulen *= 2
            pick = int(ubuf[upos] * x)
            if pick == x:  # guard against u == 1.0 rounding
                pick = x - 1
            upos += 1
            age = t - born_at[pick]
            if one_window:
                rate = win_r if win_s <= age < win_e else 0.0
            else:
                rate = lam(age)
            if rate > lam_max:
                raise ThinningBoundError(age, rate, lam_max)
            if rate <= 0.0:
                accepted = False
            elif rate >= lam_max:
                accepted = True
            else:
                if upos >= len(ubuf):
                    ubuf = std_unif(ulen).tolist()
                    upos = 0
                    if ulen < _UNIF_BUF:
                        ulen *= 2
                accepted = ubuf[upos] * lam_max < rate
                upos += 1
            if accepted:
                # Accepted: one newborn.
                if lpos >= len(lbuf):
                    lbuf = draw_batch(rng, llen)
                    lpos = 0
                    if llen < _LIFE_BUF:
                        llen *= 2
                life = lbuf[lpos]
                lpos += 1
                sum_life += life
                pos = len(born_at)
                born_at.append(t)
                slot_id.append(next_id)
                id_pos[next_id] = pos
                dies_at = t + life
                heappush(heap, (dies_at, next_id))
                if dies_at < nd:
                    nd = dies_at
                next_id += 1
                x += 1
                births += 1
                if x > len(acc):
                    acc.append(0.0)
                if pop_cap is not None and x >= pop_cap:
                    stop_reason = "cap"
                    cap_kind = "population"
                    break
        else:
            _, dead = heappop(heap)
            pos = id_pos.pop(dead)
            last = len(born_at) - 1
            if pos != last:
                born_at[pos] = born_at[last]
                moved = slot_id[last]
                slot_id[pos] = moved
                id_pos[moved] = pos
            born_at.pop()
            slot_id.pop()
            x -= 1
            if x == 0:
                break
            nd = heap[0][0]

    return _finish(acc, births, stop_reason, cap_kind, events, sum_life)


def run_replicate(
    sampler: LifetimeSampler | str,
    model: BirthModel,
    policy: StoppingPolicy,
    rng: np.random.Generator,
) -> OccupationRecord:
    """Simulate one population from a single newborn until extinction
    or the first violated cap, returning its exact occupation record."""

    smp = make_sampler(sampler)
    if isinstance(model, HomogeneousBirth):
        return _pooled_loop(model.delta, 1, smp, policy, rng)
    if isinstance(model, BatchBirth):
        return _pooled_loop(model.delta, model.batch_size, smp, policy, rng)
    if isinstance(model, AgeVaryingBirth):
        return _age_varying_loop(model, smp, policy, rng)
    raise TypeError(f"unknown birth model: {model!r}")


# ---------------------------------------------------------------------------
# Exact accumulation and Monte Carlo summaries
# ---------------------------------------------------------------------------


class ExactSum:
    """Error-free running sum of floats (Shewchuk partials).

    The internal state represents the exact real-valued sum of
    everything added so far, so ``value`` (the correctly rounded float
    of that exact sum) does not depend on insertion order, and merging
    two accumulators is exactly equivalent to having added both input
    sequences into one.
    """

    __slots__ = ("partials",)

    def __init__(self, values: Iterable[float] = ()):
        self.partials: list[float] = []
        for v in values:
            self.add(v)

    def add(self, x: float) -> None:
        ps = self.partials
        i = 0
        for y in ps:
            if abs(x) < abs(y):
                x, y = y, x
            hi = x + y
            lo = y - (hi - x)
            if lo:
                ps[i] = lo
                i += 1
            x = hi
        ps[i:] = [x]

    def add_many(self, values: Iterable[float]) -> None:
        for v in values:
            self.add(v)

    def merge(self, other: "ExactSum") -> None:
        for p in other.partials:
            self.add(p)

    def copy(self) -> "ExactSum":
        out = ExactSum()
        out.partials = list(self.partials)
        return out

    @property
    def value(self) -> float:
        return math.fsum(self.partials)

    def __repr__(self) -> str:
        return f"ExactSum({self.value!r})"


def _sample_se(total: float, total_sq: float, n: int) -> float:
    """Standard error of the mean from exact sum and sum of squares."""
    if n < 2:
        return math.nan
    var = (total_sq - total * total / n) / (n - 1)
    if var < 0.0:  # exact sums can still leave a rounded negative here
        var = 0.0
    return math.sqrt(var / n)


class MonteCarloSummary:
    """Aggregated statistics over replicates.

    Per-level occupation times for K = 1..k_max, total time, and total
    births are accumulated as exact sums and exact sums of squares, so
    merging partial summaries is associative and bit-exact.  Standard
    errors are sample standard deviations divided by sqrt(n).
    """

    __slots__ = (
        "k_max",
        "master_seed",
        "n",
        "n_extinct",
        "n_capped",
        "sum_a",
        "sumsq_a",
        "sum_time",
        "sumsq_time",
        "sum_births",
        "sumsq_births",
    )

    def __init__(self, k_max: int, master_seed: int):
        if not isinstance(k_max, (int, np.integer)) or k_max < 1:
            raise ValueError(f"k_max must be an integer >= 1, got {k_max!r}")
        self.k_max = int(k_max)
        self.master_seed = int(master_seed)
        self.n = 0
        self.n_extinct = 0
        self.n_capped = 0
        self.sum_a = [ExactSum() for _ in range(self.k_max)]
        self.sumsq_a = [ExactSum() for _ in range(self.k_max)]
        self.sum_time = ExactSum()
        self.sumsq_time = ExactSum()
        self.sum_births = ExactSum()
        self.sumsq_births = ExactSum()

    # -- accumulation -------------------------------------------------

    def add_record(self, rec: OccupationRecord) -> None:
        self.n += 1
        if rec.stop_reason == "extinction":
            self.n_extinct += 1
        else:
            self.n_capped += 1
        a_k = rec.a_k
        m = len(a_k)
        for i in range(self.k_max):
            a = a_k[i] if i < m else 0.0
            self.sum_a[i].add(a)
            self.sumsq_a[i].add(a * a)
        self.sum_time.add(rec.total_time)
        self.sumsq_time.add(rec.total_time * rec.total_time)
        b = float(rec.total_births)
        self.sum_births.add(b)
        self.sumsq_births.add(b * b)

    def merge(self, other: "MonteCarloSummary") -> "MonteCarloSummary":
        """Return a new summary equivalent to one combined run."""
        if other.k_max != self.k_max:
            raise ValueError("cannot merge summaries with different k_max")
        if other.master_seed != self.master_seed:
            raise ValueError("cannot merge summaries with different master seeds")
        out = MonteCarloSummary(self.k_max, self.master_seed)
        out.n = self.n + other.n
        out.n_extinct = self.n_extinct + other.n_extinct
        out.n_capped = self.n_capped + other.n_capped
        for name in ("sum_time", "sumsq_time", "sum_births", "sumsq_births"):
            acc = getattr(self, name).copy()
            acc.merge(getattr(other, name))
            setattr(out, name, acc)
        for i in range(self.k_max):
            sa = self.sum_a[i].copy()
            sa.merge(other.sum_a[i])
            out.sum_a[i] = sa
            sq = self.sumsq_a[i].copy()
            sq.merge(other.sumsq_a[i])
            out.sumsq_a[i] = sq
        return out

    # -- accessors ----------------------------------------------------

    def mean_occupation(self, k: int) -> float:
        if not 1 <= k <= self.k_max:
            raise ValueError(f"k must be in 1..{self.k_max}, got {k!r}")
        return self.sum_a[k - 1].value / self.n

    def se_occupation(self, k: int) -> float:
        if not 1 <= k <= self.k_max:
            raise ValueError(f"k must be in 1..{self.k_max}, got {k!r}")
        return _sample_se(self.sum_a[k - 1].value, self.sumsq_a[k - 1].value, self.n)

    @property
    def mean_total_time(self) -> float:
        return self.sum_time.value / self.n

    @property
    def se_total_time(self) -> float:
        return _sample_se(self.sum_time.value, self.sumsq_time.value, self.n)

    @property
    def mean_total_births(self) -> float:
        return self.sum_births.value / self.n

    @property
    def se_total_births(self) -> float:
        return _sample_se(self.sum_births.value, self.sumsq_births.value, self.n)

    @property
    def extinction_frequency(self) -> float:
        return self.n_extinct / self.n

    @property
    def capped_fraction(self) -> float:
        return self.n_capped / self.n

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MonteCarloSummary):
            return NotImplemented
        return self.state_tuple() == other.state_tuple()

    def state_tuple(self) -> tuple:
        """All aggregated state as plain floats/ints (for bit-exact
        comparison across worker counts and merge orders)."""
        return (
            self.k_max,
            self.master_seed,
            self.n,
            self.n_extinct,
            self.n_capped,
            tuple(s.value for s in self.sum_a),
            tuple(s.value for s in self.sumsq_a),
            self.sum_time.value,
            self.sumsq_time.value,
            self.sum_births.value,
            self.sumsq_births.value,
        )

    def to_dict(self) -> dict:
        """Plain-data view (means, standard errors, frequencies)."""
        return {
            "n_reps": self.n,
            "k_max": self.k_max,
            "master_seed": self.master_seed,
            "mean_occupation": [self.mean_occupation(k) for k in range(1, self.k_max + 1)],
            "se_occupation": [self.se_occupation(k) for k in range(1, self.k_max + 1)],
            "mean_total_time": self.mean_total_time,
            "se_total_time": self.se_total_time,
            "mean_total_births": self.mean_total_births,
            "se_total_births": self.se_total_births,
            "extinction_frequency": self.extinction_frequency,
            "capped_fraction": self.capped_fraction,
        }


# ---------------------------------------------------------------------------
# Monte Carlo driver
# ---------------------------------------------------------------------------


def replicate_rng(master_seed: int, index: int) -> np.random.Generator:
    """Counter-based generator for one replicate.

    Keyed by ``(master_seed, index)``, so every replicate owns an
    independent stream no matter how replicates are distributed over
    workers.
    """

    key = [int(master_seed) & _MASK64, int(index) & _MASK64]
    return np.random.Generator(np.random.Philox(key=key))


def _chunk_summary(args) -> MonteCarloSummary:
    sampler, model, policy, master_seed, start, stop, k_max = args
    out = MonteCarloSummary(k_max=k_max, master_seed=master_seed)
    for i in range(start, stop):
        rng = replicate_rng(master_seed, i)
        try:
            rec = run_replicate(sampler, model, policy, rng)
        except Exception as exc:
            raise ReplicateFault(i, f"{type(exc).__name__}: {exc}") from exc
        out.add_record(rec)
    return out


def monte_carlo(
    sampler: LifetimeSampler | str,
    model: BirthModel,
    policy: StoppingPolicy | None = None,
    replicates: int = 10_000,
    master_seed: int = 0,
    workers: int = 1,
    k_max: int = 8,
) -> MonteCarloSummary:
    """Run independent replicates and aggregate them.

    Replicate ``i`` runs on the stream ``replicate_rng(master_seed, i)``
    and replicates are aggregated in fixed chunks of index order, so the
    summary is bit-identical for fixed inputs regardless of ``workers``.
    A replicate failure aborts the run with the failing index attached.
    """

    smp = make_sampler(sampler)
    if policy is None:
        policy = default_policy(_model_delta(model))
    if not isinstance(replicates, (int, np.integer)) or replicates < 1:
        raise ValueError(f"replicates must be an integer >= 1, got {replicates!r}")
    if not isinstance(workers, (int, np.integer)) or workers < 1:
        raise ValueError(f"workers must be an integer >= 1, got {workers!r}")
    replicates = int(replicates)
    master_seed = int(master_seed) & _MASK64

    arg_list = [
        (smp, model, policy, master_seed, start, min(start + _CHUNK_SIZE, replicates), k_max)
        for start in range(0, replicates, _CHUNK_SIZE)
    ]
    if workers == 1 or len(arg_list) == 1:
        parts = [_chunk_summary(a) for a in arg_list]
    else:
        with ProcessPoolExecutor(max_workers=int(workers)) as pool:
            parts = list(pool.map(_chunk_summary, arg_list))
    out = parts[0]
    for p in parts[1:]:
        out = out.merge(p)
    return out


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def _z_score(estimate: float, reference: float, se: float) -> float:
    if estimate == reference:
        return 0.0
    if se == 0.0 or math.isnan(se):
        return math.copysign(math.inf, estimate - reference)
    return (estimate - reference) / se


def insensitivity_experiment(
    delta: float,
    samplers: Sequence[LifetimeSampler | str] = ("exp1", "gamma22", "mix", "det1"),
    k_max: int = 4,
    replicates: int = 10_000,
    seed: int = 0,
    policy: StoppingPolicy | None = None,
    workers: int = 1,
) -> list[dict]:
    """Estimate per-level occupation times under several unit-mean
    lifetime distributions and compare each against the closed form
    ``delta**(K-1) / (K * max(1, delta)**K)``.

    Distribution ``samplers[j]`` runs on master seed ``seed + j``.
    Returns one report row per (distribution, K) in the column order of
    ``EXPERIMENT_COLUMNS``.
    """

    rows: list[dict] = []
    for off, s in enumerate(samplers):
        smp = make_sampler(s)
        summary = monte_carlo(
            smp,
            HomogeneousBirth(delta),
            policy if policy is not None else default_policy(delta),
            replicates=replicates,
            master_seed=(int(seed) + off) & _MASK64,
            workers=workers,
            k_max=k_max,
        )
        for k in range(1, k_max + 1):
            est = summary.mean_occupation(k)
            se = summary.se_occupation(k)
            th = expected_occupation(delta, k)
            rows.append(
                {
                    "experiment": "insensitivity",
                    "delta": float(delta),
                    "dist": smp.name,
                    "K": k,
                    "estimate": est,
                    "stderr": se,
                    "theory": th,
                    "z_score": _z_score(est, th, se),
                    "n_reps": summary.n,
                    "capped_frac": summary.capped_fraction,
                    "seed": summary.master_seed,
                }
            )
    return rows


def counterexample_age_varying(
    delta: float,
    replicates: int = 10_000,
    seed: int = 0,
    front: StepIntensity | None = None,
    back: StepIntensity | None = None,
    population_cap: int = 100,
    event_cap: int = 10**8,
    workers: int = 1,
) -> dict:
    """Mean time alone under two age profiles of the same total mass.

    Both profiles must integrate to ``delta`` over the deterministic
    unit lifetime; the defaults put all mass on ages [0, 0.1) (births
    early in life) versus [0.9, 1.0) (births late in life).  Although
    the two models share the mean number of births per individual, the
    mean time spent with a single individual alive differs: it is
    dominated by the wait before the first birth.  The front profile
    runs on master seed ``seed`` and the back profile on ``seed + 1``.
    """

    d = float(delta)
    if not (math.isfinite(d) and d >= 0.0):
        raise ValueError(f"delta must be finite and >= 0, got {delta!r}")
    if front is None:
        front = StepIntensity(((0.0, 0.1, d / 0.1),)) if d > 0 else StepIntensity(())
    if back is None:
        back = StepIntensity(((0.9, 1.0, d / 0.1),)) if d > 0 else StepIntensity(())
    results = {}
    for name, profile, off in (("front", front, 0), ("back", back, 1)):
        mass = profile.mass if isinstance(profile, StepIntensity) else None
        if mass is None:
            raise ValueError(f"{name} profile must be a StepIntensity")
        if abs(mass - d) > 1e-9 * max(1.0, d):
            raise ValueError(
                f"{name} profile mass {mass!r} does not match delta {d!r}"
            )
        model = AgeVaryingBirth.from_step(profile)
        summary = monte_carlo(
            DeterministicLifetime(1.0),
            model,
            StoppingPolicy(population_cap=population_cap, event_cap=event_cap),
            replicates=replicates,
            master_seed=(int(seed) + off) & _MASK64,
            workers=workers,
            k_max=1,
        )
        results[name] = {
            "estimate": summary.mean_occupation(1),
            "stderr": summary.se_occupation(1),
            "capped_frac": summary.capped_fraction,
            "seed": summary.master_seed,
        }
    diff = results["back"]["estimate"] - results["front"]["estimate"]
    pooled = math.hypot(results["front"]["stderr"], results["back"]["stderr"])
    return {
        "experiment": "age_varying",
        "delta": d,
        "n_reps": int(replicates),
        "seed": int(seed),
        "front": results["front"],
        "back": results["back"],
        "difference": diff,
        "pooled_se": pooled,
        "z_score": _z_score(diff, 0.0, pooled),
    }


def counterexample_batch(
    delta: float,
    batch_size: int,
    replicates: int = 10_000,
    seed: int = 0,
    k_max: int = 4,
    population_cap: int = 64,
    event_cap: int = 10**8,
    workers: int = 1,
) -> dict:
    """Per-level occupation times under batch births for a
    deterministic versus an exponential unit-mean lifetime.

    With ``batch_size >= 2`` and a deterministic lifetime, all
    individuals born together die together, which changes the level
    occupation law; the two distributions are compared per level with a
    z-score on the difference.  det1 runs on master seed ``seed`` and
    exp1 on ``seed + 1``.
    """

    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2 for this comparison, got {batch_size!r}")
    model = BatchBirth(delta, batch_size)
    policy = StoppingPolicy(population_cap=population_cap, event_cap=event_cap)
    tables = {}
    for name, off in (("det1", 0), ("exp1", 1)):
        summary = monte_carlo(
            name,
            model,
            policy,
            replicates=replicates,
            master_seed=(int(seed) + off) & _MASK64,
            workers=workers,
            k_max=k_max,
        )
        tables[name] = {
            "estimate": [summary.mean_occupation(k) for k in range(1, k_max + 1)],
            "stderr": [summary.se_occupation(k) for k in range(1, k_max + 1)],
            "capped_frac": summary.capped_fraction,
            "seed": summary.master_seed,
        }
    per_k = []
    for idx in range(k_max):
        d_est = tables["det1"]["estimate"][idx]
        e_est = tables["exp1"]["estimate"][idx]
        pooled = math.hypot(tables["det1"]["stderr"][idx], tables["exp1"]["stderr"][idx])
        diff = d_est - e_est
        per_k.append(
            {
                "K": idx + 1,
                "difference": diff,
                "pooled_se": pooled,
                "z_score": _z_score(diff, 0.0, pooled),
            }
        )
    return {
        "experiment": "batch",
        "delta": float(delta),
        "batch_size": int(batch_size),
        "n_reps": int(replicates),
        "seed": int(seed),
        "det1": tables["det1"],
        "exp1": tables["exp1"],
        "per_k": per_k,
    }


def tn_growth_experiment(
    delta: float,
    sampler: LifetimeSampler | str,
    n_values: Sequence[int],
    replicates: int = 10_000,
    seed: int = 0,
    workers: int = 1,
) -> dict:
    """Growth of the mean time spent at population sizes 1..N.

    For each N the process runs under ``population_cap = N + 1``, so
    ``total_time`` measures the time until the population first exceeds
    N or dies out.  For ``delta > 1`` that mean grows like
    ``log(N) / delta``; the least-squares slope of the mean against
    ``log N`` is returned together with its propagated standard error.
    N-value ``n_values[j]`` runs on master seed ``seed + j``.
    """

    d = float(delta)
    if not (math.isfinite(d) and d > 1.0):
        raise ValueError(f"delta must be > 1, got {delta!r}")
    ns = [int(n) for n in n_values]
    if len(ns) < 3:
        raise ValueError(f"need at least 3 population sizes, got {len(ns)}")
    if any(b <= a for a, b in zip(ns, ns[1:])):
        raise ValueError(f"population sizes must be strictly increasing, got {ns!r}")
    if ns[0] < 2:
        raise ValueError(f"population sizes must be >= 2, got {ns!r}")

    smp = make_sampler(sampler)
    means: list[float] = []
    ses: list[float] = []
    capped: list[float] = []
    for off, n in enumerate(ns):
        summary = monte_carlo(
            smp,
            HomogeneousBirth(d),
            StoppingPolicy(population_cap=n + 1, event_cap=10**9),
            replicates=replicates,
            master_seed=(int(seed) + off) & _MASK64,
            workers=workers,
            k_max=1,
        )
        means.append(summary.mean_total_time)
        ses.append(summary.se_total_time)
        capped.append(summary.capped_fraction)

    xs = [math.log(n) for n in ns]
    x_bar = math.fsum(xs) / len(xs)
    y_bar = math.fsum(means) / len(means)
    sxx = math.fsum((x - x_bar) ** 2 for x in xs)
    slope = math.fsum((x - x_bar) * (y - y_bar) for x, y in zip(xs, means)) / sxx
    slope_se = math.sqrt(
        math.fsum(((x - x_bar) / sxx) ** 2 * se * se for x, se in zip(xs, ses))
    )
    theory = 1.0 / d
    return {
        "experiment": "tn_growth",
        "delta": d,
        "dist": smp.name,
        "n_values": ns,
        "means": means,
        "stderrs": ses,
        "capped_fracs": capped,
        "n_reps": int(replicates),
        "seed": int(seed),
        "slope": slope,
        "slope_se": slope_se,
        "theory_slope": theory,
        "z_score": _z_score(slope, theory, slope_se),
    }
