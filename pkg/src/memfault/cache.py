"""Sliced, set-associative last-level cache with a latency model.

Only the LLC is modeled structurally.  A hit costs ``llc`` cycles, a miss
``dram`` cycles; L1/L2 effects show up only as optional downward jitter on
hit latencies.  Replacement is strict LRU.

Probing walks an eviction set from most- to least-recently used, so a
single foreign line in the set costs exactly one miss instead of cascading
through the whole set.  Each probe reverses the LRU order of the set, so
consecutive probes must alternate direction; :func:`prime_probe_wait` does
this.
"""
from __future__ import annotations

import math
import random
import statistics
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import TextIO

MiB = 1 << 20


def _xor_mask(bits: Sequence[int]) -> int:
    m = 0
    for b in bits:
        m |= 1 << b
    return m


# Illustrative 4-slice hash over physical address bits 17..34, shaped like
# the published Sandy Bridge functions but not claimed to match any CPU.
DEFAULT_SLICE_HASH = (
    _xor_mask(range(17, 35, 2)),
    _xor_mask(range(18, 35, 2)),
)


@dataclass(frozen=True)
class Latencies:
    l1: float = 4.0
    l2: float = 10.0
    llc: float = 40.0
    dram: float = 200.0


@dataclass(frozen=True)
class CacheConfig:
    line_size: int = 64
    ways: int = 12
    slices: int = 4
    total_size: int = 6 * MiB
    slice_hash: tuple[int, ...] = DEFAULT_SLICE_HASH
    latencies: Latencies = field(default_factory=Latencies)
    # probability of a spurious eviction in the monitored set per victim step
    noise: float = 0.0
    # std (cycles) of the downward hit-latency jitter from L1/L2 residency
    jitter: float = 0.0
    replacement: str = "lru"

    def __post_init__(self):
        for name in ("line_size", "slices", "sets_per_slice"):
            v = getattr(self, name)
            if v < 1 or v & (v - 1):
                raise ValueError(f"{name} must be a power of two, got {v}")
        if self.ways < 1:
            raise ValueError("ways must be >= 1")
        if (1 << len(self.slice_hash)) != self.slices:
            raise ValueError("slice_hash needs log2(slices) masks")
        lat = self.latencies
        if not lat.l1 < lat.l2 < lat.llc < lat.dram:
            raise ValueError("latencies must satisfy l1 < l2 < llc < dram")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError("noise is a probability")
        if self.replacement != "lru":
            raise ValueError(f"unsupported replacement policy {self.replacement!r}")

    @property
    def sets_per_slice(self) -> int:
        return self.total_size // (self.line_size * self.ways * self.slices)

    @property
    def offset_bits(self) -> int:
        return self.line_size.bit_length() - 1

    @property
    def set_bits(self) -> int:
        return self.sets_per_slice.bit_length() - 1

    @property
    def step(self) -> float:
        """Increase of a probe's mean latency per evicted way."""
        return (self.latencies.dram - self.latencies.llc) / self.ways


class InsufficientCollisions(Exception):
    pass


class Inseparable(Exception):
    pass


class NoDetection(Exception):
    def __init__(self, iterations: int):
        super().__init__(f"no detection after {iterations} iterations")
        self.iterations = iterations


def slice_of(addr: int, cfg: CacheConfig) -> int:
    sl = 0
    for i, mask in enumerate(cfg.slice_hash):
        sl |= ((addr & mask).bit_count() & 1) << i
    return sl


def locate(addr: int, cfg: CacheConfig) -> tuple[int, int, int]:
    """Return ``(slice, set, tag)`` for a physical address."""
    line = addr >> cfg.offset_bits
    return slice_of(addr, cfg), line & (cfg.sets_per_slice - 1), line >> cfg.set_bits


def candidates(target: int, cfg: CacheConfig, window: tuple[int, int]):
    """Line addresses in ``[start, end)`` that collide with ``target`` in (slice, set)."""
    start, end = window
    sl, st, _ = locate(target, cfg)
    stride = cfg.line_size * cfg.sets_per_slice
    first = start - start % stride + st * cfg.line_size
    if first < start:
        first += stride
    target_line = target >> cfg.offset_bits
    for addr in range(first, end, stride):
        if slice_of(addr, cfg) == sl and addr >> cfg.offset_bits != target_line:
            yield addr


def select_eviction_set(cfg: CacheConfig, found) -> list[int]:
    picked = sorted(set(found))[: cfg.ways]
    if len(picked) < cfg.ways:
        raise InsufficientCollisions(f"found {len(picked)} colliding lines, need {cfg.ways}")
    return picked


def find_eviction_set(target: int, cfg: CacheConfig, window: tuple[int, int]) -> list[int]:
    """The ``ways`` lowest addresses in ``window`` sharing target's slice and set."""
    return select_eviction_set(cfg, candidates(target, cfg, window))


class CacheState:
    def __init__(self, cfg: CacheConfig, rng: random.Random | None = None):
        self.cfg = cfg
        self.rng = rng or random.Random(0)
        # (slice, set) -> resident tags, LRU first
        self.lines: dict[tuple[int, int], list[int]] = {}
        self.version: dict[tuple[int, int], int] = {}
        self._foreign = 0

    def resident(self, key: tuple[int, int]) -> list[int]:
        return list(self.lines.get(key, ()))

    def total_resident(self) -> int:
        return sum(len(v) for v in self.lines.values())

    def hit_latency(self) -> float:
        lat = self.cfg.latencies
        if self.cfg.jitter <= 0:
            return lat.llc
        return max(lat.l1, lat.llc - abs(self.rng.gauss(0.0, self.cfg.jitter)))

    def evict_index(self, tags: list[int]) -> int:
        return 0  # LRU

    def touch(self, key: tuple[int, int], tag: int) -> float:
        tags = self.lines.setdefault(key, [])
        self.version[key] = self.version.get(key, 0) + 1
        if tag in tags:
            tags.remove(tag)
            tags.append(tag)
            return self.hit_latency()
        if len(tags) >= self.cfg.ways:
            del tags[self.evict_index(tags)]
        tags.append(tag)
        return self.cfg.latencies.dram

    def spurious_eviction(self, key: tuple[int, int]) -> None:
        """Some unrelated line is loaded into ``key``'s set."""
        self._foreign -= 1
        self.touch(key, self._foreign)


def access(state: CacheState, addr: int) -> float:
    sl, st, tag = locate(addr, state.cfg)
    return state.touch((sl, st), tag)


@dataclass(frozen=True)
class ProbeSample:
    latencies: tuple[float, ...]

    @property
    def delta_mean(self) -> float:
        return sum(self.latencies) / len(self.latencies)


def prime(state: CacheState, eviction_set: Sequence[int]) -> None:
    for addr in eviction_set:
        access(state, addr)


def probe(state: CacheState, eviction_set: Sequence[int]) -> ProbeSample:
    """Time every line, walking ``eviction_set`` backwards (MRU first).

    Latencies are reported in ``eviction_set`` order.  The walk re-primes
    the set and leaves it in reversed LRU order.
    """
    lat = [0.0] * len(eviction_set)
    for i in range(len(eviction_set) - 1, -1, -1):
        lat[i] = access(state, eviction_set[i])
    return ProbeSample(tuple(lat))


def _set_key(eviction_set: Sequence[int], cfg: CacheConfig) -> tuple[int, int]:
    keys = {locate(a, cfg)[:2] for a in eviction_set}
    if len(keys) != 1:
        raise ValueError("eviction set addresses do not share one (slice, set)")
    return keys.pop()


def victim_step(state: CacheState, key: tuple[int, int], addrs: Sequence[int] = (),
                noise: float | None = None) -> None:
    """One step of everything that is not the attacker."""
    for a in addrs:
        access(state, a)
    p = state.cfg.noise if noise is None else noise
    if p > 0 and state.rng.random() < p:
        state.spurious_eviction(key)


@dataclass
class Calibration:
    low: float
    high: float
    a: list[ProbeSample]
    b: list[ProbeSample]

    @property
    def band(self) -> tuple[float, float]:
        return self.low, self.high

    def means(self) -> tuple[float, float]:
        return (statistics.fmean(s.delta_mean for s in self.a),
                statistics.fmean(s.delta_mean for s in self.b))

    def std_a(self) -> float:
        return statistics.pstdev(s.delta_mean for s in self.a)

    def write_csv(self, fp: TextIO) -> None:
        ways = len(self.a[0].latencies) if self.a else 0
        fp.write(",".join(["set_label", "trial"] + [f"way{i}" for i in range(ways)]
                          + ["delta_mean"]) + "\n")
        for label, rows in (("A", self.a), ("B", self.b)):
            for t, s in enumerate(rows):
                fp.write(",".join([label, str(t)] + [f"{x:g}" for x in s.latencies]
                                  + [f"{s.delta_mean:.6g}"]) + "\n")


def calibrate_threshold(state: CacheState, eviction_set: Sequence[int], target: int,
                        trials: int = 400, noise: float | None = None,
                        eps_min: float = 1.0) -> Calibration:
    """Measure baseline rounds {A} and one-victim-access rounds {B}.

    {A} probes right after priming, so no victim step (and no spurious
    eviction) happens in between; its spread comes from hit jitter only.
    {B} runs one victim step touching ``target``.

    ``low = mean(A) + 3 std(A) + eps_min``; ``high`` sits half a way-step
    above the {B} median, rejecting multi-eviction spikes.
    """
    if trials < 30:
        raise ValueError("calibration needs at least 30 trials per set")
    key = _set_key(eviction_set, state.cfg)
    if locate(target, state.cfg)[:2] != key:
        raise ValueError("target does not collide with the eviction set")
    a, b = [], []
    for _ in range(trials):
        prime(state, eviction_set)
        a.append(probe(state, eviction_set))
    for _ in range(trials):
        prime(state, eviction_set)
        victim_step(state, key, (target,), noise)
        b.append(probe(state, eviction_set))
    da = [s.delta_mean for s in a]
    db = [s.delta_mean for s in b]
    low = statistics.fmean(da) + 3 * statistics.pstdev(da) + eps_min
    med_a, med_b = statistics.median(da), statistics.median(db)
    high = med_b + (med_b - med_a) / 2
    if statistics.fmean(db) <= low or high <= low:
        raise Inseparable(f"mean(B)={statistics.fmean(db):.2f} not above low={low:.2f}")
    return Calibration(low, high, a, b)


@dataclass(frozen=True)
class Detection:
    iteration: int
    false_positives: int = 0

    @property
    def iterations_waited(self) -> int:
        return self.iteration


def _next_event(rng: random.Random, i: int, p: float) -> int:
    if p <= 0:
        return -1
    if p >= 1:
        return i + 1
    return i + 1 + int(math.log(1.0 - rng.random()) / math.log1p(-p))


def prime_probe_wait(state: CacheState, eviction_set: Sequence[int],
                     band: tuple[float, float], pause_limit: int,
                     victim_feed: Mapping[int, Sequence[int]] | None = None,
                     max_iterations: int = 10**6, fast: bool = True) -> Detection:
    """Probe in a tight loop until an in-band reading follows a quiet stretch.

    Iteration ``i`` runs one victim step (addresses ``victim_feed[i]`` plus
    spurious evictions at rate ``cfg.noise``) and then one probe.  A reading
    strictly inside ``band`` is a detection if at least ``pause_limit``
    out-of-band readings preceded it; otherwise it is treated as a false
    positive and the quiet counter restarts.

    ``fast`` skips simulating probes of a set nobody touched since the last
    probe; the result is identical.
    """
    cfg = state.cfg
    low, high = band
    key = _set_key(eviction_set, cfg)
    feed = victim_feed or {}
    order = list(eviction_set)
    tags = [locate(a, cfg)[2] for a in order]
    prime(state, order)
    clean = state.version[key]
    quiet_dm = cfg.latencies.llc
    use_fast = fast and cfg.jitter <= 0
    rng = state.rng
    next_noise = _next_event(rng, -1, cfg.noise)
    pause = 0
    false_pos = 0
    for i in range(max_iterations):
        touched = feed.get(i)
        if touched:
            for a in touched:
                access(state, a)
        if i == next_noise:
            state.spurious_eviction(key)
            next_noise = _next_event(rng, i, cfg.noise)
        if use_fast and state.version[key] == clean:
            tags.reverse()
            state.lines[key][:] = tags
            dm = quiet_dm
        else:
            dm = probe(state, order).delta_mean
            tags.reverse()
        order.reverse()
        state.version[key] += 1
        clean = state.version[key]
        if low < dm < high:
            if pause >= pause_limit:
                return Detection(i, false_pos)
            pause = 0
            false_pos += 1
        else:
            pause += 1
    raise NoDetection(max_iterations)
