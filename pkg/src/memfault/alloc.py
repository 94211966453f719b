"""LIFO page-frame allocator and the spray-and-free placement predictor.

Freed frames go on top of a stack and are handed out again first.  Frames
never used since boot sit below the stack and are handed out top-down once
the stack is empty.

Interference models everything else on the machine that allocates between
the attacker's free and the victim's allocations: before each pop, with
probability ``probability``, a burst of ``burst_min + Geometric(burst_mean)``
frames is taken off the top and kept.  With ``burst_min`` at least as large
as the sprayed pool, a burst always swallows the whole pool, so a miss
never leaves the victim's page inside it.
"""
from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass, field
from typing import TextIO

from .seeding import derive_seed

INTERFERENCE_PID = -2
KERNEL_PID = -3


class OutOfMemory(Exception):
    pass


class NotOwned(Exception):
    pass


@dataclass(frozen=True)
class Interference:
    probability: float = 0.0
    burst_min: int = 1024
    burst_mean: float = 128.0
    # share of bursts that are kernel structures (page tables and the like)
    # allocated on behalf of the requesting process
    kernel_share: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0 or not 0.0 <= self.kernel_share <= 1.0:
            raise ValueError("interference probabilities must lie in [0, 1]")
        if self.burst_min < 1 or self.burst_mean < 0:
            raise ValueError("bursts need burst_min >= 1 and burst_mean >= 0")


@dataclass
class Burst:
    for_pid: int
    kernel: bool
    pfns: list[int]


class AllocatorState:
    def __init__(self, frames: int, base: int = 0, interference: Interference | None = None,
                 rng: random.Random | None = None, pagemap_readable: bool = True):
        if frames <= base:
            raise ValueError("allocator needs at least one frame")
        self.frames = frames
        self.base = base
        self.interference = interference or Interference()
        self.rng = rng or random.Random(0)
        self.pagemap_readable = pagemap_readable
        self.free_stack: list[int] = []
        self._fresh = frames - 1  # next never-used pfn, counting down to base
        self.allocated: dict[int, list[int]] = {}
        self.owner: dict[int, int] = {}
        self.bursts: list[Burst] = []

    def clone(self, seed: int) -> AllocatorState:
        st = AllocatorState(self.frames, self.base, self.interference, random.Random(seed),
                            self.pagemap_readable)
        st.free_stack = list(self.free_stack)
        st._fresh = self._fresh
        st.allocated = {pid: list(v) for pid, v in self.allocated.items()}
        st.owner = dict(self.owner)
        st.bursts = [Burst(b.for_pid, b.kernel, list(b.pfns)) for b in self.bursts]
        return st

    @property
    def free_count(self) -> int:
        return len(self.free_stack) + (self._fresh - self.base + 1)

    def total_frames(self) -> int:
        return self.free_count + sum(len(v) for v in self.allocated.values())

    def _take(self, n: int) -> list[int]:
        if n > self.free_count:
            raise OutOfMemory(f"need {n} frames, {self.free_count} free")
        k = min(n, len(self.free_stack))
        out = self.free_stack[len(self.free_stack) - k:][::-1]
        del self.free_stack[len(self.free_stack) - k:]
        rest = n - k
        if rest:
            out.extend(range(self._fresh, self._fresh - rest, -1))
            self._fresh -= rest
        return out

    def _burst(self, for_pid: int, reserve: int = 1) -> None:
        """Hand a burst to interference, leaving ``reserve`` frames free."""
        cfg = self.interference
        size = cfg.burst_min
        if cfg.burst_mean > 0:
            p = 1.0 / (1.0 + cfg.burst_mean)
            size += int(math.log(1.0 - self.rng.random()) / math.log1p(-p))
        size = min(size, self.free_count - reserve)
        kernel = self.rng.random() < cfg.kernel_share
        pfns = self._take(size)
        self.bursts.append(Burst(for_pid, kernel, pfns))
        self.allocated.setdefault(KERNEL_PID if kernel else INTERFERENCE_PID, []).extend(pfns)

    def owner_of(self, pfn: int) -> tuple[int, Burst | None]:
        """Owning pid of ``pfn`` (or None if free), plus its burst record if any."""
        if pfn in self.owner:
            return self.owner[pfn], None
        for b in self.bursts:
            if pfn in b.pfns:
                return (KERNEL_PID if b.kernel else INTERFERENCE_PID), b
        return None, None


def alloc(state: AllocatorState, pid: int, count: int) -> list[int]:
    if count > state.free_count:
        raise OutOfMemory(f"pid {pid} asked for {count} frames, {state.free_count} free")
    p = state.interference.probability
    out = []
    for i in range(count):
        if p > 0 and state.free_count > count - i and state.rng.random() < p:
            state._burst(pid, reserve=count - i)
        out.extend(state._take(1))
    mine = state.allocated.setdefault(pid, [])
    mine.extend(out)
    for pfn in out:
        state.owner[pfn] = pid
    return out


def free(state: AllocatorState, pid: int, pfns: list[int]) -> None:
    """Push ``pfns`` in order; the last one freed is the first reused."""
    for pfn in pfns:
        if state.owner.get(pfn) != pid:
            raise NotOwned(f"pfn {pfn} is not allocated to pid {pid}")
    gone = set(pfns)
    if len(gone) != len(pfns):
        raise NotOwned("duplicate pfn in free list")
    state.allocated[pid] = [x for x in state.allocated[pid] if x not in gone]
    for pfn in pfns:
        del state.owner[pfn]
    state.free_stack.extend(pfns)


def pagemap(state: AllocatorState, pid: int, pfns: list[int]) -> list[int]:
    """PFN oracle for the caller's own mappings; reads zeros when locked down."""
    if not state.pagemap_readable:
        return [0] * len(pfns)
    return list(pfns)


def spray_and_free(state: AllocatorState, attacker_pid: int, count: int) -> list[int]:
    pages = alloc(state, attacker_pid, count)
    sprayed = pagemap(state, attacker_pid, pages)
    free(state, attacker_pid, pages)
    return sprayed


def predict_target(sprayed: list[int], victim_alloc_index: int) -> int:
    """PFN the victim's ``victim_alloc_index``-th allocation gets under pure LIFO."""
    if not 1 <= victim_alloc_index <= len(sprayed):
        raise IndexError(f"index {victim_alloc_index} outside sprayed pool of {len(sprayed)}")
    return sprayed[len(sprayed) - victim_alloc_index]


@dataclass(frozen=True)
class PredictionRecord:
    sprayed_pfns: tuple[int, ...]
    predicted_pfn: int | None
    actual_pfn: int

    @property
    def hit(self) -> bool:
        return self.predicted_pfn == self.actual_pfn


@dataclass(frozen=True)
class VictimAllocs:
    pages: int = 16
    key_index: int = 10


@dataclass
class PredictionRow:
    spray_count: int
    trials: int
    hits: int
    records: list[PredictionRecord] = field(default_factory=list, repr=False)

    @property
    def rate(self) -> float:
        return self.hits / self.trials if self.trials else 0.0


def prediction_trial(state: AllocatorState, spray_count: int, victim,
                     attacker_pid: int = 1, victim_pid: int = 2) -> PredictionRecord:
    sprayed = spray_and_free(state, attacker_pid, spray_count)
    try:
        predicted = predict_target(sprayed, victim.key_index)
    except IndexError:
        predicted = None
    pages = alloc(state, victim_pid, victim.pages)
    return PredictionRecord(tuple(sprayed), predicted, pages[victim.key_index - 1])


def run_prediction_experiment(template: AllocatorState, spray_counts, trials_per_count: int,
                              victim=VictimAllocs(), seed: int = 0,
                              keep_records: bool = False) -> list[PredictionRow]:
    rows = []
    for count in spray_counts:
        row = PredictionRow(count, trials_per_count, 0)
        for t in range(trials_per_count):
            rec = prediction_trial(template.clone(derive_seed(seed, count, t)), count, victim)
            row.hits += rec.hit
            if keep_records:
                row.records.append(rec)
        rows.append(row)
    return rows


def write_prediction_csv(rows: list[PredictionRow], fp: TextIO) -> None:
    w = csv.writer(fp, lineterminator="\n")
    w.writerow(["spray_count", "trials", "hits", "rate"])
    for r in rows:
        w.writerow([r.spray_count, r.trials, r.hits, f"{r.rate:.4f}"])
