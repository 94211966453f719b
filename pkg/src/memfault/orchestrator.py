"""The simulated machine and the three-phase attack.

One trial is one timeline:

I.   The attacker resolves the physical address of the victim's signing
     routine through the PFN oracle and builds an eviction set for it.
II.  It allocates a trigger page, hands its address to the DMA agent,
     and calibrates a detection band.
III. It sprays and frees pages, the victim starts and allocates, and the
     attacker runs the probe loop.  At detection the victim is descheduled
     (its pages get encrypted), the attacker raises the trigger, and the DMA
     agent overwrites the cipher block holding p on the predicted frame.
     The victim resumes, signs with whatever p decrypts to, and the
     attacker factors n offline.

Time inside phase III is counted in probe-loop iterations.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import random
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

from . import alloc as al
from . import cache as cm
from .memcrypt import (FRAME_SIZE, DmaPort, EncryptedMemory, decrypt_process_pages,
                       dma_write, encrypt_process_pages)
from .recovery import RecoveryFailed, recover_full_key, recover_q
from .rsa_crt import CrashSignal, RsaKey, Signature, keygen, sign_crt, sign_direct, verify
from .scenario import ScenarioConfig, to_flat
from .seeding import derive_seed

ATTACKER_PID = 1
VICTIM_PID = 2
FIRST_RUN_PID = 3
BINARY_PID = 4
TRIGGER_PATTERN = b"\xfa\x17\x0f\xfa\x17\x0f\xfa\x17"
MPI_MAX_BITS = 16384
SCHEMA = 1


class Outcome(str, Enum):
    KEY_RECOVERED = "KeyRecovered"
    MITIGATED = "Mitigated"
    VICTIM_CRASH = "VictimCrash"
    WRONG_PAGE = "WrongPage"
    NO_DETECTION = "NoDetection"
    RECOVERY_FAILED = "RecoveryFailed"


OUTCOMES = [o.value for o in Outcome]


def message_for(key: RsaKey, document: bytes, timestamp: int) -> int:
    """Signing input: digest of the document and a seconds-resolution timestamp."""
    h = hashlib.sha512(document + timestamp.to_bytes(8, "big")).digest()
    return int.from_bytes(h, "big") % key.n


def _mpi(x: int) -> bytes:
    nbits = x.bit_length()
    return nbits.to_bytes(2, "big") + x.to_bytes((nbits + 7) // 8, "big")


class Machine:
    def __init__(self, cfg: ScenarioConfig, rng: random.Random):
        self.cfg = cfg
        self.rng = rng
        self.mem = EncryptedMemory(cfg.frames, unit=cfg.unit, key=rng.randbytes(16))
        self.allocator = al.AllocatorState(
            cfg.frames, cfg.alloc_base, cfg.interference,
            random.Random(rng.getrandbits(64)), cfg.pagemap_readable)
        self.cache = cm.CacheState(cfg.cache, random.Random(rng.getrandbits(64)))
        self.port = DmaPort(self.mem)
        self.running: set[int] = set()
        code_pfn = cfg.victim.code_address // FRAME_SIZE
        self.mem.map(code_pfn, BINARY_PID, writable=False, data=rng.randbytes(FRAME_SIZE))

    def pagemap_phys(self, vaddr_phys: int) -> int:
        """Physical address of a mapping, as the oracle reports it to the attacker."""
        pfn = al.pagemap(self.allocator, ATTACKER_PID, [vaddr_phys // FRAME_SIZE])[0]
        return pfn * FRAME_SIZE + (vaddr_phys % FRAME_SIZE if pfn else 0)

    def deschedule(self, pid: int) -> None:
        if pid in self.running:
            self.running.discard(pid)
            encrypt_process_pages(self.mem, pid)

    def reschedule(self, pid: int) -> None:
        if pid not in self.running:
            decrypt_process_pages(self.mem, pid)
            self.running.add(pid)


@dataclass
class VictimProcess:
    pid: int
    key: RsaKey
    pages: list[int]
    key_pfn: int
    p_offset: int
    key_loaded: bool = False

    @property
    def p_block(self) -> int:
        return self.key_pfn * FRAME_SIZE + self.p_offset

    def key_struct(self) -> bytes:
        k = self.key
        body = b"".join(_mpi(x) for x in (k.q, k.d, k.q_inv))
        blob = bytes(14) + _mpi(k.p) + body
        return blob + bytes(-len(blob) % 16)


def spawn_victim(machine: Machine, pid: int, key: RsaKey) -> VictimProcess:
    prof = machine.cfg.victim
    machine.mem.register(pid, protected=True)
    pages = al.alloc(machine.allocator, pid, prof.pages)
    for pfn in pages:
        machine.mem.map(pfn, pid, writable=True, data=machine.rng.randbytes(FRAME_SIZE))
    machine.running.add(pid)
    return VictimProcess(pid, key, pages, pages[prof.key_index - 1], prof.p_offset)


def load_key(machine: Machine, proc: VictimProcess) -> None:
    machine.mem.store(proc.key_pfn * FRAME_SIZE + proc.p_offset - 16, proc.key_struct())
    proc.key_loaded = True


def read_p(machine: Machine, proc: VictimProcess) -> int:
    base = proc.p_block
    nbits = int.from_bytes(machine.mem.load(base - 2, 2), "big")
    if not 0 < nbits <= MPI_MAX_BITS:
        raise CrashSignal(f"MPI length {nbits} out of range")
    return int.from_bytes(machine.mem.load(base, (nbits + 7) // 8), "big")


def _snapshot(machine: Machine, proc: VictimProcess) -> dict[int, bytes]:
    out = {}
    for pfn in proc.pages:
        data = bytearray(machine.mem.frames[pfn].data)
        if pfn == proc.key_pfn:
            data[proc.p_offset:proc.p_offset + 16] = bytes(16)
        out[pfn] = hashlib.blake2b(data, digest_size=16).digest()
    return out


@dataclass
class VictimResult:
    signature: Signature | None
    crashed: bool = False
    mitigated: bool = False
    faulty: bool = False


def victim_run(machine: Machine, proc: VictimProcess, m: int, fault_hook=None,
               phase: str = "window", countermeasure: bool = False) -> VictimResult:
    """Run the victim's signing from its key load to signature release.

    ``fault_hook(machine)`` runs while the victim is descheduled and its
    pages are encrypted.  ``phase`` places the deschedule on the victim's
    timeline: ``early`` (before the key is loaded), ``window`` (key in
    memory, p not yet read) or ``late`` (p already consumed).
    """
    if phase not in ("early", "window", "late"):
        raise ValueError(f"unknown phase {phase!r}")
    if phase != "early" and not proc.key_loaded:
        load_key(machine, proc)
    s = None
    crashed = False
    if phase == "late":
        try:
            s = sign_crt(proc.key, m, _p_or_none(read_p(machine, proc), proc.key))
        except CrashSignal:
            crashed = True
    if fault_hook is not None:
        before = _snapshot(machine, proc)
        machine.deschedule(proc.pid)
        fault_hook(machine)
        machine.reschedule(proc.pid)
        if _snapshot(machine, proc) != before:
            crashed = True
    if phase == "early":
        load_key(machine, proc)
    if crashed:
        return VictimResult(None, crashed=True)
    if s is None:
        try:
            s = sign_crt(proc.key, m, _p_or_none(read_p(machine, proc), proc.key))
        except CrashSignal:
            return VictimResult(None, crashed=True)
    if countermeasure and not verify(proc.key.n, proc.key.e, m, s):
        return VictimResult(None, mitigated=True, faulty=True)
    return VictimResult(s, faulty=s.faulty)


def _p_or_none(p_mem: int, key: RsaKey) -> int | None:
    return None if p_mem == key.p else p_mem


@dataclass
class TrialOutcome:
    trial: int
    seed: int
    outcome: Outcome
    factor: int | None = None
    detection_latency: int | None = None
    fault_page_hit: bool = False
    predicted_pfn: int | None = None
    key_pfn: int | None = None
    faulty_signature: bool = False
    phase: str | None = None
    correct_source: str = "same-second"

    def row(self, n_hex: bool = True) -> dict:
        return {
            "trial": self.trial,
            "seed": self.seed,
            "outcome": self.outcome.value,
            "factor": "" if self.factor is None else hex(self.factor),
            "detection_latency": "" if self.detection_latency is None else self.detection_latency,
            "fault_page_hit": int(self.fault_page_hit),
            "predicted_pfn": "" if self.predicted_pfn is None else hex(self.predicted_pfn),
            "key_pfn": "" if self.key_pfn is None else hex(self.key_pfn),
            "faulty_signature": int(self.faulty_signature),
            "phase": self.phase or "",
        }


TRIAL_COLUMNS = ["trial", "seed", "outcome", "factor", "detection_latency", "fault_page_hit",
                 "predicted_pfn", "key_pfn", "faulty_signature", "phase"]


def _correct_signature(machine: Machine, key: RsaKey, m: int) -> Signature:
    cfg = machine.cfg
    if not cfg.double_signature:
        return sign_crt(key, m)
    first = spawn_victim(machine, FIRST_RUN_PID, key)
    res = victim_run(machine, first, m, countermeasure=cfg.countermeasure)
    machine.running.discard(FIRST_RUN_PID)
    for pfn in first.pages:
        machine.mem.unmap(pfn)
    al.free(machine.allocator, FIRST_RUN_PID, list(reversed(first.pages)))
    return res.signature


def run_attack_trial(cfg: ScenarioConfig, trial: int = 0) -> TrialOutcome:
    seed = derive_seed(cfg.seed, trial)
    rng = random.Random(seed)
    key = keygen(cfg.key_bits, rng)
    machine = Machine(cfg, rng)
    vic, att = cfg.victim, cfg.attacker
    m = message_for(key, b"out-of-office auto reply", cfg.timestamp + trial)
    s = _correct_signature(machine, key, m)
    out = TrialOutcome(trial, seed, Outcome.NO_DETECTION,
                       correct_source="same-second" if cfg.double_signature else "prior-run")

    # phase I: eviction set for the signing routine
    target = machine.pagemap_phys(vic.code_address)
    window = (att.window_base, att.window_base + att.window_size)
    evset = cm.find_eviction_set(target, cfg.cache, window)

    # phase II: trigger page and detection band
    trigger = al.alloc(machine.allocator, ATTACKER_PID, 1)
    machine.mem.map(trigger[0], ATTACKER_PID, writable=True)
    machine.port.trigger_address = machine.pagemap_phys(trigger[0] * FRAME_SIZE)
    band = att.band
    if band is None:
        try:
            band = cm.calibrate_threshold(machine.cache, evset, target,
                                          att.calibration_trials).band
        except cm.Inseparable:
            return out

    # phase III
    sprayed = al.spray_and_free(machine.allocator, ATTACKER_PID, att.spray_count)
    try:
        predicted = al.predict_target(sprayed, vic.key_index)
    except IndexError:
        predicted = None
    proc = spawn_victim(machine, VICTIM_PID, key)
    out.predicted_pfn, out.key_pfn = predicted, proc.key_pfn
    try:
        det = cm.prime_probe_wait(machine.cache, evset, band, att.pause_limit,
                                  {vic.sign_at: (vic.code_address,)}, att.max_iterations)
    except cm.NoDetection:
        return out
    out.detection_latency = det.iteration - vic.sign_at
    if det.iteration < vic.key_load_at:
        out.phase = "early"
    elif det.iteration <= vic.sign_at + vic.injection_deadline:
        out.phase = "window"
    else:
        out.phase = "late"

    injected: list[int] = []

    def dma_agent(mach: Machine) -> None:
        mach.mem.store(trigger[0] * FRAME_SIZE, TRIGGER_PATTERN)
        if predicted is not None and mach.port.poll(TRIGGER_PATTERN):
            addr = predicted * FRAME_SIZE + (vic.p_offset & ~15)
            dma_write(mach.port, addr, mach.rng.randbytes(16))
            injected.append(predicted)

    res = victim_run(machine, proc, m, dma_agent, out.phase, cfg.countermeasure)
    out.fault_page_hit = bool(injected) and injected[0] == proc.key_pfn
    if injected and not out.fault_page_hit:
        owner, burst = machine.allocator.owner_of(injected[0])
        if burst is not None and burst.kernel and burst.for_pid == VICTIM_PID:
            res = VictimResult(None, crashed=True)
    out.faulty_signature = res.faulty
    if res.crashed:
        out.outcome = Outcome.VICTIM_CRASH
        return out
    if res.mitigated:
        out.outcome = Outcome.MITIGATED
        return out
    try:
        factor = recover_q(s, res.signature, key.n)
        rec = recover_full_key(key.n, key.e, factor)
        if sign_direct(rec.as_rsa_key(), m).s != s.s:
            raise RecoveryFailed("recovered key does not reproduce the signature")
    except (RecoveryFailed, ValueError):
        out.outcome = Outcome.RECOVERY_FAILED if out.fault_page_hit else Outcome.WRONG_PAGE
        return out
    out.outcome = Outcome.KEY_RECOVERED
    out.factor = factor
    return out


@dataclass
class ExperimentReport:
    cfg: ScenarioConfig
    outcomes: list[TrialOutcome] = field(default_factory=list)

    @property
    def trials(self) -> int:
        return len(self.outcomes)

    def histogram(self) -> dict[str, int]:
        h = dict.fromkeys(OUTCOMES, 0)
        for o in self.outcomes:
            h[o.outcome.value] += 1
        return h

    @property
    def success_rate(self) -> float:
        return self.histogram()[Outcome.KEY_RECOVERED.value] / self.trials if self.trials else 0.0

    @property
    def mean_detection_latency(self) -> float | None:
        lat = [o.detection_latency for o in self.outcomes if o.detection_latency is not None]
        return statistics.fmean(lat) if lat else None

    def summary(self) -> dict:
        lat = self.mean_detection_latency
        return {
            "schema": SCHEMA,
            "seed": self.cfg.seed,
            "config": to_flat(self.cfg),
            "trials": self.trials,
            "histogram": self.histogram(),
            "success_rate": round(self.success_rate, 6),
            "mean_detection_latency": None if lat is None else round(lat, 6),
            "fault_page_hits": sum(o.fault_page_hit for o in self.outcomes),
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, TRIAL_COLUMNS, lineterminator="\n")
        w.writeheader()
        for o in self.outcomes:
            w.writerow(o.row())
        return buf.getvalue()


def _run_one(args) -> TrialOutcome:
    cfg, trial = args
    return run_attack_trial(cfg, trial)


def run_experiment(cfg: ScenarioConfig, trials: int, workers: int = 1) -> ExperimentReport:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    jobs = [(cfg, t) for t in range(trials)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_run_one, jobs, chunksize=max(1, trials // (4 * workers))))
    else:
        results = [_run_one(j) for j in jobs]
    results.sort(key=lambda o: o.trial)
    return ExperimentReport(cfg, results)
