"""Scenario configuration, its flat ``key = value`` file format, and presets.

Dotted keys address nested fields (``cache.noise``, ``victim.sign_at``).
Lines starting with ``#`` or ``;`` are comments.  Integers may be written
in hex with a ``0x`` prefix.  ``attacker.band`` is ``auto`` (calibrate) or
``low,high``; ``cache.slice_hash`` is a comma-separated list of hex masks.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from .alloc import Interference
from .cache import CacheConfig, Latencies, MiB


class ConfigError(ValueError):
    pass


@dataclass
class VictimProfile:
    pages: int = 16
    key_index: int = 10
    # p's value starts here; its 2-byte length header sits just before it
    p_offset: int = 0x120
    code_address: int = 0x0040_1A40
    key_load_at: int = 2000
    sign_at: int = 10000
    # probe iterations between reaching the signing routine and reading p
    injection_deadline: int = 500

    def validate(self) -> None:
        if self.p_offset % 16 or not 16 <= self.p_offset < 4096 - 256:
            raise ConfigError("victim.p_offset must be 16-aligned in [16, 3840)")
        if not 1 <= self.key_index <= self.pages:
            raise ConfigError("victim.key_index must lie in [1, victim.pages]")
        if not 0 <= self.key_load_at <= self.sign_at:
            raise ConfigError("victim.key_load_at must not come after victim.sign_at")


@dataclass
class AttackerProfile:
    spray_count: int = 448
    pause_limit: int = 1000
    band: tuple[float, float] | None = None
    calibration_trials: int = 60
    max_iterations: int = 40000
    window_base: int = 0x0100_0000
    window_size: int = 6 * MiB


@dataclass
class ScenarioConfig:
    key_bits: int = 32
    unit: int = 4096
    frames: int = 1 << 18
    seed: int = 0
    countermeasure: bool = False
    double_signature: bool = True
    pagemap_readable: bool = True
    timestamp: int = 1_460_000_000
    cache: CacheConfig = field(default_factory=CacheConfig)
    interference: Interference = field(default_factory=Interference)
    victim: VictimProfile = field(default_factory=VictimProfile)
    attacker: AttackerProfile = field(default_factory=AttackerProfile)

    @property
    def alloc_base(self) -> int:
        """First pfn handed to the allocator; lower frames hold code and the probe buffer."""
        return (self.attacker.window_base + self.attacker.window_size) // 4096

    def validate(self) -> None:
        self.victim.validate()
        if self.unit not in (4096, 64):
            raise ConfigError("unit must be 4096 or 64")
        if self.key_bits < 8:
            raise ConfigError("key_bits must be at least 8")
        if self.victim.code_address >= self.attacker.window_base:
            raise ConfigError("victim.code_address must lie below the probe window")
        if self.frames <= self.alloc_base + self.victim.pages + self.attacker.spray_count:
            raise ConfigError("too few frames for the configured layout")


def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], int):
            return ",".join(f"{x:#x}" for x in v)
        return ",".join(f"{x:g}" for x in v)
    if v is None:
        return "auto"
    if isinstance(v, float):
        return f"{v:g}"
    return str(v)


def to_flat(obj, prefix: str = "") -> dict[str, str]:
    out: dict[str, str] = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if is_dataclass(v):
            out.update(to_flat(v, key + "."))
        else:
            out[key] = _format(v)
    return out


def _parse(raw: str, like: Any, key: str) -> Any:
    raw = raw.strip()
    try:
        if key == "attacker.band":
            if raw.lower() in ("auto", "none", ""):
                return None
            lo, hi = (float(x) for x in raw.split(","))
            return (lo, hi)
        if isinstance(like, bool):
            if raw.lower() in ("1", "true", "on", "yes"):
                return True
            if raw.lower() in ("0", "false", "off", "no"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw, 0)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(int(x, 0) for x in raw.split(","))
        if isinstance(like, str):
            return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    raise ConfigError(f"unsupported key {key}")


def _apply(obj, path: list[str], raw: str, full: str):
    name = path[0]
    if name not in {f.name for f in fields(obj)}:
        raise ConfigError(f"unknown config key {full!r}")
    cur = getattr(obj, name)
    if len(path) == 1:
        if is_dataclass(cur):
            raise ConfigError(f"{full!r} is a section, not a value")
        return dataclasses.replace(obj, **{name: _parse(raw, cur, full)})
    if not is_dataclass(cur):
        raise ConfigError(f"unknown config key {full!r}")
    return dataclasses.replace(obj, **{name: _apply(cur, path[1:], raw, full)})


def from_flat(values: dict[str, str], base: ScenarioConfig | None = None) -> ScenarioConfig:
    cfg = base or ScenarioConfig()
    try:
        for key, raw in values.items():
            cfg = _apply(cfg, key.split("."), raw, key)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    return cfg


def load_config(path: str | Path, base: ScenarioConfig | None = None) -> ScenarioConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    parser.read_string("[scenario]\n" + path.read_text())
    return from_flat(dict(parser["scenario"]), base)


def dump_config(cfg: ScenarioConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_flat(cfg).items())


def _t520() -> ScenarioConfig:
    return ScenarioConfig(
        key_bits=1024,
        cache=CacheConfig(total_size=6 * MiB, ways=12, line_size=64, slices=4,
                          latencies=Latencies(l1=4, l2=10, llc=40, dram=200)),
        victim=VictimProfile(key_index=10, sign_at=200_000, key_load_at=150_000),
        attacker=AttackerProfile(band=(140.0, 180.0), pause_limit=150_000, spray_count=448,
                                 max_iterations=400_000),
    )


PRESETS = {
    "default": ScenarioConfig,
    "paper-t520": _t520,
}

# preset key -> where the number comes from
PRESET_NOTES = {
    "paper-t520": {
        "key_bits": "1024-bit primes, i.e. a 2048-bit modulus with e = 65537 (GnuPG RSA signing key)",
        "cache.total_size": "6 MiB LLC of the i7-2670QM in the ThinkPad T520 test laptop",
        "cache.ways": "twelve-way LLC, hence twelve colliding addresses per eviction set",
        "cache.line_size": "64-byte x86-64 cache line",
        "cache.slices": "4 LLC slices on the quad-core Sandy Bridge part",
        "cache.latencies.l1": "~4 cycles for an L1 hit (Levinthal's Nehalem latency figures)",
        "cache.latencies.l2": "~10 cycles for an L2 hit (same source)",
        "cache.latencies.llc": "~40 cycles for an LLC hit; below 40 means served by a cache",
        "cache.latencies.dram": "simulator choice: DRAM latency is not reported for the T520",
        "attacker.band": ("140 < delta_mean < 180 cycles, measured on real hardware; with these "
                          "latencies one evicted way reads ~53.3, so trials end in NoDetection "
                          "unless attacker.band = auto is set"),
        "attacker.pause_limit": "150000 quiet iterations required before a reading counts",
        "attacker.spray_count": "inside the 380-500 page range where allocator prediction peaked at ~55-60%",
        "victim.key_index": "p lands on the victim's 10th allocated page, i.e. the tenth-last freed page",
        "victim.sign_at": "simulator choice: must exceed pause_limit for a detection to be possible",
        "victim.key_load_at": "simulator choice",
        "attacker.max_iterations": "simulator choice",
    },
    "default": {
        "cache": "6 MiB, 12-way, 4-slice LLC with 4/10/40/200-cycle latencies",
        "attacker.band": "auto: calibrated per trial from {A}/{B} rounds",
        "attacker.pause_limit": "1000: scaled down for simulation speed",
        "attacker.spray_count": "448, inside the 380-500 page plateau",
        "victim.key_index": "10",
    },
}


def preset(name: str) -> ScenarioConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}") from None
