"""Candidate accelerator configurations, peak throughput and die-area cost model."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

TP_METHODS = ("all_gather", "all_reduce", "megatron")
SA_GRANULARITY = 32

DATA_DIR = Path(__file__).parent / "data"


class ConfigError(ValueError):
    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class HardwareConfig:
    """One accelerator device.  Per-core quantities are multiplied by ``core_count``.

    The MAC tree of a core has ``mt_lanes`` lanes of ``mt_width`` multipliers each.
    ``noc_bw`` is the per-core injection bandwidth, ``p2p_bw`` the per-device link.
    """

    freq_hz: float = 1.5e9
    sa_rows: int = 64
    sa_cols: int = 64
    mt_width: int = 16
    mt_lanes: int = 16
    core_count: int = 32
    local_mem_bytes: int = 2 * 1024**2
    global_mem_bytes: int = 16 * 1024**2
    dram_bw: float = 2e12
    dram_cap: float = 80e9
    noc_bw: float = 256e9
    p2p_bw: float = 64e9
    device_count: int = 1
    tp_method: str = "all_gather"

    @property
    def has_sa(self) -> bool:
        return self.sa_rows > 0 and self.sa_cols > 0

    @property
    def has_mt(self) -> bool:
        return self.mt_width > 0 and self.mt_lanes > 0

    @property
    def sa_macs_per_core(self) -> int:
        return self.sa_rows * self.sa_cols if self.has_sa else 0

    @property
    def mt_macs_per_core(self) -> int:
        return self.mt_width * self.mt_lanes if self.has_mt else 0

    @property
    def sa_macs(self) -> int:
        return self.sa_macs_per_core * self.core_count

    @property
    def mt_macs(self) -> int:
        return self.mt_macs_per_core * self.core_count

    @property
    def sram_bytes(self) -> int:
        return self.local_mem_bytes * self.core_count + self.global_mem_bytes

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_dict(cls, data: dict) -> "HardwareConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown hardware field '{k}'" for k in unknown])
        return cls(**data)

    @classmethod
    def load(cls, path) -> "HardwareConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
        return validate_config(cls.from_dict(data))


def validate_config(cfg: HardwareConfig) -> HardwareConfig:
    """Check every invariant and report all violations at once."""
    p = []
    for name in ("core_count", "device_count"):
        if getattr(cfg, name) < 1:
            p.append(f"{name} must be >= 1 (got {getattr(cfg, name)})")
    for name in ("sa_rows", "sa_cols", "mt_width", "mt_lanes"):
        if getattr(cfg, name) < 0:
            p.append(f"{name} must be >= 0 (got {getattr(cfg, name)})")
    for name in ("sa_rows", "sa_cols"):
        v = getattr(cfg, name)
        if v > 0 and v % SA_GRANULARITY:
            p.append(f"{name} must be a multiple of {SA_GRANULARITY} (got {v})")
    if (cfg.sa_rows == 0) != (cfg.sa_cols == 0) and cfg.mt_width == 0:
        p.append("systolic array needs both sa_rows and sa_cols")
    for name in ("freq_hz", "local_mem_bytes", "dram_bw", "dram_cap", "noc_bw"):
        if not getattr(cfg, name) > 0:
            p.append(f"{name} must be > 0 (got {getattr(cfg, name)})")
    if cfg.global_mem_bytes < 0:
        p.append(f"global_mem_bytes must be >= 0 (got {cfg.global_mem_bytes})")
    if cfg.p2p_bw < 0 or (cfg.device_count > 1 and not cfg.p2p_bw > 0):
        p.append(f"p2p_bw must be > 0 for multi-device configs (got {cfg.p2p_bw})")
    if cfg.tp_method not in TP_METHODS:
        p.append(f"tp_method must be one of {TP_METHODS} (got {cfg.tp_method!r})")
    if p:
        raise ConfigError(p)
    return cfg


def peak_performance(cfg: HardwareConfig) -> float:
    """Peak FLOP/s of one device, 2 FLOPs per MAC."""
    return (cfg.sa_macs_per_core + cfg.mt_macs_per_core) * cfg.core_count * 2 * cfg.freq_hz


@dataclass(frozen=True)
class AreaCostParams:
    area_per_sa_mac: float
    area_per_mt_mac: float
    area_per_sram_byte: float
    area_fixed_per_core: float
    area_io_fixed: float
    tech_node_label: str = "7nm"
    note: str = ""

    def __post_init__(self):
        bad = [f.name for f in fields(self)
               if isinstance(getattr(self, f.name), float) and getattr(self, f.name) < 0]
        if bad:
            raise ConfigError([f"{b} must be >= 0" for b in bad])
        if self.area_per_mt_mac < self.area_per_sa_mac:
            raise ConfigError("area_per_mt_mac must be >= area_per_sa_mac")

    @classmethod
    def load(cls, path) -> "AreaCostParams":
        return cls(**json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")


def default_area_params() -> AreaCostParams:
    """7 nm parameters calibrated once so the reference design lands on 516 mm^2."""
    return AreaCostParams.load(DATA_DIR / "area_7nm.json")


def die_area(cfg: HardwareConfig, params: AreaCostParams | None = None) -> float:
    params = params or default_area_params()
    per_core = (cfg.sa_macs_per_core * params.area_per_sa_mac
                + cfg.mt_macs_per_core * params.area_per_mt_mac
                + cfg.local_mem_bytes * params.area_per_sram_byte
                + params.area_fixed_per_core)
    return (cfg.core_count * per_core
            + cfg.global_mem_bytes * params.area_per_sram_byte
            + params.area_io_fixed)


def reference_design() -> HardwareConfig:
    """The published heterogeneous design: 64x64 SA, 16x16 MAC tree, 32 cores."""
    return HardwareConfig.load(DATA_DIR / "hw" / "reference_design.json")


def with_fields(cfg: HardwareConfig, **changes) -> HardwareConfig:
    return replace(cfg, **changes)
