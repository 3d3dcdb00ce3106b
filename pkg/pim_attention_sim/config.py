"""
Configuration handling for the PIM attention simulator.

A configuration file is flat: either a JSON object or ``key=value`` lines.
Hardware keys use the HardwareConfig field names, quantization keys carry a
``quant_`` prefix, workload keys a ``workload_`` prefix, and everything else
belongs to the application section.
"""

import json
import math
import os
from dataclasses import dataclass, field, asdict, fields
from typing import Optional, Dict, Any

import dacite

from .exceptions import ConfigError

QUANT_PREFIX = "quant_"
WORKLOAD_PREFIX = "workload_"

WRITE_ROW_COST_MODES = ("sum", "max")
MASK_KINDS = ("random", "banded", "lower_triangular", "file", "generated")


@dataclass
class HardwareConfig:
    """Crossbar fabric geometry, timing, powers and simulator policy knobs."""
    # Array geometry
    xb_rows: int = 32
    xb_cols: int = 32
    bits_per_cell: int = 1
    number_bits: int = 32
    arrays_per_ag: int = 12
    adc_per_ag: int = 1
    adc_resolution_bits: int = 8
    dac_bits: int = 2
    roa_ags_per_tile: int = 11
    wea_ags_per_tile: int = 56
    tiles: int = 64
    recam_rows: int = 512
    recam_cols: int = 512
    recam_arrays: int = 2
    # Buffers
    ait_kb: int = 64
    ib_kb: int = 32
    cb_kb: int = 128
    ir_bytes: int = 512
    ir_vector_bits: int = 512  # register bits one queued input vector occupies
    or_bytes: int = 128
    # Timing
    cycle_ns: float = 25.0
    set_ns: float = 1.52
    reset_ns: float = 2.11
    transfer_pj_per_bit: float = 7.0
    oci_gbps: float = 1000.0
    ctrl_dispatch_ns: float = 1.0
    # Component powers (mW)
    xb_power_mw: float = 0.581
    adc_power_mw: float = 2.0
    dac_power_mw: float = 1.513
    recam_power_mw: float = 1.398
    ait_power_mw: float = 36.89
    ib_power_mw: float = 18.47
    cb_power_mw: float = 74.21
    ctrl_power_mw: float = 0.382
    su_power_mw: float = 1.134
    qu_dqu_power_mw: float = 0.121
    sh_power_mw: float = 0.074
    ir_power_mw: float = 0.294
    or_power_mw: float = 0.108
    sa_power_mw: float = 0.051
    dtc_power_mw: float = 494.07
    # Policy knobs
    write_row_cost_mode: str = "sum"
    bit_serial_factor: int = 1
    include_static_power: bool = False
    roa_spill_to_wea: bool = True

    def validate(self) -> None:
        """
        Check the configuration invariants.

        Raises:
            ConfigError: If any count is non-positive or a mode is unknown
        """
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool) or isinstance(value, str):
                continue
            if f.name == "ctrl_dispatch_ns" or f.name.endswith("_power_mw"):
                if value < 0:
                    raise ConfigError(f"{f.name} must be non-negative, got {value}")
            elif value <= 0:
                raise ConfigError(f"{f.name} must be positive, got {value}")
        if self.write_row_cost_mode not in WRITE_ROW_COST_MODES:
            raise ConfigError(
                f"write_row_cost_mode must be one of {WRITE_ROW_COST_MODES}, got {self.write_row_cost_mode!r}"
            )
        if self.xb_cols < self.number_bits:
            raise ConfigError(f"xb_cols ({self.xb_cols}) must hold one {self.number_bits}-bit number")

    @property
    def per_row_write_ns(self) -> float:
        if self.write_row_cost_mode == "max":
            return max(self.set_ns, self.reset_ns)
        return self.set_ns + self.reset_ns

    @property
    def adc_passes(self) -> int:
        """ADC passes per VMM issue; one pass converts 32 column signals."""
        return math.ceil(self.xb_cols / 32)

    def numbers_per_row(self, bits: Optional[int] = None) -> int:
        """How many numbers of ``bits`` width share one array row."""
        bits = bits or self.number_bits
        return max(1, (self.xb_cols * self.bits_per_cell) // bits)

    @property
    def roa_arrays_per_tile(self) -> int:
        return self.roa_ags_per_tile * self.arrays_per_ag

    @property
    def wea_arrays_per_tile(self) -> int:
        return self.wea_ags_per_tile * self.arrays_per_ag

    @property
    def total_wea_arrays(self) -> int:
        return self.tiles * self.wea_arrays_per_tile

    @property
    def total_roa_arrays(self) -> int:
        return self.tiles * self.roa_arrays_per_tile

    @property
    def oci_bits_per_ns(self) -> float:
        return self.oci_gbps * 8.0


@dataclass
class QuantConfig:
    """Quantization settings of the pruning path."""
    gamma: Optional[float] = None
    bits: int = 4
    theta: Optional[float] = None
    d: int = 64

    def validate(self) -> None:
        if self.bits < 2:
            raise ConfigError(f"quant bits must be >= 2, got {self.bits}")
        if self.gamma is not None and not self.gamma > 0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")
        if self.theta is not None and not 0 < self.theta <= 1:
            raise ConfigError(f"theta must be in (0, 1], got {self.theta}")
        if self.d <= 0:
            raise ConfigError(f"d must be positive, got {self.d}")

    def resolve_theta(self, seq_len: int) -> float:
        """Binarization threshold, defaulting to half the uniform attention weight."""
        if self.theta is not None:
            return self.theta
        return 1.0 / (2 * max(1, seq_len))

    @property
    def qmax(self) -> int:
        return (1 << (self.bits - 1)) - 1

    @property
    def qmin(self) -> int:
        return -(1 << (self.bits - 1))


@dataclass
class WorkloadSpec:
    """Synthetic workload description."""
    seq_len: int = 320
    d_model: int = 512
    d: int = 64
    d_v: int = 64
    fc_dim: int = 512
    density: float = 0.1
    mask_file: Optional[str] = None
    mask_kind: str = "random"
    batch_count: int = 1
    layers: int = 1
    seed: int = 0

    def validate(self) -> None:
        for name in ("seq_len", "d_model", "d", "d_v", "fc_dim", "batch_count", "layers"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"workload {name} must be positive, got {getattr(self, name)}")
        if not 0 < self.density <= 1:
            raise ConfigError(f"workload density must be in (0, 1], got {self.density}")
        if self.mask_kind not in MASK_KINDS:
            raise ConfigError(f"mask_kind must be one of {MASK_KINDS}, got {self.mask_kind!r}")
        if self.mask_kind == "file" and not self.mask_file:
            raise ConfigError("mask_kind 'file' requires workload_mask_file")


@dataclass
class AppConfig:
    """Main application configuration."""
    hardware: HardwareConfig = field(default_factory=HardwareConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    log_level: str = "INFO"
    log_file: Optional[str] = None
    debug_mode: bool = False
    batch_size: int = 320
    max_workers: int = 1
    use_checkpoint: bool = False
    checkpoint_file: Optional[str] = None
    checkpoint_interval: int = 1
    memory_limit_mb: int = 2048
    functional: bool = True

    def validate(self) -> None:
        self.hardware.validate()
        self.quant.validate()
        self.workload.validate()
        if self.log_level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ConfigError(f"Unsupported log level: {self.log_level}")
        if self.batch_size <= 0:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.max_workers <= 0:
            raise ConfigError(f"max_workers must be positive, got {self.max_workers}")
        if self.checkpoint_interval <= 0:
            raise ConfigError(f"checkpoint_interval must be positive, got {self.checkpoint_interval}")


_DACITE_CONFIG = dacite.Config(strict=True, type_hooks={float: float})
_HARDWARE_KEYS = frozenset(f.name for f in fields(HardwareConfig))
_QUANT_KEYS = frozenset(f.name for f in fields(QuantConfig))
_WORKLOAD_KEYS = frozenset(f.name for f in fields(WorkloadSpec))
_SECTION_KEYS = ("hardware", "quant", "workload")
_APP_KEYS = frozenset(f.name for f in fields(AppConfig)) - frozenset(_SECTION_KEYS)


def parse_value(text: str) -> Any:
    """
    Coerce a textual config value to bool, None, int, float or str.

    Args:
        text: Raw value text

    Returns:
        The coerced value
    """
    value = text.strip()
    if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
        return value[1:-1]
    lowered = value.lower()
    if lowered == "true":
        return True
    if lowered == "false":
        return False
    if lowered in ("none", "null", ""):
        return None
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        return value


def parse_key_values(text: str, source: str = "<string>") -> Dict[str, Any]:
    """
    Parse ``key=value`` lines into a flat dictionary.

    Args:
        text: File contents
        source: Name used in error messages

    Returns:
        Flat configuration dictionary

    Raises:
        ConfigError: If a line is malformed or a key repeats
    """
    result: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in result:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        result[key] = parse_value(value)
    return result


def from_flat_dict(flat: Dict[str, Any]) -> AppConfig:
    """
    Build and validate an AppConfig from a flat key dictionary.

    Args:
        flat: Flat configuration keys

    Returns:
        AppConfig object

    Raises:
        ConfigError: On unknown keys, wrong value types or violated invariants
    """
    sections: Dict[str, Dict[str, Any]] = {name: {} for name in _SECTION_KEYS}
    app: Dict[str, Any] = {}
    for key, value in flat.items():
        if key in _SECTION_KEYS:
            raise ConfigError(f"Unknown configuration key: {key}")
        if key.startswith(QUANT_PREFIX):
            sections["quant"][key[len(QUANT_PREFIX):]] = value
        elif key.startswith(WORKLOAD_PREFIX):
            sections["workload"][key[len(WORKLOAD_PREFIX):]] = value
        elif key in _HARDWARE_KEYS:
            sections["hardware"][key] = value
        else:
            app[key] = value

    unknown = sorted(
        [QUANT_PREFIX + k for k in sections["quant"] if k not in _QUANT_KEYS]
        + [WORKLOAD_PREFIX + k for k in sections["workload"] if k not in _WORKLOAD_KEYS]
        + [k for k in app if k not in _APP_KEYS]
    )
    if unknown:
        raise ConfigError(f"Unknown configuration key(s): {', '.join(unknown)}")

    try:
        config = dacite.from_dict(data_class=AppConfig, data={**app, **sections}, config=_DACITE_CONFIG)
    except (dacite.DaciteError, ValueError, TypeError) as e:
        raise ConfigError(f"Invalid configuration value: {str(e)}") from e

    config.validate()
    return config


def to_flat_dict(config: AppConfig) -> Dict[str, Any]:
    """
    Flatten an AppConfig to the on-disk key layout.

    Args:
        config: AppConfig object

    Returns:
        Flat dictionary with every resolved key
    """
    nested = asdict(config)
    flat: Dict[str, Any] = {}
    for key, value in nested.pop("hardware").items():
        flat[key] = value
    for key, value in nested.pop("quant").items():
        flat[QUANT_PREFIX + key] = value
    for key, value in nested.pop("workload").items():
        flat[WORKLOAD_PREFIX + key] = value
    flat.update(nested)
    return flat


def apply_overrides(config: AppConfig, overrides: Dict[str, Any]) -> AppConfig:
    """
    Return a new configuration with flat-key overrides applied.

    Args:
        config: Base configuration
        overrides: Flat keys to replace

    Returns:
        Validated AppConfig
    """
    flat = to_flat_dict(config)
    flat.update(overrides)
    return from_flat_dict(flat)


def load_config(config_path: Optional[str] = None) -> AppConfig:
    """
    Load and validate configuration from a JSON or key=value file.

    Args:
        config_path: Path to the configuration file, or None for defaults

    Returns:
        AppConfig object

    Raises:
        ConfigError: If the file cannot be read or the configuration is invalid
    """
    if config_path is None:
        config = AppConfig()
        config.validate()
        return config

    config_path = os.path.abspath(os.path.expanduser(config_path))
    try:
        with open(config_path, 'r') as cfg:
            text = cfg.read()
        if config_path.endswith(".json") or text.lstrip().startswith("{"):
            flat = json.loads(text)
            if not isinstance(flat, dict):
                raise ConfigError(f"Configuration in {config_path} must be a JSON object")
        else:
            flat = parse_key_values(text, source=config_path)
    except (json.JSONDecodeError, IOError) as e:
        raise ConfigError(f"Failed to load configuration from {config_path}: {str(e)}") from e

    return from_flat_dict(flat)


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def dump_config(config: AppConfig) -> str:
    """
    Render the fully-resolved configuration as ``key=value`` text.

    Args:
        config: AppConfig object

    Returns:
        Text loadable by load_config
    """
    flat = to_flat_dict(config)
    hardware = sorted(k for k in flat if k in _HARDWARE_KEYS)
    quant = sorted(k for k in flat if k.startswith(QUANT_PREFIX))
    workload = sorted(k for k in flat if k.startswith(WORKLOAD_PREFIX))
    app = sorted(k for k in flat if k not in _HARDWARE_KEYS and k not in quant and k not in workload)

    lines = []
    for title, keys in (("hardware", hardware), ("quantization", quant), ("workload", workload), ("application", app)):
        lines.append(f"# {title}")
        lines.extend(f"{key}={_format_value(flat[key])}" for key in keys)
        lines.append("")
    return "\n".join(lines)


def save_config(config: AppConfig, config_path: str) -> None:
    """
    Save configuration to a flat JSON file.

    Args:
        config: AppConfig object
        config_path: Path to save the configuration

    Raises:
        ConfigError: If the configuration cannot be saved
    """
    try:
        with open(config_path, 'w') as f:
            json.dump(to_flat_dict(config), f, indent=2)
    except IOError as e:
        raise ConfigError(f"Failed to save configuration to {config_path}: {str(e)}") from e
