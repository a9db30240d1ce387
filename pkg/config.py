from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import yaml

DATA_DIR = Path("data")
MODELS_DIR = Path("models")
REPORTS_DIR = Path("reports")

SAMPLE_RATE_HZ = 100.0
GRAVITY = 9.80665          # m/s², no local calibration

MODEL_MAGIC = b"GAITTCN\0"
MODEL_FORMAT_VERSION = 1
REPORT_FORMAT_VERSION = 1

THREADS_ENV = "GAITCTL_THREADS"
DEFAULT_ADDR = "127.0.0.1:5024"

GAIT_STRATEGIES = ("TwoPoint", "SwingTo", "SwingThrough")


class ConfigError(ValueError):
    pass


def _require(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


# ---------------------------------------------------------------------------
# Module configurations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowConfig:
    h: int = 8
    stride: int = 2
    sample_rate_hz: float = SAMPLE_RATE_HZ

    def __post_init__(self):
        _require(self.h >= 1, f"window.h must be >= 1, got {self.h}")
        _require(self.stride >= 1, f"window.stride must be >= 1, got {self.stride}")
        _require(self.sample_rate_hz > 0, "window.sample_rate_hz must be > 0")

    @property
    def period_us(self) -> int:
        return int(round(1e6 / self.sample_rate_hz))


@dataclass(frozen=True)
class PreprocessConfig:
    cutoff_hz: float = 5.0
    filter_order: int = 2
    gravity: float = GRAVITY

    def __post_init__(self):
        _require(self.cutoff_hz > 0, "preprocess.cutoff_hz must be > 0")
        _require(self.filter_order >= 1, "preprocess.filter_order must be >= 1")


@dataclass(frozen=True)
class TcnConfig:
    input_channels: int = 9
    num_blocks: int = 2
    channels_per_block: int = 96
    kernel_size: int = 2
    dilations: tuple = (1, 2)
    spatial_dropout: float = 0.255
    dense_units: int = 96
    num_classes: int = 5

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        for name in ("input_channels", "num_blocks", "channels_per_block",
                     "kernel_size", "dense_units", "num_classes"):
            _require(getattr(self, name) >= 1, f"tcn.{name} must be >= 1")
        _require(len(self.dilations) == self.num_blocks,
                 f"tcn.dilations needs one entry per block ({self.num_blocks})")
        _require(all(d >= 1 for d in self.dilations), "tcn.dilations must be >= 1")
        _require(0.0 <= self.spatial_dropout < 1.0, "tcn.spatial_dropout must be in [0, 1)")

    @property
    def receptive_field(self) -> int:
        # two convolutions per block share the block's dilation
        return 1 + sum(2 * (self.kernel_size - 1) * d for d in self.dilations)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 8.9e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    validation_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        _require(self.learning_rate > 0, "train.learning_rate must be > 0")
        _require(0.0 < self.validation_fraction < 1.0,
                 "train.validation_fraction must be in (0, 1)")
        _require(self.batch_size >= 1, "train.batch_size must be >= 1")
        _require(self.max_epochs >= 0, "train.max_epochs must be >= 0")
        _require(self.patience >= 1, "train.patience must be >= 1")


@dataclass(frozen=True)
class FsmConfig:
    alpha: float = 0.6
    debounce_k: int = 3
    aux_reset_frames: int = 100
    attempt_timeout_frames: int = 500

    def __post_init__(self):
        _require(0.0 < self.alpha <= 1.0, f"fsm.alpha must be in (0, 1], got {self.alpha}")
        _require(self.debounce_k >= 1, "fsm.debounce_k must be >= 1")
        _require(self.aux_reset_frames >= self.debounce_k,
                 "fsm.aux_reset_frames must be >= fsm.debounce_k")
        _require(self.attempt_timeout_frames >= self.debounce_k,
                 "fsm.attempt_timeout_frames must be >= fsm.debounce_k")


@dataclass(frozen=True)
class SynthConfig:
    n_steps: int = 12
    laps: int = 2
    sessions_per_subject: int = 2
    aux_insert_probability: float = 0.3
    aux_duration_s: tuple = (1.0, 3.0)
    turn_steps: int = 2
    class_balance: bool = True
    swing_axis: str = "y"
    noise: bool = True

    def __post_init__(self):
        object.__setattr__(self, "aux_duration_s", tuple(float(v) for v in self.aux_duration_s))
        _require(self.n_steps >= 1 and self.laps >= 1, "synth.n_steps and synth.laps must be >= 1")
        _require(self.sessions_per_subject >= 1, "synth.sessions_per_subject must be >= 1")
        _require(0.0 <= self.aux_insert_probability <= 1.0,
                 "synth.aux_insert_probability must be in [0, 1]")
        lo, hi = self.aux_duration_s
        _require(0 < lo <= hi, "synth.aux_duration_s must be (min, max) with 0 < min <= max")
        _require(0 <= self.turn_steps <= self.n_steps, "synth.turn_steps must be in [0, n_steps]")
        _require(self.swing_axis in ("x", "y"), "synth.swing_axis must be 'x' or 'y'")


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    bench_iters: int = 1000
    bench_warmup: int = 50

    def __post_init__(self):
        _require(0.0 < self.iou_threshold <= 1.0, "eval.iou_threshold must be in (0, 1]")
        _require(self.bench_iters >= 100, "eval.bench_iters must be >= 100")
        _require(self.bench_warmup >= 50, "eval.bench_warmup must be >= 50")


# ---------------------------------------------------------------------------
# RunConfig – YAML file + dotted overrides
# ---------------------------------------------------------------------------

SECTIONS = {
    "window": WindowConfig,
    "preprocess": PreprocessConfig,
    "tcn": TcnConfig,
    "train": TrainConfig,
    "fsm": FsmConfig,
    "synth": SynthConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class RunConfig:
    window: WindowConfig = WindowConfig()
    preprocess: PreprocessConfig = PreprocessConfig()
    tcn: TcnConfig = TcnConfig()
    train: TrainConfig = TrainConfig()
    fsm: FsmConfig = FsmConfig()
    synth: SynthConfig = SynthConfig()
    eval: EvalConfig = EvalConfig()

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping of sections")
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")

        sections = {}
        for name, section_cls in SECTIONS.items():
            values = data.get(name) or {}
            if not isinstance(values, dict):
                raise ConfigError(f"config section '{name}' must be a mapping")
            known = {f.name for f in fields(section_cls)}
            bad = sorted(set(values) - known)
            if bad:
                raise ConfigError(f"unknown key(s) in '{name}': {', '.join(bad)}")
            try:
                sections[name] = section_cls(**values)
            except TypeError as e:
                raise ConfigError(f"invalid values in '{name}': {e}") from e
        return cls(**sections)

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            section = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v
                         for k, v in section.items()}
        return out

    def with_override(self, dotted: str, value) -> "RunConfig":
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(f"unknown config key '{dotted}'")
        current = getattr(self, section)
        if key not in {f.name for f in fields(current)}:
            raise ConfigError(f"unknown config key '{dotted}'")
        try:
            updated = replace(current, **{key: value})
        except TypeError as e:
            raise ConfigError(f"invalid value for '{dotted}': {value!r}") from e
        return replace(self, **{section: updated})


def parse_override(text: str) -> tuple[str, object]:
    """Parse 'section.key=value'; the value is read as a YAML scalar or list."""
    if "=" not in text:
        raise ConfigError(f"override must look like section.key=value, got '{text}'")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse value for '{key}': {e}") from e
    return key.strip(), value


def load_run_config(path: Path | None = None,
                    overrides: list[str] | None = None) -> RunConfig:
    data = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            try:
                data = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"cannot parse {path}: {e}") from e

    cfg = RunConfig.from_dict(data)
    for item in overrides or []:
        key, value = parse_override(item)
        cfg = cfg.with_override(key, value)
    return cfg


def dump_run_config(cfg: RunConfig, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True, allow_unicode=True)
