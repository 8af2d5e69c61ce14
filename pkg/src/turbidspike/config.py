"""Pipeline configuration: TOML sections, ``--set`` overrides and run manifests."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import toml

from . import __version__
from .dvs import DvsConfig
from .preprocess import ActivityParams, AntiFlickerParams, FilterParams, FILTERS, RoiRect, StcParams
from .scatter import DetectorSpec, PhantomSpec, SceneSpec, SourceSpec
from .snn import LifConfig, SAEConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSection:
    """Scene geometry and flash protocol; target frames are built per sample."""

    geometry: str = "transmission"
    beam_radius: float = 15.0
    profile: str = "disk"
    wavelength_nm: float = 850.0
    fluence: float = 0.021
    detector_shape: tuple[int, int] = (64, 64)
    pitch: float = 0.375
    target_plane: float = 0.0
    flash_us: int = 1000  # "400 ms" style reflection runs set 400_000
    rise_us: int = 100
    lead_us: int = 1000  # dark time before and after the flash
    photons: int = 200_000
    binarize: float = 0.5

    def source(self) -> SourceSpec:
        return SourceSpec(self.beam_radius, self.profile, self.wavelength_nm, self.fluence)

    def detector(self) -> DetectorSpec:
        return DetectorSpec(tuple(self.detector_shape), self.pitch)

    def scene(self, target_frames=()) -> SceneSpec:
        return SceneSpec(self.geometry, self.source(), self.detector(), self.target_plane,
                         tuple(target_frames), self.rise_us)


@dataclass(frozen=True)
class PreprocessSection:
    roi: tuple[int, int, int, int] = ()  # x0, y0, w, h; empty = full sensor
    filters: tuple[str, ...] = ("activity", "stc", "antiflicker")
    activity_dt_us: int = 10_000
    activity_radius: int = 1
    stc_dt_us: int = 10_000
    stc_support: int = 1
    antiflicker_f_min: float = 90.0
    antiflicker_f_max: float = 130.0
    antiflicker_min_cycles: int = 5
    bins: tuple[int, int] = (64, 64)  # H, W
    time_steps: int = 50
    mode: str = "binary"

    def roi_rect(self, sensor_dims) -> RoiRect:
        if not self.roi:
            return RoiRect(0, 0, sensor_dims[0], sensor_dims[1])
        return RoiRect(*self.roi)

    def filter_params(self) -> FilterParams:
        return FilterParams(
            ActivityParams(self.activity_dt_us, self.activity_radius),
            StcParams(self.stc_dt_us, self.stc_support),
            AntiFlickerParams(self.antiflicker_f_min, self.antiflicker_f_max, self.antiflicker_min_cycles),
        )


@dataclass(frozen=True)
class SaeSection:
    channels: tuple[int, ...] = ()  # empty = default ladder for the bin size
    kernel: int = 3
    stride: int = 2
    padding: int = 1
    latent_dim: int = 128
    alpha: float = 0.8
    beta: float = 0.9
    theta: float = 1.0
    reset: str = "subtract"
    theta_out: float = 0.0  # 0 = auto: non-spiking readout for membrane_mse, theta for van_rossum


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    jobs: int = 1
    dataset_images: str = ""
    dataset_labels: str = ""
    limit: int = 0  # 0 = whole dataset
    test_count: int = 0  # trailing samples held out of training and used by evaluate
    val_count: int = 0  # samples before the test block used for validation loss


@dataclass(frozen=True)
class PipelineConfig:
    run: RunSection = field(default_factory=RunSection)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    scene: SceneSection = field(default_factory=SceneSection)
    dvs: DvsConfig = field(default_factory=DvsConfig)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    sae: SaeSection = field(default_factory=SaeSection)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        pre = self.preprocess
        h, w = self.scene.detector_shape
        roi = pre.roi_rect((w, h))
        if not roi.fits((w, h)):
            raise ConfigError(f"ROI {pre.roi} exceeds the {w}x{h} detector")
        if roi.w % pre.bins[1] or roi.h % pre.bins[0]:
            raise ConfigError(f"ROI {roi.w}x{roi.h} not divisible into {pre.bins[1]}x{pre.bins[0]} bins")
        if pre.time_steps != self.train.time_steps:
            raise ConfigError("preprocess.time_steps and train.time_steps differ")
        for name in pre.filters:
            if name not in FILTERS:
                raise ConfigError(f"unknown filter {name!r}")
        if pre.mode not in ("binary", "count"):
            raise ConfigError(f"unknown binning mode {pre.mode!r}")
        if self.scene.flash_us < 2 * pre.time_steps:
            raise ConfigError("flash too short for the requested time steps")
        self.sae_config()

    def sae_config(self) -> SAEConfig:
        s = self.sae
        h, w = self.preprocess.bins
        lif = LifConfig(s.alpha, s.beta, s.theta, s.reset)
        theta_out = s.theta_out
        if theta_out <= 0:
            theta_out = s.theta if self.train.loss == "van_rossum" else 1e6
        kw = dict(kernel=s.kernel, stride=s.stride, padding=s.padding, latent_dim=s.latent_dim,
                  lif=lif, theta_out=theta_out)
        if s.channels:
            return SAEConfig(input_shape=(2, h, w), channels=tuple(s.channels), **kw)
        if h != w:
            raise ConfigError("default channel ladders need square bins; set sae.channels")
        try:
            return SAEConfig.for_input(h, **kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        return config_digest(self.to_dict())

    def data_digest(self) -> str:
        """Digest of everything that shapes the preprocessed tensors."""
        d = self.to_dict()
        keep = {k: d[k] for k in ("phantom", "scene", "dvs", "preprocess")}
        keep["run"] = {k: d["run"][k] for k in ("seed", "limit")}
        return config_digest(keep)

    def dumps(self) -> str:
        return toml.dumps(self.to_dict())


_SECTION_TYPES = {
    "run": RunSection,
    "phantom": PhantomSpec,
    "scene": SceneSection,
    "dvs": DvsConfig,
    "preprocess": PreprocessSection,
    "sae": SaeSection,
    "train": TrainConfig,
}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def config_digest(d: dict) -> str:
    """sha256 of canonical JSON (sorted keys, no whitespace)."""
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode()).hexdigest()


def _coerce(value, default):
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ConfigError(f"not a boolean: {value!r}")
        return bool(value)
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, str):
            return int(value)
        if not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split()]
        return tuple(value)
    return value


def _build_section(name: str, values: dict):
    cls = _SECTION_TYPES[name]
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {sorted(unknown)}")
    kw = {}
    for key, value in values.items():
        default = getattr(defaults, key)
        try:
            kw[key] = _coerce(value, default)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}.{key}: {exc}") from exc
        if isinstance(default, tuple) and default and isinstance(default[0], (int, float)):
            kw[key] = tuple(type(default[0])(v) for v in kw[key])
        elif isinstance(default, tuple) and name == "sae" and key == "channels":
            kw[key] = tuple(int(v) for v in kw[key])
        elif isinstance(default, tuple) and name == "preprocess" and key == "roi":
            kw[key] = tuple(int(v) for v in kw[key])
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def parse_override(text: str) -> tuple[str, str, Any]:
    """``section.key=value`` with the value parsed as a TOML literal when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    path, raw = text.split("=", 1)
    parts = path.strip().split(".")
    if len(parts) != 2 or parts[0] not in _SECTION_TYPES:
        raise ConfigError(f"override key {path!r} must be section.key with section in {sorted(_SECTION_TYPES)}")
    try:
        value = toml.loads(f"v = {raw.strip()}")["v"]
    except toml.TomlDecodeError:
        value = raw.strip()
    return parts[0], parts[1], value


def load_config(path=None, overrides=(), text: str | None = None) -> PipelineConfig:
    """Build a config from an optional TOML file or string plus ``section.key=value`` overrides."""
    raw: dict = {}
    if path is not None:
        try:
            raw = toml.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except toml.TomlDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    elif text is not None:
        try:
            raw = toml.loads(text)
        except toml.TomlDecodeError as exc:
            raise ConfigError(str(exc)) from exc
    raw = copy.deepcopy(raw)
    unknown = set(raw) - set(_SECTION_TYPES)
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    for item in overrides:
        section, key, value = parse_override(item)
        raw.setdefault(section, {})[key] = value
    sections = {name: _build_section(name, raw.get(name, {})) for name in _SECTION_TYPES}
    try:
        return PipelineConfig(**sections)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def with_overrides(cfg: PipelineConfig, *overrides: str) -> PipelineConfig:
    return load_config(text=cfg.dumps(), overrides=overrides)


# ---------------------------------------------------------------- manifest

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_digest: str
    config: dict
    seeds: dict
    inputs: dict = field(default_factory=dict)  # name -> sha256
    outputs: dict = field(default_factory=dict)
    tool_version: str = __version__
    python: str = platform.python_version()
    started: float = 0.0
    finished: float = 0.0

    def deterministic_dict(self) -> dict:
        """Everything except wall-clock and host fields."""
        d = dataclasses.asdict(self)
        for key in ("started", "finished", "python"):
            d.pop(key)
        return d

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        return cls(**json.loads(path.read_text()))


def start_manifest(command: str, cfg: PipelineConfig, seeds: dict, inputs=()) -> RunManifest:
    return RunManifest(
        command=command,
        config_digest=cfg.digest(),
        config=cfg.to_dict(),
        seeds=dict(seeds),
        inputs={str(Path(p).name): file_digest(p) for p in inputs},
        started=time.time(),
    )


def finish_manifest(manifest: RunManifest, out_dir, outputs=()) -> Path:
    manifest.outputs = {str(Path(p).name): file_digest(p) for p in outputs}
    manifest.finished = time.time()
    return manifest.write(out_dir)

