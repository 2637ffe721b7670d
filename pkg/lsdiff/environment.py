import os
import json
import time
import hashlib
import logging
from dataclasses import dataclass, field, fields, is_dataclass, asdict
from typing import Any, Dict, Optional

import yaml
import torch

from lsdiff import __version__
from lsdiff.errors import SchemaError, ConfigMismatch
from lsdiff.unet import UNetConfig

logger = logging.getLogger(__name__)

OUTPUT_ROOT_VAR = "LSDIFF_OUTPUT_ROOT"


@dataclass
class Env:

    # general
    device = torch.device("cuda" if torch.cuda.is_available() else "cpu")
    output_dir = "runs/"
    exp_name = None
    seed = 0
    log_level = "INFO"

    def set_env(**kwargs):
        non_attr = [k for k in kwargs if not hasattr(Env, k) or k.startswith("_")]
        if len(non_attr) > 0:
            raise SchemaError(f"not attributes of Env: {non_attr}", field=non_attr[0])
        for k, v in kwargs.items():
            if k == "device":
                v = torch.device(v)
            setattr(Env, k, v)
        if os.environ.get(OUTPUT_ROOT_VAR):
            Env.output_dir = os.environ[OUTPUT_ROOT_VAR]

    def info():
        string = "Env:\n"
        for attr in vars(Env):
            string += "\t" + attr + f": {getattr(Env, attr)}\n" if (
                not attr.startswith("_") and not callable(getattr(Env, attr))
            ) else ""
        logger.info(string)
        return string

    def run_dir():
        return os.path.join(Env.output_dir, Env.exp_name)


############## Run configuration ##############

@dataclass
class TrainConfig:
    frames_per_clip: int = 16
    fps: float = 25.0
    resolution: int = 64
    lr: float = 6e-5
    batch_size: int = 2
    steps: int = 200
    p_audio: float = 0.05
    p_ref: float = 0.15
    cfg_dropout: bool = True
    optim: str = "adamw"
    use_fp16: bool = False
    grad_clip: float = 1.0
    val_interval: int = 50
    log_interval: int = 10
    checkpoint_interval: int = 100

    # data
    manifest: Optional[str] = None          # JSON lines; None = synthetic corpus
    num_synthetic_clips: int = 4
    synthetic_frames: int = 24
    val_clips: int = 0
    num_workers: int = 0
    image_channels: int = 3
    sample_rate: int = 16000

    # codec / conditions
    codec: str = "identity"
    codec_scale: int = 8
    codec_fit_steps: int = 200              # reconstruction pre-fit, trainable codecs only
    codec_lr: float = 1e-3
    mask_mode: str = "adaptive"             # "adaptive" or "fixed"
    pad_ratio: float = 0.25
    smooth_alpha: float = 0.75
    max_gap: int = 8
    audio_k: int = 2
    guider_input: str = "pixel"

    # diffusion
    sigma_data: float = 0.5
    p_mean: float = -1.2
    p_std: float = 1.2
    loss_weighting: str = "edm"

    def validate(self, prefix="train"):
        for name in ("frames_per_clip", "fps", "resolution", "lr", "batch_size", "steps",
                     "val_interval", "log_interval", "checkpoint_interval", "sample_rate", "codec_scale",
                     "codec_lr"):
            if not getattr(self, name) > 0:
                raise SchemaError(f"must be positive, got {getattr(self, name)}", field=f"{prefix}.{name}")
        for name in ("p_audio", "p_ref", "smooth_alpha"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise SchemaError(f"must lie in [0, 1], got {getattr(self, name)}", field=f"{prefix}.{name}")
        _choice(self.optim, ("adamw", "adam", "sgd"), f"{prefix}.optim")
        _choice(self.codec, ("identity", "unshuffle", "toy", "diffusers"), f"{prefix}.codec")
        _choice(self.mask_mode, ("adaptive", "fixed"), f"{prefix}.mask_mode")
        _choice(self.guider_input, ("pixel", "latent"), f"{prefix}.guider_input")
        _choice(self.loss_weighting, ("edm", "uniform"), f"{prefix}.loss_weighting")
        _choice(self.image_channels, (1, 3), f"{prefix}.image_channels")
        if min(self.pad_ratio, self.max_gap, self.audio_k, self.val_clips, self.codec_fit_steps) < 0:
            raise SchemaError("pad_ratio, max_gap, audio_k, val_clips and codec_fit_steps must be nonnegative",
                              field=prefix)


@dataclass
class InferenceConfig:
    segment_len: int = 16
    overlap: int = 4
    guidance_scale: float = 3.0
    steps: int = 15
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    bbox_expand_ratio: float = 0.4
    bbox_smooth_alpha: float = 0.75
    dilation_px: int = 4
    junction_smooth_frames: int = 3
    reference: str = "random"               # "random" or "first"
    detector: str = "stub"

    def validate(self, prefix="infer"):
        if not 0 < self.overlap < self.segment_len:
            raise SchemaError(f"need 0 < overlap < segment_len, got overlap={self.overlap}, "
                              f"segment_len={self.segment_len}", field=f"{prefix}.overlap")
        if self.steps < 1:
            raise SchemaError(f"must be >= 1, got {self.steps}", field=f"{prefix}.steps")
        if self.guidance_scale < 0:
            raise SchemaError(f"must be >= 0, got {self.guidance_scale}", field=f"{prefix}.guidance_scale")
        if not 0 < self.sigma_min < self.sigma_max:
            raise SchemaError("need 0 < sigma_min < sigma_max", field=f"{prefix}.sigma_min")
        if not 0.0 <= self.bbox_smooth_alpha <= 1.0:
            raise SchemaError("must lie in [0, 1]", field=f"{prefix}.bbox_smooth_alpha")
        if self.bbox_expand_ratio < 0 or self.dilation_px < 0 or self.junction_smooth_frames < 0:
            raise SchemaError("bbox_expand_ratio, dilation_px and junction_smooth_frames must be nonnegative",
                              field=prefix)
        _choice(self.reference, ("random", "first"), f"{prefix}.reference")
        _choice(self.detector, ("stub",), f"{prefix}.detector")


@dataclass
class CurateConfig:
    min_face_side: int = 228
    jitter_ratio: float = 0.1               # fraction of the frame diagonal
    displacement_threshold: Optional[float] = None   # pixels; overrides jitter_ratio
    min_seconds: float = 2.0
    max_gap: int = 8
    quality_threshold: float = 1e-3
    alignment_threshold: float = 0.3
    detector: str = "stub"
    quality: str = "sharpness"
    alignment: str = "energy"

    def validate(self, prefix="curate"):
        for name in ("min_face_side", "jitter_ratio", "min_seconds"):
            if not getattr(self, name) > 0:
                raise SchemaError(f"must be positive, got {getattr(self, name)}", field=f"{prefix}.{name}")
        if self.displacement_threshold is not None and self.displacement_threshold <= 0:
            raise SchemaError("must be positive", field=f"{prefix}.displacement_threshold")
        if self.max_gap < 0:
            raise SchemaError("must be nonnegative", field=f"{prefix}.max_gap")
        _choice(self.detector, ("stub",), f"{prefix}.detector")
        _choice(self.quality, ("sharpness",), f"{prefix}.quality")
        _choice(self.alignment, ("energy", "none"), f"{prefix}.alignment")


@dataclass
class EvaluateConfig:
    peak: float = 1.0
    ssim_window: int = 7
    k1: float = 0.01
    k2: float = 0.03
    embedder: str = "mean_pixel"
    lpips_command: Optional[str] = None
    sync_command: Optional[str] = None

    def validate(self, prefix="evaluate"):
        if self.peak <= 0:
            raise SchemaError("must be positive", field=f"{prefix}.peak")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise SchemaError("must be a positive odd integer", field=f"{prefix}.ssim_window")
        _choice(self.embedder, ("mean_pixel",), f"{prefix}.embedder")


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/"
    exp_name: Optional[str] = None
    device: str = "cpu"
    log_level: str = "INFO"
    version: str = __version__
    unet: UNetConfig = field(default_factory=UNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferenceConfig = field(default_factory=InferenceConfig)
    curate: CurateConfig = field(default_factory=CurateConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)

    def validate(self) -> "RunConfig":
        try:
            self.unet.validate()
        except ConfigMismatch as e:
            raise SchemaError(str(e.message), field="unet") from e
        self.train.validate()
        self.infer.validate()
        self.curate.validate()
        self.evaluate.validate()
        _choice(self.log_level, ("DEBUG", "INFO", "WARNING", "ERROR"), "log_level")
        return self

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["unet"] = self.unet.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        return _build(cls, data or {}, "").validate()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


############## FUNCTIONS ##############

def _choice(value, options, fieldpath):
    if value not in options:
        raise SchemaError(f"must be one of {list(options)}, got {value!r}", field=fieldpath)


def _coerce(value, default, fieldpath):
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise SchemaError(f"expected a boolean, got {value!r}", field=fieldpath)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not float(value).is_integer():
            raise SchemaError(f"expected an integer, got {value!r}", field=fieldpath)
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError(f"expected a number, got {value!r}", field=fieldpath)
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise SchemaError(f"expected a list, got {value!r}", field=fieldpath)
        return tuple(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise SchemaError(f"expected a string, got {value!r}", field=fieldpath)
    return value


def _build(cls, data: Dict[str, Any], prefix: str):
    if not isinstance(data, dict):
        raise SchemaError(f"expected a mapping, got {type(data).__name__}", field=prefix or "<root>")
    known = {f.name: f for f in fields(cls)}
    for k in data:
        if k not in known:
            raise SchemaError("unknown key", field=f"{prefix}{k}")
    defaults = cls()
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        default = getattr(defaults, name)
        if is_dataclass(default):
            kwargs[name] = _build(type(default), data[name], f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(data[name], default, f"{prefix}{name}")
    return cls(**kwargs)


def _merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Overrides are nested dicts or dotted keys (``"train.lr": 1e-4``); overrides win."""
    out = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        head, _, rest = key.partition(".")
        if rest:
            out[head] = _merge(out.get(head) or {}, {rest: value})
        elif isinstance(value, dict):
            out[head] = _merge(out.get(head) or {}, value)
        else:
            out[head] = value
    return out


def parse_config(fpath: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Load a YAML (or JSON) run configuration, apply flag overrides, fill defaults
    and validate. Raises SchemaError naming the offending field.
    """
    data = {}
    if fpath is not None:
        try:
            with open(fpath, "r") as f:
                data = yaml.safe_load(f) or {}
        except OSError as e:
            raise SchemaError(f"cannot read config {fpath}: {e}", field="<file>") from e
        except yaml.YAMLError as e:
            raise SchemaError(f"cannot parse config {fpath}: {e}", field="<file>") from e
    data = _merge(data, overrides or {})
    if os.environ.get(OUTPUT_ROOT_VAR):
        data["output_dir"] = os.environ[OUTPUT_ROOT_VAR]
    config = RunConfig.from_dict(data)
    logger.debug("parsed config %s", config.config_hash())
    return config


def apply_env(config: RunConfig):
    """Publish the run-level fields to ``Env``; an unnamed run gets a timestamp name."""
    exp_name = config.exp_name if config.exp_name is not None else time.strftime("%Y%m%d-%H%M%S")
    Env.set_env(device=config.device, output_dir=config.output_dir, exp_name=exp_name, seed=config.seed,
                log_level=config.log_level)
