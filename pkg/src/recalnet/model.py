"""VGG16-style encoder, U-Net-style decoder, and calibration placements."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from recalnet import ops
from recalnet.blocks import CALIBRATORS
from recalnet.nn import BIAS, NORM, WEIGHT, ConvBNReLU, Module, ParamStore, conv1x1, conv_census
from recalnet.tensor import ConfigError, Tensor

VARIANTS = ("recal", "baseline", "scse", "se")
ENCODER_WIDTHS = (64, 128, 256, 512, 512)
ENCODER_DEPTHS = (2, 2, 3, 3, 3)
DECODER_WIDTHS = (256, 128, 64, 32)
ENCODER_STAGES = ("E1", "E2", "E3", "E4", "E5")
DECODER_STAGES = ("D4", "D3", "D2", "D1")
STAGES = ENCODER_STAGES + DECODER_STAGES
# calibration slots in network order: after E5, then after each decoder stage
PLACEMENTS = ("E5", "D4", "D3", "D2", "D1")


class InputError(ConfigError):
    """Input tensor incompatible with the network (channels, spatial size)."""


@dataclass
class ModelConfig:
    variant: str = "recal"
    width_scale: int = 1
    input_size: tuple[int, int] = (512, 512)
    in_channels: int = 3
    out_channels: int = 1
    recal_placements: tuple[bool, ...] = (True, True, True, True, True)
    reduction: int = 2
    seed: int = 0

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.recal_placements = tuple(bool(v) for v in self.recal_placements)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.width_scale < 1:
            raise ConfigError(f"width_scale must be >= 1, got {self.width_scale}")
        bad = [w for w in ENCODER_WIDTHS + DECODER_WIDTHS if w % self.width_scale]
        if bad:
            raise ConfigError(f"width_scale={self.width_scale} does not divide widths {bad}")
        h, w = self.input_size
        if h % 16 or w % 16 or h < 16 or w < 16:
            raise ConfigError(f"input_size {self.input_size} must be positive multiples of 16")
        if len(self.recal_placements) != len(PLACEMENTS):
            raise ConfigError(f"recal_placements needs {len(PLACEMENTS)} flags")

    @property
    def encoder_widths(self) -> tuple[int, ...]:
        return tuple(w // self.width_scale for w in ENCODER_WIDTHS)

    @property
    def decoder_widths(self) -> tuple[int, ...]:
        return tuple(w // self.width_scale for w in DECODER_WIDTHS)

    @property
    def placement_widths(self) -> tuple[int, ...]:
        return (self.encoder_widths[-1],) + self.decoder_widths

    def active_placements(self) -> tuple[bool, ...]:
        if self.variant == "baseline":
            return (False,) * len(PLACEMENTS)
        return self.recal_placements

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["recal_placements"] = list(self.recal_placements)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


class EncoderStage(Module):
    def __init__(self, cin: int, cout: int, depth: int, rng):
        self.layers = [ConvBNReLU(cin if i == 0 else cout, cout, rng) for i in range(depth)]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class DecoderStage(Module):
    """Upsample, concatenate the encoder skip, two conv3x3+BN+ReLU."""

    def __init__(self, cin: int, cskip: int, cout: int, rng):
        self.conv1 = ConvBNReLU(cin + cskip, cout, rng)
        self.conv2 = ConvBNReLU(cout, cout, rng)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        up = ops.bilinear_upsample2(x)
        if up.shape[2:] != skip.shape[2:]:
            raise AssertionError(f"skip shape {skip.shape} does not match upsampled {up.shape}")
        return self.conv2(self.conv1(ops.channel_concat([up, skip])))


def build_encoder(config: ModelConfig, rng) -> list[EncoderStage]:
    stages, cin = [], config.in_channels
    for width, depth in zip(config.encoder_widths, ENCODER_DEPTHS):
        stages.append(EncoderStage(cin, width, depth, rng))
        cin = width
    return stages


def build_decoder(config: ModelConfig, rng) -> list[DecoderStage]:
    enc = config.encoder_widths
    skips = enc[3::-1]  # E4, E3, E2, E1
    stages, cin = [], enc[-1]
    for cskip, width in zip(skips, config.decoder_widths):
        stages.append(DecoderStage(cin, cskip, width, rng))
        cin = width
    return stages


class SegNet(Module):
    def __init__(self, config: ModelConfig, init: bool = True):
        rng = np.random.default_rng(config.seed) if init else None
        self.config = config
        self.encoder = build_encoder(config, rng)
        self.decoder = build_decoder(config, rng)
        self.calibrators = []
        if config.variant != "baseline":
            block = CALIBRATORS[config.variant]
            for on, width in zip(config.active_placements(), config.placement_widths):
                self.calibrators.append(block(width, rng, r=config.reduction) if on else None)
        else:
            self.calibrators = [None] * len(PLACEMENTS)
        self.head = conv1x1(config.decoder_widths[-1], config.out_channels, rng)

    def _calibrate(self, slot: int, x: Tensor) -> Tensor:
        block = self.calibrators[slot]
        return x if block is None else block(x)

    def forward(self, images: Tensor, capture: dict | None = None) -> Tensor:
        """Mask probabilities, same spatial size as ``images``.

        If ``capture`` is a dict it receives each stage's output (after its
        calibration block, if any) keyed by stage name.
        """
        check_input(images, self.config)
        skips = []
        x = images
        for i, (name, stage) in enumerate(zip(ENCODER_STAGES, self.encoder)):
            if i > 0:
                x = ops.max_pool2(x)
            x = stage(x)
            if name == "E5":
                x = self._calibrate(0, x)
            else:
                skips.append(x)
            if capture is not None:
                capture[name] = x
        for slot, (name, stage, skip) in enumerate(zip(DECODER_STAGES, self.decoder, reversed(skips)), 1):
            x = self._calibrate(slot, stage(x, skip))
            if capture is not None:
                capture[name] = x
        return ops.sigmoid(self.head(x))

    def params(self) -> ParamStore:
        return ParamStore(self)


def check_input(images: Tensor, config: ModelConfig) -> None:
    if images.data.ndim != 4:
        raise InputError(f"images must be (N, C, H, W), got {images.shape}")
    n, c, h, w = images.shape
    if c != config.in_channels:
        raise InputError(f"expected {config.in_channels} input channels, got {c}")
    if h % 16 or w % 16 or h == 0 or w == 0:
        raise InputError(f"spatial size ({h}x{w}) must be a positive multiple of 16")


def build_model(config: ModelConfig, init: bool = True) -> SegNet:
    """Instantiate a network; ``init=False`` skips random init (census-only)."""
    config.validate()
    return SegNet(config, init=init)


def forward(model: SegNet, images: Tensor) -> Tensor:
    return model(images)


# ---------------------------------------------------------------------------
# census


@dataclass
class Census:
    variant: str
    per_placement: dict[str, int] = field(default_factory=dict)
    calibration_total: int = 0
    total_weights: int = 0
    total_with_bias: int = 0
    total_all: int = 0


def census(model: SegNet) -> Census:
    """Weight counts from the parameter arrays; biases and norm params reported separately."""
    store = model.params()
    out = Census(model.config.variant)
    for slot, name in enumerate(PLACEMENTS):
        if model.calibrators[slot] is not None:
            out.per_placement[name] = store.census(f"calibrators.{slot}.")
    out.calibration_total = store.census("calibrators.")
    out.total_weights = store.census()
    out.total_with_bias = store.census(kinds=(WEIGHT, BIAS))
    out.total_all = store.census(kinds=(WEIGHT, BIAS, NORM))
    return out


def recount_calibration(model: SegNet) -> dict[str, int]:
    """Independent recount of calibration weights from ConvSpec formulas."""
    return {name: conv_census(block) for name, block in zip(PLACEMENTS, model.calibrators)
            if block is not None}


# ---------------------------------------------------------------------------
# activation dumps


def dump_activations(model: SegNet, images: Tensor, stages, out_dir=None) -> dict[str, np.ndarray]:
    """Channel-mean grayscale maps per requested stage (first sample of the batch).

    Maps are min-max scaled to 0..255 uint8.  When ``out_dir`` is given each
    map is written as ``<stage>.png``.
    """
    stages = list(stages)
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ValueError(f"unknown stage(s) {unknown}; choose from {STAGES}")
    captured: dict[str, Tensor] = {}
    model.eval()
    model(images, capture=captured)
    maps = {}
    for s in stages:
        m = captured[s].data[0].mean(axis=0)
        lo, hi = m.min(), m.max()
        scaled = np.zeros_like(m) if hi - lo <= 0 else (m - lo) / (hi - lo)
        maps[s] = np.round(scaled * 255.0).astype(np.uint8)
    if out_dir is not None:
        from recalnet.imageio import write_gray

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for s, m in maps.items():
            write_gray(out_dir / f"{s}.png", m)
    return maps
