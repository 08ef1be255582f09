"""Audio, image and cross-modal encoders producing coarse and fine similarity scores.

The audio path is Conv1 -> Trm1 -> Conv2 -> Trm2. A learned CLS_A token is
prepended before Trm1; its Trm1 output skips Conv2 and is re-attached in front
of the downsampled frames before Trm2. The image path projects RoI features
and box geometry to tokens and runs a transformer behind a learned CLS_I.
The coarse score is the dot product of the two CLS outputs; the fine score
runs both token sets through cross-modal blocks and an MLP head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, InvalidInputError, ShapeError
from .io import read_records, write_records
from .layers import (
    AttentionSpec,
    Conv1dStack,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    TransformerBlock,
    param,
    receptive_field,
)
from .tensor import Tensor

POSITION_DIM = 5


@dataclass(frozen=True)
class ModelConfig:
    model_dim: int = 48
    num_heads: int = 4
    trm1_layers: int = 2
    trm2_layers: int = 1
    img_trm_layers: int = 2
    xtrm_blocks: int = 2
    conv1_layers: tuple[tuple[int, int], ...] = ((4, 2), (4, 2))  # (kernel, stride)
    conv2_layers: tuple[tuple[int, int], ...] = ((2, 2), (2, 2))
    roi_feature_dim: int = 16
    mlp_hidden: tuple[int, ...] = (96, 48, 1)
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "conv1_layers", tuple(tuple(x) for x in self.conv1_layers))
        object.__setattr__(self, "conv2_layers", tuple(tuple(x) for x in self.conv2_layers))
        object.__setattr__(self, "mlp_hidden", tuple(self.mlp_hidden))
        counts = (self.trm1_layers, self.trm2_layers, self.img_trm_layers, self.xtrm_blocks)
        if min(counts) < 1:
            raise ConfigError("all transformer layer counts and xtrm_blocks must be >= 1")
        if not self.conv1_layers or not self.conv2_layers:
            raise ConfigError("conv stacks need at least one layer")
        if not self.mlp_hidden or self.mlp_hidden[-1] != 1:
            raise ConfigError("mlp_hidden must end in 1")
        try:
            AttentionSpec(self.model_dim, self.num_heads)
        except ShapeError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def attention(self) -> AttentionSpec:
        return AttentionSpec(self.model_dim, self.num_heads)

    def conv1_spec(self) -> list[tuple[int, int, int]]:
        return [(self.model_dim, k, s) for k, s in self.conv1_layers]

    def conv2_spec(self) -> list[tuple[int, int, int]]:
        return [(self.model_dim, k, s) for k, s in self.conv2_layers]

    def min_signal_length(self) -> int:
        """Receptive field of Conv1 followed by Conv2."""
        return receptive_field(self.conv1_spec() + self.conv2_spec())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv1_layers"] = [list(x) for x in self.conv1_layers]
        d["conv2_layers"] = [list(x) for x in self.conv2_layers]
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AudioInput:
    signal: np.ndarray
    caption_id: str = ""
    image_id: str = ""


@dataclass
class ImageInput:
    roi_features: np.ndarray
    boxes: np.ndarray
    image_id: str = ""


@dataclass
class AudioEncoding:
    """Audio encoder outputs; tensors may carry a leading batch axis."""

    hi_res: Tensor          # [..., T1, d] Trm1 outputs without CLS
    cls_and_lo_res: Tensor  # [..., T2 + 1, d] Trm2 outputs, row 0 is CLS_A
    cls_a: Tensor           # [..., d]


@dataclass
class ImageEncoding:
    tokens: Tensor  # [..., R + 1, d], row 0 is CLS_I
    cls_i: Tensor   # [..., d]


def _prepend(cls_row: Tensor, x: Tensor) -> Tensor:
    lead = x.shape[:-2]
    cls_row = T.broadcast_to(cls_row.reshape(*([1] * len(lead)), 1, cls_row.shape[-1]),
                             (*lead, 1, cls_row.shape[-1]))
    return T.concat([cls_row, x], axis=-2)


class AudioEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        spec, std = cfg.attention, cfg.init_std
        self.conv1 = Conv1dStack(1, cfg.conv1_spec(), rng, std)
        self.cls = param(rng.normal(0.0, std, size=cfg.model_dim))
        self.trm1 = [TransformerBlock(spec, rng, std) for _ in range(cfg.trm1_layers)]
        self.conv2 = Conv1dStack(cfg.model_dim, cfg.conv2_spec(), rng, std)
        self.trm2 = [TransformerBlock(spec, rng, std) for _ in range(cfg.trm2_layers)]

    def __call__(self, signals: Tensor) -> AudioEncoding:
        x = self.conv1(signals.reshape(*signals.shape, 1))
        x = _prepend(self.cls, x)
        for block in self.trm1:
            x = block(x)
        cls_row, hi_res = x[..., :1, :], x[..., 1:, :]
        y = T.concat([cls_row, self.conv2(hi_res)], axis=-2)
        for block in self.trm2:
            y = block(y)
        return AudioEncoding(hi_res=hi_res, cls_and_lo_res=y, cls_a=y[..., 0, :])


def position_features(boxes: np.ndarray) -> np.ndarray:
    """``(x1, y1, x2, y2, area)`` per box."""
    boxes = np.asarray(boxes, dtype=np.float64)
    area = (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])
    return np.concatenate([boxes, area[..., None]], axis=-1)


def validate_boxes(boxes: np.ndarray) -> None:
    boxes = np.asarray(boxes)
    if boxes.ndim < 2 or boxes.shape[-1] != 4 or boxes.shape[-2] < 1:
        raise InvalidInputError(f"boxes must have shape [..., R>=1, 4], got {boxes.shape}")
    if not np.all(np.isfinite(boxes)):
        raise InvalidInputError("boxes contain non-finite values")
    if np.any(boxes < 0) or np.any(boxes > 1):
        raise InvalidInputError("box coordinates must lie in [0, 1]")
    if np.any(boxes[..., 0] >= boxes[..., 2]) or np.any(boxes[..., 1] >= boxes[..., 3]):
        raise InvalidInputError("boxes need x1 < x2 and y1 < y2")


class ImageEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, std = cfg.model_dim, cfg.init_std
        self.feature_proj = Linear(cfg.roi_feature_dim, d, rng, std)
        self.position_proj = Linear(POSITION_DIM, d, rng, std)
        self.ln = LayerNorm(d)
        self.cls = param(rng.normal(0.0, std, size=d))
        self.trm = [TransformerBlock(cfg.attention, rng, std) for _ in range(cfg.img_trm_layers)]

    def __call__(self, roi_features: Tensor, boxes: np.ndarray) -> ImageEncoding:
        pos = Tensor(position_features(boxes))
        x = self.ln(self.feature_proj(roi_features) + self.position_proj(pos))
        x = _prepend(self.cls, x)
        for block in self.trm:
            x = block(x)
        return ImageEncoding(tokens=x, cls_i=x[..., 0, :])


class CrossModalBlock(Module):
    """Cross-attention, then self-attention, then feedforward, per stream.

    Both streams read the same block inputs in the cross-attention step.
    Every sublayer is pre-normalized and wrapped in a residual.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        spec, d, std = cfg.attention, cfg.model_dim, cfg.init_std
        self.ln_audio_cross = LayerNorm(d)
        self.ln_image_cross = LayerNorm(d)
        self.audio_cross = MultiHeadAttention(spec, rng, std)
        self.image_cross = MultiHeadAttention(spec, rng, std)
        self.ln_audio_self = LayerNorm(d)
        self.ln_image_self = LayerNorm(d)
        self.audio_self = MultiHeadAttention(spec, rng, std)
        self.image_self = MultiHeadAttention(spec, rng, std)
        self.ln_audio_ffn = LayerNorm(d)
        self.ln_image_ffn = LayerNorm(d)
        self.audio_ffn = FeedForward(d, 4 * d, rng, std)
        self.image_ffn = FeedForward(d, 4 * d, rng, std)

    def __call__(self, audio: Tensor, image: Tensor) -> tuple[Tensor, Tensor]:
        if audio.shape[-1] != image.shape[-1]:
            raise ShapeError(f"stream widths differ: {audio.shape} vs {image.shape}")
        if audio.shape[-2] < 1 or image.shape[-2] < 1:
            raise InvalidInputError("both token sets must be nonempty")
        ha, hi = self.ln_audio_cross(audio), self.ln_image_cross(image)
        audio, image = audio + self.audio_cross(ha, hi), image + self.image_cross(hi, ha)
        ha, hi = self.ln_audio_self(audio), self.ln_image_self(image)
        audio, image = audio + self.audio_self(ha, ha), image + self.image_self(hi, hi)
        audio = audio + self.audio_ffn(self.ln_audio_ffn(audio))
        image = image + self.image_ffn(self.ln_image_ffn(image))
        return audio, image


class ScoreHead(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        widths = [2 * cfg.model_dim, *cfg.mlp_hidden]
        self.layers = [Linear(a, b, rng, cfg.init_std) for a, b in zip(widths[:-1], widths[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.gelu(x)
        return x[..., 0]


class CrossModalEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.blocks = [CrossModalBlock(cfg, rng) for _ in range(cfg.xtrm_blocks)]
        self.head = ScoreHead(cfg, rng)

    def __call__(self, audio_tokens: Tensor, image_tokens: Tensor) -> Tensor:
        a, v = audio_tokens, image_tokens
        for block in self.blocks:
            a, v = block(a, v)
        return self.head(T.concat([a[..., 0, :], v[..., 0, :]], axis=-1))


class CrossModalRetriever(Module):
    """The unified model. ``forward_passes`` counts cross-modal pair evaluations."""

    def __init__(self, cfg: ModelConfig | None = None):
        self.cfg = cfg or ModelConfig()
        rng = np.random.Generator(np.random.Philox(self.cfg.seed))
        self.audio = AudioEncoder(self.cfg, rng)
        self.image = ImageEncoder(self.cfg, rng)
        self.xmodal = CrossModalEncoder(self.cfg, rng)
        self.forward_passes = 0

    # --------------------------------------------------------------- encoders

    def encode_audio(self, signal) -> AudioEncoding:
        """Encode one signal ``[L]`` or a batch of equal-length signals ``[B, L]``."""
        if isinstance(signal, AudioInput):
            signal = signal.signal
        x = signal if isinstance(signal, Tensor) else Tensor(np.asarray(signal, dtype=np.float64))
        if x.ndim < 1:
            raise InvalidInputError("audio signal must be at least 1-D")
        need = self.cfg.min_signal_length()
        if x.shape[-1] < need:
            raise InvalidInputError(f"signal length {x.shape[-1]} below minimum {need}")
        return self.audio(x)

    def encode_image(self, roi_features, boxes=None) -> ImageEncoding:
        """Encode one image ``([R, f], [R, 4])`` or a batch ``([B, R, f], [B, R, 4])``."""
        if isinstance(roi_features, ImageInput):
            roi_features, boxes = roi_features.roi_features, roi_features.boxes
        validate_boxes(boxes)
        feats = roi_features if isinstance(roi_features, Tensor) else Tensor(roi_features)
        if feats.shape[-1] != self.cfg.roi_feature_dim:
            raise ShapeError(f"roi features must have width {self.cfg.roi_feature_dim}")
        if feats.shape[:-1] != np.shape(boxes)[:-1]:
            raise ShapeError("roi_features and boxes disagree on region count")
        return self.image(feats, np.asarray(boxes, dtype=np.float64))

    # --------------------------------------------------------------- scores

    def fine_scores(self, audio_tokens: Tensor, image_tokens: Tensor) -> Tensor:
        """Fine scores for ``P`` aligned pairs: ``[P, Ta, d]`` x ``[P, Ti, d]`` -> ``[P]``."""
        if audio_tokens.shape[-1] != self.cfg.model_dim or image_tokens.shape[-1] != self.cfg.model_dim:
            raise ShapeError("token width differs from model_dim")
        n = int(np.prod(audio_tokens.shape[:-2], dtype=np.int64)) if audio_tokens.ndim > 2 else 1
        self.forward_passes += n
        return self.xmodal(audio_tokens, image_tokens)

    def fine_score(self, a: AudioEncoding, v: ImageEncoding) -> Tensor:
        return self.fine_scores(a.cls_and_lo_res, v.tokens)


def coarse_score(a, v) -> Tensor:
    """Unnormalized dot product of CLS_A and CLS_I."""
    ca = a.cls_a if isinstance(a, AudioEncoding) else T.as_tensor(a)
    ci = v.cls_i if isinstance(v, ImageEncoding) else T.as_tensor(v)
    if ca.shape[-1] != ci.shape[-1]:
        raise ShapeError("CLS widths differ")
    return (ca * ci).sum(axis=-1)


def fine_score(model: CrossModalRetriever, a: AudioEncoding, v: ImageEncoding) -> Tensor:
    return model.fine_score(a, v)


def encode_audio(model: CrossModalRetriever, a) -> AudioEncoding:
    return model.encode_audio(a)


def encode_image(model: CrossModalRetriever, v) -> ImageEncoding:
    return model.encode_image(v)


def save_checkpoint(model: CrossModalRetriever, path) -> None:
    arrays = {name: p.data for name, p in model.named_parameters()}
    write_records(path, arrays, meta={"model_config": model.cfg.to_dict()})


def load_checkpoint(path) -> CrossModalRetriever:
    arrays, meta = read_records(path)
    try:
        cfg = ModelConfig.from_dict(meta["model_config"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"{path}: checkpoint lacks a valid model config") from exc
    model = CrossModalRetriever(cfg)
    params = dict(model.named_parameters())
    if set(params) != set(arrays):
        raise FormatError(f"{path}: parameter names do not match the model config")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise FormatError(f"{path}: shape mismatch for {name}")
        p.data = arrays[name]
    return model
