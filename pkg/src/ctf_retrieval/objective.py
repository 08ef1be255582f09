"""Batch score matrices, the multi-caption mask and the masked margin InfoNCE loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, InvalidInputError, ShapeError
from .model import AudioEncoding, CrossModalRetriever, ImageEncoding
from .tensor import Tensor

A2I = "A->I"
I2A = "I->A"


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 0.1
    lambda_f: float = 1.0
    delta: float = 1.0

    def __post_init__(self):
        if self.lambda_c < 0 or self.lambda_f < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.lambda_c == 0 and self.lambda_f == 0:
            raise ConfigError("at least one of lambda_c, lambda_f must be positive")
        if not np.isfinite(self.delta):
            raise ConfigError("delta must be finite")


def coarse_score_matrix(audio_cls, image_cls) -> Tensor:
    """``S[i, j] = <cls_a_i, cls_i_j>`` for ``[B, d]`` inputs."""
    audio_cls, image_cls = T.as_tensor(audio_cls), T.as_tensor(image_cls)
    if audio_cls.ndim != 2 or image_cls.ndim != 2 or audio_cls.shape[1] != image_cls.shape[1]:
        raise ShapeError(f"expected [B, d] inputs, got {audio_cls.shape} and {image_cls.shape}")
    return audio_cls @ image_cls.mT


def fine_score_matrix(model: CrossModalRetriever, audio: AudioEncoding, images: ImageEncoding) -> Tensor:
    """All ``B_a x B_i`` fine scores from batched encodings, one cross-modal pass per entry."""
    a_tok, v_tok = audio.cls_and_lo_res, images.tokens
    if a_tok.ndim != 3 or v_tok.ndim != 3:
        raise ShapeError("fine_score_matrix expects batched encodings")
    if a_tok.shape[-1] != model.cfg.model_dim or v_tok.shape[-1] != model.cfg.model_dim:
        raise ShapeError("encodings were produced with a different model_dim")
    ba, bi = a_tok.shape[0], v_tok.shape[0]
    rows = np.repeat(np.arange(ba), bi)
    cols = np.tile(np.arange(bi), ba)
    return model.fine_scores(a_tok[rows], v_tok[cols]).reshape(ba, bi)


def build_mask(image_ids: Sequence) -> np.ndarray:
    """``M[i, j] = 0`` when caption ``i`` and image slot ``j`` show the same image, else 1."""
    if len(image_ids) < 1:
        raise InvalidInputError("empty batch")
    ids = np.asarray([str(x) for x in image_ids])
    return (ids[:, None] != ids[None, :]).astype(np.int64)


def masked_infonce(S, M: np.ndarray, delta: float, direction: str = A2I) -> Tensor:
    """Mean over rows of ``-log softmax`` of the margin-shifted positive.

    For row ``i`` (A->I) the logits are ``S[i, i] - delta`` and every ``S[i, j]``
    with ``M[i, j] = 1``; I->A uses columns instead of rows.
    """
    S = T.as_tensor(S)
    M = np.asarray(M)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or M.shape != S.shape:
        raise ShapeError(f"need square S and matching mask, got {S.shape} and {M.shape}")
    if np.any(np.isnan(S.data)):
        raise InvalidInputError("score matrix contains NaN")
    if direction == I2A:
        S, M = S.mT, M.T
    elif direction != A2I:
        raise InvalidInputError(f"unknown direction {direction!r}")
    b = S.shape[0]
    eye = np.eye(b)
    keep = (M == 1) | (eye == 1)
    offset = np.where(keep, 0.0, -np.inf) - delta * eye
    logits = S + offset
    positives = (S * eye).sum(axis=1) - delta
    return (T.logsumexp(logits, axis=1) - positives).mean()


def bidirectional_loss(S, M: np.ndarray, delta: float) -> Tensor:
    return masked_infonce(S, M, delta, A2I) + masked_infonce(S, M, delta, I2A)


def loss_terms(Sc, Sf, M: np.ndarray, w: LossWeights) -> tuple[Tensor, Tensor, Tensor]:
    """``(Lc, Lf, total)``; a term with zero weight is left out of ``total`` entirely."""
    Lc = bidirectional_loss(Sc, M, w.delta)
    Lf = bidirectional_loss(Sf, M, w.delta)
    parts = []
    if w.lambda_c:
        parts.append(Lc * w.lambda_c)
    if w.lambda_f:
        parts.append(Lf * w.lambda_f)
    total = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    return Lc, Lf, total


def combined_loss(Sc, Sf, M: np.ndarray, w: LossWeights) -> Tensor:
    Sc, Sf = T.as_tensor(Sc), T.as_tensor(Sf)
    if Sc.shape != Sf.shape:
        raise ShapeError("coarse and fine score matrices differ in shape")
    return loss_terms(Sc, Sf, M, w)[2]
