"""Recall@K in both retrieval directions, with any-hit scoring for multiple golds."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import Corpus
from .errors import FormatError, InvalidInputError
from .io import ENCODINGS_MAGIC, read_records, write_records
from .model import AudioEncoding, CrossModalRetriever, ImageEncoding
from .retrieval import DEFAULT_K_C, CoarseIndex, TargetStore, build_index, retrieve

DEFAULT_KS = (1, 5, 10)
SPEECH_TO_IMAGE = "speech_to_image"
IMAGE_TO_SPEECH = "image_to_speech"
DIRECTIONS = (SPEECH_TO_IMAGE, IMAGE_TO_SPEECH)


def recall_at_k(rankings: Mapping[str, Sequence[str]], gold: Mapping[str, set],
                ks: Sequence[int] = DEFAULT_KS) -> dict[int, float]:
    """Fraction of gold queries whose top-k holds at least one gold target."""
    if not gold:
        raise InvalidInputError("no gold queries")
    hits = {k: 0 for k in ks}
    for qid, golds in gold.items():
        if qid not in rankings:
            raise InvalidInputError(f"query {qid!r} has no ranking")
        if not golds:
            raise InvalidInputError(f"query {qid!r} has an empty gold set")
        ranked = list(rankings[qid])
        first = next((r for r, t in enumerate(ranked) if t in golds), None)
        for k in ks:
            if first is not None and first < k:
                hits[k] += 1
    return {k: hits[k] / len(gold) for k in ks}


def average_directions(a2i: Mapping[int, float], i2a: Mapping[int, float]) -> dict[int, float]:
    if set(a2i) != set(i2a):
        raise InvalidInputError("direction reports use different ks")
    return {k: (a2i[k] + i2a[k]) / 2.0 for k in a2i}


def _keyed(recalls: Mapping[int, float]) -> dict[str, float]:
    return {f"R@{k}": float(v) for k, v in sorted(recalls.items())}


@dataclass
class MetricReport:
    speech_to_image: dict[int, float]
    image_to_speech: dict[int, float]
    num_queries: dict[str, int]
    mode: str
    k_c: int

    @property
    def averaged(self) -> dict[int, float]:
        return average_directions(self.speech_to_image, self.image_to_speech)

    def to_json(self) -> dict:
        return {
            SPEECH_TO_IMAGE: _keyed(self.speech_to_image),
            IMAGE_TO_SPEECH: _keyed(self.image_to_speech),
            "averaged": _keyed(self.averaged),
            "num_queries": int(sum(self.num_queries.values())),
            "queries_per_direction": dict(self.num_queries),
            "mode": self.mode,
            "k_c": int(self.k_c),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- corpus evaluation


@dataclass
class EncodedSplit:
    image_ids: list[str]
    caption_ids: list[str]
    caption_image_ids: list[str]
    images: ImageEncoding  # batched, plain arrays wrapped in Tensors
    captions: AudioEncoding

    def image_targets(self) -> tuple[CoarseIndex, TargetStore]:
        return build_index(self.images, self.image_ids), TargetStore.from_encodings(self.images, self.image_ids)

    def caption_targets(self) -> tuple[CoarseIndex, TargetStore]:
        return (build_index(self.captions, self.caption_ids),
                TargetStore.from_encodings(self.captions, self.caption_ids))

    def caption(self, i: int) -> AudioEncoding:
        c = self.captions
        return AudioEncoding(c.hi_res[i], c.cls_and_lo_res[i], c.cls_a[i])

    def image(self, i: int) -> ImageEncoding:
        v = self.images
        return ImageEncoding(v.tokens[i], v.cls_i[i])


_ENCODING_ARRAYS = ("image_tokens", "image_cls", "audio_hi_res", "audio_cls_and_lo_res", "audio_cls")


def save_encodings(enc: EncodedSplit, path, split: str | None = None) -> None:
    arrays = dict(zip(_ENCODING_ARRAYS, (
        enc.images.tokens.data, enc.images.cls_i.data,
        enc.captions.hi_res.data, enc.captions.cls_and_lo_res.data, enc.captions.cls_a.data,
    )))
    meta = {"split": split, "image_ids": enc.image_ids, "caption_ids": enc.caption_ids,
            "caption_image_ids": enc.caption_image_ids}
    write_records(path, arrays, meta, magic=ENCODINGS_MAGIC)


def load_encodings(path) -> EncodedSplit:
    arrays, meta = read_records(path, magic=ENCODINGS_MAGIC)
    missing = set(_ENCODING_ARRAYS) - set(arrays)
    if missing or not {"image_ids", "caption_ids", "caption_image_ids"} <= set(meta):
        raise FormatError(f"{path}: incomplete encodings file")
    if len(meta["image_ids"]) != len(arrays["image_cls"]) or len(meta["caption_ids"]) != len(arrays["audio_cls"]):
        raise FormatError(f"{path}: id count disagrees with arrays")
    t = {k: T.Tensor(v) for k, v in arrays.items()}
    return EncodedSplit(
        image_ids=list(meta["image_ids"]),
        caption_ids=list(meta["caption_ids"]),
        caption_image_ids=list(meta["caption_image_ids"]),
        images=ImageEncoding(t["image_tokens"], t["image_cls"]),
        captions=AudioEncoding(t["audio_hi_res"], t["audio_cls_and_lo_res"], t["audio_cls"]),
    )


def encode_split(model: CrossModalRetriever, corpus: Corpus, split: str | None = "test",
                 batch: int = 256) -> EncodedSplit:
    """Encode a split's images and captions without recording gradients."""
    if split is None:
        img_pos, cap_pos = np.arange(len(corpus.image_ids)), np.arange(len(corpus.caption_ids))
    else:
        img_pos, cap_pos = corpus.split_indices(split)
    if img_pos.size == 0:
        raise InvalidInputError(f"split {split!r} has no images")
    with T.no_grad():
        tok, cls = [], []
        for s in range(0, len(img_pos), batch):
            sel = img_pos[s:s + batch]
            enc = model.encode_image(corpus.roi_features[sel], corpus.boxes[sel])
            tok.append(enc.tokens.data)
            cls.append(enc.cls_i.data)
        images = ImageEncoding(T.Tensor(np.concatenate(tok)), T.Tensor(np.concatenate(cls)))
        hi, lo, ca = [], [], []
        for s in range(0, len(cap_pos), batch):
            sel = cap_pos[s:s + batch]
            enc = model.encode_audio(corpus.signals[sel])
            hi.append(enc.hi_res.data)
            lo.append(enc.cls_and_lo_res.data)
            ca.append(enc.cls_a.data)
        captions = AudioEncoding(T.Tensor(np.concatenate(hi)), T.Tensor(np.concatenate(lo)),
                                 T.Tensor(np.concatenate(ca)))
    return EncodedSplit(
        image_ids=[corpus.image_ids[i] for i in img_pos],
        caption_ids=[corpus.caption_ids[i] for i in cap_pos],
        caption_image_ids=[corpus.caption_image_ids[i] for i in cap_pos],
        images=images,
        captions=captions,
    )


def rank_split(model: CrossModalRetriever, enc: EncodedSplit, mode: str, k_c: int = DEFAULT_K_C,
               k: int | None = None, directions: Sequence[str] = DIRECTIONS) -> dict[str, dict[str, list[str]]]:
    """Ranked target ids for every query of each direction."""
    out = {}
    if SPEECH_TO_IMAGE in directions:
        index, store = enc.image_targets()
        depth = k or max(DEFAULT_KS)
        kk = min(depth, k_c) if mode == "ctf" else depth
        out[SPEECH_TO_IMAGE] = {
            cid: retrieve(model, enc.caption(i), index, store, mode, kk, k_c).ids
            for i, cid in enumerate(enc.caption_ids)
        }
    if IMAGE_TO_SPEECH in directions:
        index, store = enc.caption_targets()
        depth = k or max(DEFAULT_KS)
        kk = min(depth, k_c) if mode == "ctf" else depth
        out[IMAGE_TO_SPEECH] = {
            iid: retrieve(model, enc.image(i), index, store, mode, kk, k_c).ids
            for i, iid in enumerate(enc.image_ids)
        }
    return out


def gold_maps(enc: EncodedSplit) -> dict[str, dict[str, set]]:
    captions_of = defaultdict(set)
    for cid, iid in zip(enc.caption_ids, enc.caption_image_ids):
        captions_of[iid].add(cid)
    return {
        SPEECH_TO_IMAGE: {cid: {iid} for cid, iid in zip(enc.caption_ids, enc.caption_image_ids)},
        IMAGE_TO_SPEECH: {iid: set(captions_of[iid]) for iid in enc.image_ids},
    }


def evaluate(model: CrossModalRetriever, corpus: Corpus, split: str = "test", mode: str = "ctf",
             k_c: int = DEFAULT_K_C, ks: Sequence[int] = DEFAULT_KS) -> MetricReport:
    enc = encode_split(model, corpus, split)
    rankings = rank_split(model, enc, mode, k_c, k=max(ks))
    gold = gold_maps(enc)
    return MetricReport(
        speech_to_image=recall_at_k(rankings[SPEECH_TO_IMAGE], gold[SPEECH_TO_IMAGE], ks),
        image_to_speech=recall_at_k(rankings[IMAGE_TO_SPEECH], gold[IMAGE_TO_SPEECH], ks),
        num_queries={SPEECH_TO_IMAGE: len(gold[SPEECH_TO_IMAGE]),
                     IMAGE_TO_SPEECH: len(gold[IMAGE_TO_SPEECH])},
        mode=mode,
        k_c=k_c,
    )
