"""Seeded synthetic paired corpus: "images" are RoI sets, "captions" are 1-D signals.

Each image owns a set of latent concepts. Its RoI features are projections of
those concepts plus noise; each of its captions concatenates one fixed
waveform motif per concept, in random order, plus noise. Randomness comes
from numpy's Philox counter-based generator keyed by the config seed, so the
same config always yields the same bytes.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .io import VERSION, read_blob, write_blob
from .model import AudioInput, ImageInput

SPLITS = ("train", "dev", "test")
MANIFEST_FORMAT = "ctf-retrieval-corpus"


@dataclass(frozen=True)
class CorpusConfig:
    num_images: int = 100
    captions_per_image: int = 5
    num_concepts: int = 16
    concepts_per_image: int = 3
    latent_dim: int = 8
    signal_len: int = 64
    roi_count: int = 8
    roi_feature_dim: int = 16
    noise_std: float = 0.1
    seed: int = 0
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    # motif lengths are rounded down to a multiple of this; 4 is the total
    # stride of the default audio front end, so every motif starts on the
    # same frame phase
    motif_align: int = 4

    def __post_init__(self):
        object.__setattr__(self, "split_fractions", tuple(float(x) for x in self.split_fractions))
        counts = (self.num_images, self.captions_per_image, self.num_concepts,
                  self.concepts_per_image, self.latent_dim, self.signal_len,
                  self.roi_count, self.roi_feature_dim, self.motif_align)
        if min(counts) < 1:
            raise ConfigError("all corpus counts must be >= 1")
        if self.concepts_per_image > self.num_concepts:
            raise ConfigError("concepts_per_image exceeds num_concepts")
        if self.signal_len < self.concepts_per_image * self.motif_align:
            raise ConfigError("signal_len too short for one aligned motif per concept")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")
        fr = self.split_fractions
        if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError("split_fractions must be three non-negative numbers summing to 1")

    @property
    def motif_len(self) -> int:
        raw = self.signal_len // self.concepts_per_image
        return raw - raw % self.motif_align

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown corpus config keys: {sorted(unknown)}")
        return cls(**d)


# 200 train / 20 dev / 100 test images with three captions each.
LEARNABILITY_CORPUS = CorpusConfig(
    num_images=320,
    captions_per_image=3,
    seed=17,
    split_fractions=(0.625, 0.0625, 0.3125),
)


@dataclass
class Corpus:
    config: CorpusConfig
    image_ids: list[str]
    roi_features: np.ndarray      # [N_img, R, f]
    boxes: np.ndarray             # [N_img, R, 4]
    caption_ids: list[str]
    caption_image_ids: list[str]
    signals: np.ndarray           # [N_cap, L]
    splits: dict[str, list[str]]  # split -> image ids
    image_concepts: np.ndarray    # [N_img, concepts_per_image], sorted concept ids
    caption_concepts: np.ndarray  # [N_cap, concepts_per_image], in spoken order
    _image_pos: dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self._image_pos = {img: i for i, img in enumerate(self.image_ids)}

    @property
    def images(self) -> list[ImageInput]:
        return [ImageInput(self.roi_features[i], self.boxes[i], img)
                for i, img in enumerate(self.image_ids)]

    @property
    def captions(self) -> list[AudioInput]:
        return [AudioInput(self.signals[i], cap, img)
                for i, (cap, img) in enumerate(zip(self.caption_ids, self.caption_image_ids))]

    def image_index(self, image_id: str) -> int:
        return self._image_pos[image_id]

    def split_indices(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        """Positions of the split's images and of all captions of those images."""
        if split not in self.splits:
            raise ConfigError(f"unknown split {split!r}")
        members = set(self.splits[split])
        img = np.array([i for i, x in enumerate(self.image_ids) if x in members], dtype=np.int64)
        cap = np.array([i for i, x in enumerate(self.caption_image_ids) if x in members], dtype=np.int64)
        return img, cap

    def equals(self, other: "Corpus") -> bool:
        """Bitwise equality of every field."""
        return (
            self.config == other.config
            and self.image_ids == other.image_ids
            and self.caption_ids == other.caption_ids
            and self.caption_image_ids == other.caption_image_ids
            and self.splits == other.splits
            and all(
                np.array_equal(a, b) and a.tobytes() == b.tobytes()
                for a, b in [
                    (self.roi_features, other.roi_features),
                    (self.boxes, other.boxes),
                    (self.signals, other.signals),
                    (self.image_concepts, other.image_concepts),
                    (self.caption_concepts, other.caption_concepts),
                ]
            )
        )


@dataclass
class ConceptBank:
    latents: np.ndarray     # [C, latent_dim]
    projection: np.ndarray  # [latent_dim, roi_feature_dim]
    motifs: np.ndarray      # [C, motif_len]


def _rng(cfg: CorpusConfig) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(cfg.seed))


def _draw_bank(cfg: CorpusConfig, rng: np.random.Generator) -> ConceptBank:
    latents = rng.normal(size=(cfg.num_concepts, cfg.latent_dim))
    projection = rng.normal(size=(cfg.latent_dim, cfg.roi_feature_dim)) / np.sqrt(cfg.latent_dim)
    motifs = rng.normal(size=(cfg.num_concepts, cfg.motif_len))
    return ConceptBank(latents, projection, motifs)


def concept_bank(cfg: CorpusConfig) -> ConceptBank:
    """The latent vectors and motifs that ``generate_corpus(cfg)`` uses."""
    return _draw_bank(cfg, _rng(cfg))


def _random_boxes(rng: np.random.Generator, n: int) -> np.ndarray:
    xs = np.sort(rng.uniform(0.0, 1.0, size=(n, 2)), axis=1)
    ys = np.sort(rng.uniform(0.0, 1.0, size=(n, 2)), axis=1)
    # keep every box at least 0.05 wide and tall
    xs[:, 1] = np.maximum(xs[:, 1], np.minimum(xs[:, 0] + 0.05, 1.0))
    xs[:, 0] = np.minimum(xs[:, 0], xs[:, 1] - 0.05)
    ys[:, 1] = np.maximum(ys[:, 1], np.minimum(ys[:, 0] + 0.05, 1.0))
    ys[:, 0] = np.minimum(ys[:, 0], ys[:, 1] - 0.05)
    return np.stack([xs[:, 0], ys[:, 0], xs[:, 1], ys[:, 1]], axis=1)


def _concept_sets(cfg: CorpusConfig, rng: np.random.Generator) -> np.ndarray:
    """Distinct concept sets per image while there are enough combinations."""
    n_comb = 1
    for i in range(cfg.concepts_per_image):
        n_comb = n_comb * (cfg.num_concepts - i) // (i + 1)
    if n_comb >= cfg.num_images and n_comb <= 200_000:
        combos = np.array(list(itertools.combinations(range(cfg.num_concepts), cfg.concepts_per_image)))
        pick = rng.choice(len(combos), size=cfg.num_images, replace=False)
        return combos[pick]
    sets = [np.sort(rng.choice(cfg.num_concepts, cfg.concepts_per_image, replace=False))
            for _ in range(cfg.num_images)]
    return np.array(sets)


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    rng = _rng(cfg)
    bank = _draw_bank(cfg, rng)
    image_concepts = _concept_sets(cfg, rng)

    n_img, R = cfg.num_images, cfg.roi_count
    roi_features = np.empty((n_img, R, cfg.roi_feature_dim))
    boxes = np.empty((n_img, R, 4))
    for i, concepts in enumerate(image_concepts):
        # every concept gets at least one region; the rest are random repeats
        extra = rng.choice(concepts, size=max(R - len(concepts), 0))
        assigned = rng.permutation(np.concatenate([concepts, extra])[:R])
        clean = bank.latents[assigned] @ bank.projection
        roi_features[i] = clean + cfg.noise_std * rng.normal(size=clean.shape)
        boxes[i] = _random_boxes(rng, R)

    n_cap = n_img * cfg.captions_per_image
    signals = np.zeros((n_cap, cfg.signal_len))
    caption_concepts = np.empty((n_cap, cfg.concepts_per_image), dtype=np.int64)
    m = cfg.motif_len
    for c in range(n_cap):
        order = rng.permutation(image_concepts[c // cfg.captions_per_image])
        caption_concepts[c] = order
        for slot, concept in enumerate(order):
            signals[c, slot * m:(slot + 1) * m] = bank.motifs[concept]
        signals[c] += cfg.noise_std * rng.normal(size=cfg.signal_len)

    width = len(str(max(n_img - 1, 0)))
    image_ids = [f"img{i:0{width}d}" for i in range(n_img)]
    caption_ids = [f"{image_ids[c // cfg.captions_per_image]}_cap{c % cfg.captions_per_image}"
                   for c in range(n_cap)]
    caption_image_ids = [image_ids[c // cfg.captions_per_image] for c in range(n_cap)]

    order = rng.permutation(n_img)
    n_train = int(round(cfg.split_fractions[0] * n_img))
    n_dev = int(round(cfg.split_fractions[1] * n_img))
    n_dev = min(n_dev, n_img - n_train)
    cuts = {"train": order[:n_train], "dev": order[n_train:n_train + n_dev],
            "test": order[n_train + n_dev:]}
    splits = {name: [image_ids[i] for i in sorted(idx)] for name, idx in cuts.items()}

    return Corpus(
        config=cfg,
        image_ids=image_ids,
        roi_features=roi_features,
        boxes=boxes,
        caption_ids=caption_ids,
        caption_image_ids=caption_image_ids,
        signals=signals,
        splits=splits,
        image_concepts=np.sort(image_concepts, axis=1),
        caption_concepts=caption_concepts,
    )


# ---------------------------------------------------------------- on-disk format

_BLOBS = {"images.f64": "roi_features", "boxes.f64": "boxes", "captions.f64": "signals"}


def write_corpus(corpus: Corpus, path) -> None:
    """Write ``manifest.json`` plus one float64 blob per array into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for fname, attr in _BLOBS.items():
        write_blob(path / fname, getattr(corpus, attr))
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": VERSION,
        "config": corpus.config.to_dict(),
        "image_ids": corpus.image_ids,
        "caption_ids": corpus.caption_ids,
        "caption_image_ids": corpus.caption_image_ids,
        "splits": corpus.splits,
        "image_concepts": corpus.image_concepts.tolist(),
        "caption_concepts": corpus.caption_concepts.tolist(),
        "arrays": {fname: list(getattr(corpus, attr).shape) for fname, attr in _BLOBS.items()},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def read_corpus(path) -> Corpus:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"{path}: no manifest.json") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: manifest is not valid JSON") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{path}: not a corpus manifest")
    if manifest.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported corpus version {manifest.get('version')}")
    arrays = {}
    for fname, attr in _BLOBS.items():
        a = read_blob(path / fname)
        if list(a.shape) != manifest["arrays"][fname]:
            raise FormatError(f"{path / fname}: shape {a.shape} disagrees with manifest")
        arrays[attr] = a
    try:
        return Corpus(
            config=CorpusConfig.from_dict(manifest["config"]),
            image_ids=manifest["image_ids"],
            caption_ids=manifest["caption_ids"],
            caption_image_ids=manifest["caption_image_ids"],
            splits={k: list(v) for k, v in manifest["splits"].items()},
            image_concepts=np.asarray(manifest["image_concepts"], dtype=np.int64),
            caption_concepts=np.asarray(manifest["caption_concepts"], dtype=np.int64),
            **arrays,
        )
    except (KeyError, ConfigError) as exc:
        raise FormatError(f"{path}: incomplete manifest ({exc})") from exc
