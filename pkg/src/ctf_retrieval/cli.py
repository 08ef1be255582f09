"""Command-line driver: ``ctf-retrieval <subcommand> --config run.json [--set a.b=v ...]``.

The run config is one JSON document::

    {"seed": 0,
     "corpus": {...CorpusConfig fields...},
     "model": {...ModelConfig fields...},
     "train": {...TrainConfig fields...},
     "retrieval": {"mode": "ctf", "k": 10, "k_c": 100, "split": "test",
                   "direction": "speech_to_image", "bench_queries": 20, "bench_repeats": 1},
     "paths": {"data": ..., "checkpoint": ..., "history": ..., "encodings": ...,
               "index": ..., "report": ..., "bench": ...}}

Every section is optional; missing keys take library defaults. The single
top-level ``seed`` drives corpus generation, parameter init and batch order.
Data goes to files or stdout, logs to stderr.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

from .data import CorpusConfig, generate_corpus, read_corpus, write_corpus
from .errors import ConfigError, FormatError, InvalidInputError, ShapeError
from .evaluation import (
    DIRECTIONS,
    IMAGE_TO_SPEECH,
    SPEECH_TO_IMAGE,
    encode_split,
    evaluate,
    load_encodings,
    save_encodings,
)
from .model import ModelConfig, load_checkpoint
from .retrieval import MODES, CoarseIndex, bench, retrieve
from .training import TrainConfig, train

log = logging.getLogger("ctf_retrieval")

SUBCOMMANDS = ("gen-data", "train", "embed", "index", "retrieve", "eval", "bench")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3

DEFAULT_PATHS = {
    "data": "run/data",
    "checkpoint": "run/model.ckpt",
    "history": "run/history.csv",
    "encodings": "run/encodings.bin",
    "index": "run/index.bin",
    "report": "run/eval.json",
    "bench": "run/bench.json",
}

DEFAULT_RETRIEVAL = {
    "mode": "ctf",
    "k": 10,
    "k_c": 100,
    "split": "test",
    "direction": SPEECH_TO_IMAGE,
    "bench_queries": 20,
    "bench_repeats": 1,
}

SECTIONS = ("seed", "corpus", "model", "train", "retrieval", "paths")


@dataclass
class RunConfig:
    seed: int
    corpus: CorpusConfig
    model: ModelConfig
    train: TrainConfig
    retrieval: dict
    paths: dict

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        seed = doc.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
        sections = {}
        for name in ("corpus", "model", "train"):
            section = dict(doc.get(name) or {})
            if "seed" in section:
                raise ConfigError(f"{name}.seed is not allowed; set the top-level seed instead")
            section["seed"] = seed
            sections[name] = section
        retrieval = _merge("retrieval", DEFAULT_RETRIEVAL, doc.get("retrieval"))
        paths = _merge("paths", DEFAULT_PATHS, doc.get("paths"))
        try:
            cfg = cls(
                seed=seed,
                corpus=CorpusConfig.from_dict(sections["corpus"]),
                model=ModelConfig.from_dict(sections["model"]),
                train=TrainConfig.from_dict(sections["train"]),
                retrieval=retrieval,
                paths=paths,
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    def validate(self) -> None:
        r = self.retrieval
        if r["mode"] not in MODES:
            raise ConfigError(f"retrieval.mode must be one of {MODES}, got {r['mode']!r}")
        if r["direction"] not in DIRECTIONS:
            raise ConfigError(f"retrieval.direction must be one of {DIRECTIONS}")
        for key in ("k", "k_c", "bench_queries", "bench_repeats"):
            if not isinstance(r[key], int) or r[key] < 1:
                raise ConfigError(f"retrieval.{key} must be a positive integer")
        if r["mode"] == "ctf" and r["k"] > r["k_c"]:
            raise ConfigError(f"ctf retrieval needs k <= k_c (got k={r['k']}, k_c={r['k_c']})")
        if self.model.roi_feature_dim != self.corpus.roi_feature_dim:
            raise ConfigError("model.roi_feature_dim must equal corpus.roi_feature_dim")

    def path(self, key: str) -> Path:
        return Path(self.paths[key])


def _merge(name: str, defaults: dict, given) -> dict:
    given = dict(given or {})
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    return {**defaults, **given}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc: dict, assignment: str) -> None:
    """Apply one ``dotted.key=value`` override in place; values are parsed as JSON when possible."""
    key, sep, value = assignment.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    *parents, leaf = key.split(".")
    node = doc
    for part in parents:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-section")
    node[leaf] = _parse_value(value)


def load_run_config(path, overrides=(), flags: dict | None = None) -> RunConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
    doc = copy.deepcopy(doc)
    for assignment in overrides:
        apply_override(doc, assignment)
    for key, value in (flags or {}).items():
        if value is not None:
            doc.setdefault("retrieval", {})[key] = value
    return RunConfig.from_dict(doc)


# ---------------------------------------------------------------- subcommands


def _emit(obj, path: Path | None = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    sys.stdout.write(text)


def cmd_gen_data(cfg: RunConfig, args) -> None:
    corpus = generate_corpus(cfg.corpus)
    write_corpus(corpus, cfg.path("data"))
    log.info("wrote %d images / %d captions to %s", len(corpus.image_ids), len(corpus.caption_ids),
             cfg.path("data"))


def cmd_train(cfg: RunConfig, args) -> None:
    corpus = read_corpus(cfg.path("data"))
    _, state = train(corpus, cfg.model, cfg.train, cfg.path("checkpoint"), cfg.path("history"))
    log.info("trained %d steps; checkpoint %s", state.step, cfg.path("checkpoint"))


def cmd_embed(cfg: RunConfig, args) -> None:
    model = load_checkpoint(cfg.path("checkpoint"))
    corpus = read_corpus(cfg.path("data"))
    split = cfg.retrieval["split"]
    enc = encode_split(model, corpus, None if split == "all" else split)
    save_encodings(enc, cfg.path("encodings"), split)
    log.info("encoded %d images / %d captions", len(enc.image_ids), len(enc.caption_ids))


def _targets(enc, direction: str):
    return enc.image_targets() if direction == SPEECH_TO_IMAGE else enc.caption_targets()


def _load_targets(cfg: RunConfig, enc, direction: str):
    """Coarse index (from the index file if present) and target store for ``direction``."""
    index, store = _targets(enc, direction)
    index_path = cfg.path("index")
    if index_path.exists():
        saved = CoarseIndex.load(index_path)
        if saved.modality != index.modality:
            raise FormatError(f"{index_path} indexes {saved.modality} targets; {direction} needs {index.modality}")
        if saved.target_ids != store.target_ids:
            raise FormatError(f"{index_path} was built from different encodings")
        index = saved
    return index, store


def cmd_index(cfg: RunConfig, args) -> None:
    enc = load_encodings(cfg.path("encodings"))
    index, _ = _targets(enc, cfg.retrieval["direction"])
    index.save(cfg.path("index"))
    log.info("indexed %d %s targets", len(index.target_ids), index.modality)


def cmd_retrieve(cfg: RunConfig, args) -> None:
    if not args.query_id:
        raise ConfigError("retrieve needs --query-id")
    model = load_checkpoint(cfg.path("checkpoint"))
    enc = load_encodings(cfg.path("encodings"))
    if args.query_id in enc.caption_ids:
        direction, query = SPEECH_TO_IMAGE, enc.caption(enc.caption_ids.index(args.query_id))
    elif args.query_id in enc.image_ids:
        direction, query = IMAGE_TO_SPEECH, enc.image(enc.image_ids.index(args.query_id))
    else:
        raise InvalidInputError(f"query id {args.query_id!r} not in {cfg.path('encodings')}")
    index, store = _load_targets(cfg, enc, direction)
    r = cfg.retrieval
    res = retrieve(model, query, index, store, r["mode"], r["k"], r["k_c"])
    _emit({
        "query_id": args.query_id,
        "direction": direction,
        "mode": res.mode,
        "k": r["k"],
        "k_c": r["k_c"],
        "ranked": [{"id": i, "score": s} for i, s in res.ranked],
        "xmodal_passes": res.xmodal_passes,
    })


def cmd_eval(cfg: RunConfig, args) -> None:
    model = load_checkpoint(cfg.path("checkpoint"))
    corpus = read_corpus(cfg.path("data"))
    r = cfg.retrieval
    report = evaluate(model, corpus, r["split"], r["mode"], r["k_c"])
    _emit(report.to_json(), cfg.path("report"))


def cmd_bench(cfg: RunConfig, args) -> None:
    model = load_checkpoint(cfg.path("checkpoint"))
    enc = load_encodings(cfg.path("encodings"))
    r = cfg.retrieval
    direction = r["direction"]
    index, store = _load_targets(cfg, enc, direction)
    if direction == SPEECH_TO_IMAGE:
        queries = [enc.caption(i) for i in range(min(r["bench_queries"], len(enc.caption_ids)))]
    else:
        queries = [enc.image(i) for i in range(min(r["bench_queries"], len(enc.image_ids)))]
    report = bench(model, queries, index, store, r["k_c"], r["k"], r["bench_repeats"])
    report["direction"] = direction
    _emit(report, cfg.path("bench"))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "embed": cmd_embed,
    "index": cmd_index,
    "retrieve": cmd_retrieve,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctf-retrieval", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted override, e.g. train.batch_size=8 (repeatable)")
        p.add_argument("--mode", choices=MODES)
        p.add_argument("--k", type=int)
        p.add_argument("--k-c", dest="k_c", type=int)
        p.add_argument("--split")
        p.add_argument("--direction", choices=DIRECTIONS)
        p.add_argument("--query-id")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {"mode": args.mode, "k": args.k, "k_c": args.k_c, "split": args.split,
             "direction": args.direction}
    try:
        cfg = load_run_config(args.config, args.set, flags)
        log.info("effective seed %d", cfg.seed)
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (FormatError, InvalidInputError, ShapeError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - top-level guard maps everything else to exit 1
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
