"""Command-line front door wiring the library into reproducible pipelines.

Subcommands map one-to-one onto library operations: ``build-vocab``,
``train``, ``embed``, ``recommend``, ``evaluate``, ``ablate``,
``import-wines``, and ``synth``. Every run writes a manifest next to its
outputs recording the resolved flags, derived seeds, input file hashes,
tool version, and timestamps, which is enough to reproduce the primary
outputs byte for byte.

All randomness in a command flows from the single ``--seed`` flag; purpose
specific seeds are derived by XORing fixed 64-bit tags into it. A JSON
config file (``--config``) may supply any long flag by name; explicit
flags win over the file.

Exit codes: 0 success, 1 validation error (bad values or malformed
content), 2 I/O error (unreadable or unwritable files), 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .catalog import (
    CatalogError,
    import_wine_csv,
    load_annotations,
    load_catalog,
    save_annotations,
    save_catalog,
    split_train_val,
)
from .encoder import (
    CheckpointError,
    EncoderConfig,
    EncoderError,
    checkpoint_load,
    checkpoint_save,
    init_model,
)
from .hashing import fnv1a64_file
from .metrics import (
    ABLATION_GRID,
    MetricsError,
    evaluate,
    evaluate_grid,
    render_table,
    save_grid_report,
    save_report,
)
from .objectives import ObjectiveError
from .ranker import EmbeddingStore, RankerError, embed_catalog, rank, save_recommendations
from .synth import SynthConfig, SynthError, synth_catalog
from .tokenizer import TokenizerError, Vocabulary, build_vocab
from .trainer import TrainerConfig, TrainerError, train

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_USAGE = 64

_MASK64 = (1 << 64) - 1

# Purpose tags folded into --seed so one number drives every stream.
SEED_TAGS = {
    "split": 0x53504C49545F5631,
    "init": 0x494E49545F563031,
    "trainer": 0x545241494E5F5631,
    "synth": 0x53594E54485F5631,
}

_VALIDATION_ERRORS = (
    ValueError, CatalogError, TokenizerError, EncoderError, CheckpointError,
    ObjectiveError, TrainerError, RankerError, MetricsError, SynthError,
)


class _UsageExit(SystemExit):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageExit(EXIT_USAGE)


def derive_seed(seed: int, purpose: str) -> int:
    return (seed ^ SEED_TAGS[purpose]) & _MASK64


def _parse_lambdas(text: str) -> tuple[float, float, float, float]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 4:
        raise ValueError(f"--lambda needs 4 comma-separated values, got {len(parts)}")
    return tuple(float(p) for p in parts)


def _parse_ks(text: str) -> tuple[int, ...]:
    ks = tuple(int(p.strip()) for p in text.split(",") if p.strip())
    if not ks or any(k < 1 for k in ks):
        raise ValueError("--ks needs positive comma-separated integers")
    return ks


class _Run:
    """Collects resolved flags, seeds, and input hashes for the manifest."""

    def __init__(self, command: str, flags: dict):
        self.command = command
        self.flags = flags
        self.seeds: dict[str, int] = {}
        self.input_hashes: dict[str, str] = {}
        self.extras: dict = {}
        self.started = datetime.now(timezone.utc).isoformat()

    def seed_for(self, purpose: str) -> int:
        derived = derive_seed(int(self.flags["seed"]), purpose)
        self.seeds[purpose] = derived
        return derived

    def hash_input(self, path: str | Path) -> int:
        digest = fnv1a64_file(path)
        self.input_hashes[str(path)] = f"{digest:016x}"
        return digest

    def write_manifest(self, out_dir: Path) -> None:
        manifest = {
            "command": self.command,
            "flags": {k: v for k, v in sorted(self.flags.items())},
            "seeds": self.seeds,
            "input_hashes": self.input_hashes,
            "version": __version__,
            "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(),
        }
        manifest.update(self.extras)
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, default=str) + "\n", encoding="utf-8")


def _out_dir(flags: dict) -> Path:
    out = Path(flags["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_vocab(run: _Run, flags: dict) -> Vocabulary:
    if not flags.get("vocab"):
        raise ValueError("this command needs --vocab")
    run.hash_input(flags["vocab"])
    return Vocabulary.load(flags["vocab"])


def _load_checkpoint(run: _Run, flags: dict, vocab: Vocabulary | None):
    if not flags.get("checkpoint"):
        raise ValueError("this command needs --checkpoint")
    fingerprint = run.hash_input(flags["checkpoint"])
    expected = vocab.file_hash() if vocab is not None else None
    params, config, _ = checkpoint_load(flags["checkpoint"], expected_vocab_hash=expected)
    return params, config, fingerprint


def _load_catalog_flag(run: _Run, flags: dict):
    if not flags.get("catalog"):
        raise ValueError("this command needs --catalog")
    run.hash_input(flags["catalog"])
    return load_catalog(flags["catalog"])


def _load_annotations_flag(run: _Run, flags: dict, catalog):
    if not flags.get("annotations"):
        raise ValueError("this command needs --annotations")
    run.hash_input(flags["annotations"])
    return load_annotations(flags["annotations"], catalog)


# ---------------------------------------------------------------- commands


def _cmd_build_vocab(run: _Run, flags: dict) -> int:
    catalog = _load_catalog_flag(run, flags)
    out = _out_dir(flags)
    corpus = [item.title for item in catalog] + [item.description for item in catalog]
    vocab = build_vocab(corpus, min_freq=flags["min_freq"], max_size=flags["max_vocab"])
    vocab.save(out / "vocab.txt")
    run.extras["vocab_size"] = len(vocab)
    run.write_manifest(out)
    print(f"wrote {out / 'vocab.txt'} ({len(vocab)} tokens incl. specials)")
    return EXIT_OK


def _encoder_config(flags: dict, vocab: Vocabulary) -> EncoderConfig:
    config = EncoderConfig(
        vocab_size=len(vocab),
        max_len=flags["max_len"],
        hidden=flags["hidden"],
        layers=flags["layers"],
        heads=flags["heads"],
        ffn_dim=flags["ffn_dim"],
        dropout=flags["dropout"],
        use_segments=not flags["no_segments"],
        tdm_projection=flags["tdm_projection"],
    )
    config.validate()
    return config


def _cmd_train(run: _Run, flags: dict) -> int:
    catalog = _load_catalog_flag(run, flags)
    out = _out_dir(flags)
    train_split, val_split = split_train_val(catalog, flags["val_frac"], run.seed_for("split"))

    if flags.get("vocab"):
        vocab = _load_vocab(run, flags)
    else:
        corpus = [i.title for i in train_split] + [i.description for i in train_split]
        vocab = build_vocab(corpus, min_freq=flags["min_freq"], max_size=flags["max_vocab"])
        vocab.save(out / "vocab.txt")
    vocab_hash = vocab.file_hash()

    config = _encoder_config(flags, vocab)
    params = init_model(config, run.seed_for("init"))
    cfg = TrainerConfig(
        max_steps=flags["steps"],
        batch_size=flags["batch_size"],
        p_s=flags["ps"],
        mask_rate=flags["mask_rate"],
        learning_rate=flags["lr"],
        warmup_steps=flags["warmup"],
        eval_every=flags["eval_every"],
        patience=flags["patience"],
        seed=run.seed_for("trainer"),
        objective=flags["objective"].replace("-", "_"),
        clip_norm=flags["clip_norm"],
    )
    result = train(params, train_split, val_split, vocab, cfg,
                   log_path=out / "training-log.jsonl")
    checkpoint_save(result.best_params, vocab_hash, out / "checkpoint.rcbt")
    checkpoint_save(result.final_params, vocab_hash, out / "checkpoint-final.rcbt")
    hist = result.history
    run.extras["best_step"] = hist.best_step
    run.extras["stop_reason"] = hist.stop_reason
    run.write_manifest(out)
    best = next(r for r in reversed(hist.records) if r.step == hist.best_step)
    print(f"best step {hist.best_step} (val total {best.val.l_total:.4f}, "
          f"stop: {hist.stop_reason}); wrote {out / 'checkpoint.rcbt'}")
    return EXIT_OK


def _cmd_embed(run: _Run, flags: dict) -> int:
    vocab = _load_vocab(run, flags)
    params, _, fingerprint = _load_checkpoint(run, flags, vocab)
    catalog = _load_catalog_flag(run, flags)
    out = _out_dir(flags)
    store = embed_catalog(params, catalog, vocab,
                          batch_size=flags["batch_size"], fingerprint=fingerprint)
    store.save(out / "embeddings.rcbe")
    run.extras["embedded"] = len(store)
    run.extras["skipped"] = list(store.skipped)
    run.write_manifest(out)
    print(f"wrote {out / 'embeddings.rcbe'} ({len(store)} items, {len(store.skipped)} skipped)")
    return EXIT_OK


def _get_store(run: _Run, flags: dict, params, catalog, vocab, fingerprint: int):
    if flags.get("embeddings"):
        run.hash_input(flags["embeddings"])
        store = EmbeddingStore.load(flags["embeddings"])
        if store.fingerprint != fingerprint:
            raise RankerError(
                f"embedding store fingerprint {store.fingerprint:016x} does not match "
                f"checkpoint {fingerprint:016x}; re-run embed")
        return store
    return embed_catalog(params, catalog, vocab,
                         batch_size=flags["batch_size"], fingerprint=fingerprint)


def _cmd_recommend(run: _Run, flags: dict) -> int:
    vocab = _load_vocab(run, flags)
    params, _, fingerprint = _load_checkpoint(run, flags, vocab)
    catalog = _load_catalog_flag(run, flags)
    out = _out_dir(flags)
    store = _get_store(run, flags, params, catalog, vocab, fingerprint)
    seed_ids = flags["seed_id"] or list(store.ids)
    lambdas = flags["lambdas"]
    top = flags["top"]
    pool = len(store) - 1
    if top is not None and top > pool:
        print(f"note: --top {top} exceeds the {pool}-candidate pool; truncating", file=sys.stderr)
    rankings = [
        rank(seed_id, catalog, store, params, vocab, lambdas=lambdas,
             batch_size=flags["batch_size"])
        for seed_id in seed_ids
    ]
    save_recommendations(rankings, out / "recommendations.jsonl", top=top)
    run.write_manifest(out)
    print(f"wrote {out / 'recommendations.jsonl'} ({len(rankings)} seeds)")
    return EXIT_OK


def _cmd_evaluate(run: _Run, flags: dict) -> int:
    vocab = _load_vocab(run, flags)
    params, _, fingerprint = _load_checkpoint(run, flags, vocab)
    catalog = _load_catalog_flag(run, flags)
    annotations = _load_annotations_flag(run, flags, catalog)
    out = _out_dir(flags)
    store = _get_store(run, flags, params, catalog, vocab, fingerprint)
    report = evaluate(params, catalog, annotations, vocab,
                      lambdas=flags["lambdas"], ks=flags["ks"], mode=flags["mode"],
                      store=store, batch_size=flags["batch_size"],
                      checkpoint_fingerprint=fingerprint)
    save_report(report, out / "report.json")
    table = render_table({"result": report})
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    run.write_manifest(out)
    print(table)
    return EXIT_OK


def _cmd_ablate(run: _Run, flags: dict) -> int:
    vocab = _load_vocab(run, flags)
    params, _, fingerprint = _load_checkpoint(run, flags, vocab)
    catalog = _load_catalog_flag(run, flags)
    annotations = _load_annotations_flag(run, flags, catalog)
    out = _out_dir(flags)
    store = _get_store(run, flags, params, catalog, vocab, fingerprint)
    reports = evaluate_grid(params, catalog, annotations, vocab, grid=ABLATION_GRID,
                            ks=flags["ks"], mode=flags["mode"], store=store,
                            batch_size=flags["batch_size"],
                            checkpoint_fingerprint=fingerprint)
    save_grid_report(reports, out / "ablation.json")
    table = render_table(reports)
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    run.write_manifest(out)
    print(table)
    return EXIT_OK


def _cmd_import_wines(run: _Run, flags: dict) -> int:
    if not flags.get("csv"):
        raise ValueError("import-wines needs --csv")
    run.hash_input(flags["csv"])
    out = _out_dir(flags)
    columns = None
    if flags.get("columns"):
        columns = {}
        for pair in flags["columns"].split(","):
            key, _, value = pair.partition("=")
            if not _:
                raise ValueError(f"--columns entries must be key=value, got {pair!r}")
            columns[key.strip()] = value.strip() or None
    catalog, stats = import_wine_csv(flags["csv"], columns=columns)
    save_catalog(catalog, out / "catalog.jsonl")
    run.extras["import_stats"] = {
        "total_rows": stats.total_rows,
        "imported": stats.imported,
        "dropped_empty_description": stats.dropped_empty_description,
        "unreadable_rows": stats.unreadable_rows,
    }
    run.write_manifest(out)
    print(f"imported {stats.imported}/{stats.total_rows} rows -> {out / 'catalog.jsonl'} "
          f"(dropped {stats.dropped_empty_description} without description, "
          f"{stats.unreadable_rows} unreadable)")
    return EXIT_OK


def _cmd_synth(run: _Run, flags: dict) -> int:
    out = _out_dir(flags)
    cfg = SynthConfig(
        num_items=flags["items"],
        num_clusters=flags["clusters"],
        seeds_per_cluster=flags["seeds_per_cluster"],
        seed=run.seed_for("synth"),
    )
    catalog, annotations = synth_catalog(cfg)
    save_catalog(catalog, out / "catalog.jsonl")
    save_annotations(annotations, out / "annotations.jsonl")
    run.extras["items"] = len(catalog)
    run.extras["annotated_seeds"] = len(annotations.entries)
    run.write_manifest(out)
    print(f"wrote {out / 'catalog.jsonl'} ({len(catalog)} items) and "
          f"{out / 'annotations.jsonl'} ({len(annotations.entries)} seeds)")
    return EXIT_OK


_COMMANDS = {
    "build-vocab": _cmd_build_vocab,
    "train": _cmd_train,
    "embed": _cmd_embed,
    "recommend": _cmd_recommend,
    "evaluate": _cmd_evaluate,
    "ablate": _cmd_ablate,
    "import-wines": _cmd_import_wines,
    "synth": _cmd_synth,
}


# ---------------------------------------------------------------- flag specs

# (flag, dest, type/parser, default, help); type None marks store_true flags.
_COMMON = [
    ("--seed", "seed", int, 0, "master seed; per-purpose seeds derive from it"),
    ("--threads", "threads", int, 1, "parallelism hint; never affects results"),
    ("--config", "config", str, None, "JSON file supplying flags by long name"),
    ("--out", "out", str, None, "output directory (required)"),
]

_MODEL = [
    ("--hidden", "hidden", int, 64, "hidden width"),
    ("--layers", "layers", int, 2, "encoder layers"),
    ("--heads", "heads", int, 4, "attention heads"),
    ("--ffn-dim", "ffn_dim", int, 256, "feed-forward width"),
    ("--max-len", "max_len", int, 40, "sequence length"),
    ("--dropout", "dropout", float, 0.0, "dropout rate during training"),
    ("--no-segments", "no_segments", None, False, "disable segment embeddings"),
    ("--tdm-projection", "tdm_projection", None, False,
     "learn linear projections before the matching cosine"),
]

_SPECS: dict[str, list] = {
    "build-vocab": _COMMON + [
        ("--catalog", "catalog", str, None, "catalog JSONL/CSV"),
        ("--min-freq", "min_freq", int, 1, "minimum token frequency"),
        ("--max-vocab", "max_vocab", int, 50000, "vocabulary cap incl. specials"),
    ],
    "train": _COMMON + _MODEL + [
        ("--catalog", "catalog", str, None, "catalog JSONL/CSV"),
        ("--vocab", "vocab", str, None, "vocabulary file (default: build from train split)"),
        ("--val-frac", "val_frac", float, 0.1, "validation fraction"),
        ("--steps", "steps", int, 2000, "max training steps"),
        ("--batch-size", "batch_size", int, 16, "pairs per step"),
        ("--ps", "ps", float, 0.5, "description switching probability"),
        ("--mask-rate", "mask_rate", float, 0.15, "token masking rate"),
        ("--lr", "lr", float, 3e-4, "learning rate"),
        ("--warmup", "warmup", int, None, "warmup steps (default 1% of steps)"),
        ("--eval-every", "eval_every", int, 200, "steps between validations"),
        ("--patience", "patience", int, 10, "non-improving validations before stopping"),
        ("--clip-norm", "clip_norm", float, None, "global gradient norm clip"),
        ("--objective", "objective", str, "recobert", "recobert or mlm-only"),
        ("--min-freq", "min_freq", int, 1, "vocab min frequency (when building)"),
        ("--max-vocab", "max_vocab", int, 50000, "vocab cap (when building)"),
    ],
    "embed": _COMMON + [
        ("--checkpoint", "checkpoint", str, None, "trained checkpoint"),
        ("--catalog", "catalog", str, None, "catalog JSONL/CSV"),
        ("--vocab", "vocab", str, None, "vocabulary file"),
        ("--batch-size", "batch_size", int, 32, "sequences per forward pass"),
    ],
    "recommend": _COMMON + [
        ("--checkpoint", "checkpoint", str, None, "trained checkpoint"),
        ("--catalog", "catalog", str, None, "catalog JSONL/CSV"),
        ("--vocab", "vocab", str, None, "vocabulary file"),
        ("--embeddings", "embeddings", str, None, "precomputed embedding store"),
        ("--seed-id", "seed_id", "append", None, "seed item id (repeatable; default all)"),
        ("--lambda", "lambdas", _parse_lambdas, (1.0, 1.0, 1.0, 1.0),
         "four score weights, comma separated"),
        ("--top", "top", int, None, "truncate each ranking to the top K"),
        ("--batch-size", "batch_size", int, 32, "sequences per forward pass"),
    ],
    "evaluate": _COMMON + [
        ("--checkpoint", "checkpoint", str, None, "trained checkpoint"),
        ("--catalog", "catalog", str, None, "catalog JSONL/CSV"),
        ("--annotations", "annotations", str, None, "ground-truth JSONL"),
        ("--vocab", "vocab", str, None, "vocabulary file"),
        ("--embeddings", "embeddings", str, None, "precomputed embedding store"),
        ("--lambda", "lambdas", _parse_lambdas, (1.0, 1.0, 1.0, 1.0),
         "four score weights, comma separated"),
        ("--ks", "ks", _parse_ks, (1, 5, 10), "hit-ratio cutoffs"),
        ("--mode", "mode", str, "full", "candidate pool: full or subset"),
        ("--batch-size", "batch_size", int, 32, "sequences per forward pass"),
    ],
    "ablate": _COMMON + [
        ("--checkpoint", "checkpoint", str, None, "trained checkpoint"),
        ("--catalog", "catalog", str, None, "catalog JSONL/CSV"),
        ("--annotations", "annotations", str, None, "ground-truth JSONL"),
        ("--vocab", "vocab", str, None, "vocabulary file"),
        ("--embeddings", "embeddings", str, None, "precomputed embedding store"),
        ("--ks", "ks", _parse_ks, (1, 5, 10), "hit-ratio cutoffs"),
        ("--mode", "mode", str, "full", "candidate pool: full or subset"),
        ("--batch-size", "batch_size", int, 32, "sequences per forward pass"),
    ],
    "import-wines": _COMMON + [
        ("--csv", "csv", str, None, "raw wine review CSV"),
        ("--columns", "columns", str, None,
         "override column mapping, e.g. winery=prod,name=label"),
    ],
    "synth": _COMMON + [
        ("--items", "items", int, 200, "number of items"),
        ("--clusters", "clusters", int, 10, "number of latent clusters"),
        ("--seeds-per-cluster", "seeds_per_cluster", int, 5, "annotated seeds per cluster"),
    ],
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="recobert", description=__doc__)
    parser.add_argument("--version", action="version", version=f"recobert {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for command, specs in _SPECS.items():
        p = sub.add_parser(command, prog=f"recobert {command}")
        for flag, dest, kind, _default, help_text in specs:
            if kind is None:
                p.add_argument(flag, dest=dest, action="store_const", const=True,
                               default=None, help=help_text)
            elif kind == "append":
                p.add_argument(flag, dest=dest, action="append", default=None, help=help_text)
            else:
                p.add_argument(flag, dest=dest, type=kind, default=None, help=help_text)
    return parser


def _resolve_flags(command: str, ns: argparse.Namespace) -> dict:
    """Merge CLI flags over an optional config file over built-in defaults."""
    specs = _SPECS[command]
    config_values: dict[str, object] = {}
    if ns.config:
        try:
            raw = json.loads(Path(ns.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"--config {ns.config}: not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ValueError(f"--config {ns.config}: expected a JSON object")
        config_values = {str(k).replace("_", "-").lstrip("-"): v for k, v in raw.items()}

    flags: dict = {}
    known = set()
    for flag, dest, kind, default, _help in specs:
        known.add(flag.lstrip("-"))
        cli_value = getattr(ns, dest)
        if cli_value is not None:
            flags[dest] = cli_value
            continue
        key = flag.lstrip("-")
        if key in config_values:
            value = config_values[key]
            if kind is None:
                flags[dest] = bool(value)
            elif kind == "append":
                flags[dest] = list(value) if isinstance(value, (list, tuple)) else [value]
            elif callable(kind) and not isinstance(value, str) and kind in (_parse_lambdas, _parse_ks):
                flags[dest] = kind(",".join(str(v) for v in value)) \
                    if isinstance(value, (list, tuple)) else kind(str(value))
            else:
                flags[dest] = kind(value) if isinstance(value, str) else value
        else:
            flags[dest] = default
    unknown = set(config_values) - known - {"config"}
    if unknown:
        raise ValueError(f"--config has unknown keys: {sorted(unknown)}")
    if not flags.get("out"):
        raise ValueError("this command needs --out")
    return flags


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        ns = parser.parse_args(argv)
    except _UsageExit as exc:
        return int(exc.code)
    try:
        flags = _resolve_flags(ns.command, ns)
        run = _Run(ns.command, {k: v for k, v in flags.items() if k != "config"})
        return _COMMANDS[ns.command](run, flags)
    except FileNotFoundError as exc:
        print(f"recobert: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except IsADirectoryError as exc:
        print(f"recobert: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except PermissionError as exc:
        print(f"recobert: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except _VALIDATION_ERRORS as exc:
        print(f"recobert: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"recobert: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
