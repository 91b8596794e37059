"""Command-line interface.

Subcommands: generate, partition, train, sample, evaluate,
analyze-conflicts, compare, pipeline. Every subcommand is a pure function
of (input files, flags, seed) to files under ``--out``; nothing is written
anywhere else. Exit codes: 0 success, 1 usage error, 2 stage failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_experiment_config
from .errors import StageError
from .pipeline import RunManifest, build_partition, compare_runs, run_pipeline


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1 instead of argparse's 2
        raise _UsageError(message)


def _add_common(sub: argparse.ArgumentParser, out_required: bool = True) -> None:
    sub.add_argument("--config", required=True, help="experiment config file")
    sub.add_argument("--seed", type=int, default=None, help="override the config root seed")
    sub.add_argument("--out", required=out_required, help="output directory")


def _load(args) -> tuple[ExperimentConfig, int, Path]:
    cfg = load_experiment_config(args.config)
    root = cfg.root_seed if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, root, out


def _cmd_generate(args) -> int:
    from .config import class_specs_from_config
    from .datagen import generate_corpus, save_corpus
    from .seeding import derive_seed

    cfg, root, out = _load(args)
    for split, size in (("train", cfg.corpus_size), ("test", cfg.corpus_test_size)):
        corpus = generate_corpus(
            class_specs_from_config(cfg, size), cfg.corpus_dimension,
            derive_seed(root, f"datagen-{split}"),
            cfg.corpus_embedding_dim, cfg.corpus_noise_scale,
        )
        save_corpus(corpus, out / f"{split}_corpus.txt")
        print(f"wrote {out / f'{split}_corpus.txt'} ({len(corpus)} samples)")
    return 0


def _cmd_partition(args) -> int:
    from .datagen import load_corpus
    from .partition import composition_report, save_partition
    from .seeding import derive_seed

    cfg, root, out = _load(args)
    corpus = load_corpus(args.corpus or out / "train_corpus.txt")
    part = build_partition(
        corpus, cfg.partition_method, cfg.partition_experts, derive_seed(root, "partition")
    )
    save_partition(part, out / "partition.txt")
    report = composition_report(part, corpus)
    (out / "composition.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(f"wrote {out / 'partition.txt'} ({part.method}, K={part.num_experts})")
    return 0


def _cmd_train(args) -> int:
    from .datagen import load_corpus
    from .model import BackboneConfig, ModelState, init_adapters, init_backbone, save_checkpoint
    from .partition import load_partition
    from .seeding import derive_seed
    from .training import ledger_json, pretrain_backbone, traces_csv, train

    cfg, root, out = _load(args)
    corpus = load_corpus(args.corpus or out / "train_corpus.txt")
    part = load_partition(args.partition or out / "partition.txt", corpus)
    config = BackboneConfig(
        data_dim=cfg.corpus_dimension, hidden_dim=cfg.backbone_hidden_dim,
        num_blocks=cfg.backbone_blocks, cond_dim=cfg.corpus_embedding_dim,
        time_embed_dim=cfg.backbone_time_embed_dim,
    )
    state = ModelState(
        config=config, backbone=init_backbone(config, derive_seed(root, "backbone")),
        adapters=None, frozen=False,
    )
    state = pretrain_backbone(
        state, corpus, cfg.train_pretrain_steps, cfg.train_batch_size,
        cfg.train_pretrain_lr, derive_seed(root, "pretrain"),
        cond_dropout=cfg.train_cond_dropout,
    )
    state.adapters = init_adapters(
        config, part.num_experts, cfg.adapter_dim, cfg.adapter_placement,
        cfg.adapter_nonlinearity, derive_seed(root, "adapters"),
    )
    trained, ledger, traces = train(
        state, corpus, part, steps=cfg.train_steps, batch_size=cfg.train_batch_size,
        resample=cfg.train_resample, lr=cfg.train_lr, seed=derive_seed(root, "train"),
        quota=cfg.train_quota, cond_dropout=cfg.train_cond_dropout,
        trace_interval=cfg.train_trace_interval,
    )
    save_checkpoint(trained, out / "checkpoint.npz")
    (out / "ledger.json").write_text(ledger_json(ledger))
    (out / "conflict_trace.csv").write_text(traces_csv(traces, part.num_experts))
    print(f"wrote {out / 'checkpoint.npz'} (utilization gap {ledger.gap():.2f}%)")
    return 0


def _cmd_sample(args) -> int:
    from .datagen import label_embedding, load_corpus
    from .metrics import save_samples
    from .model import load_checkpoint, sample_batch
    from .partition import class_to_expert, load_partition
    from .seeding import derive_seed

    cfg, root, out = _load(args)
    corpus = load_corpus(args.corpus or out / "train_corpus.txt")
    part = load_partition(args.partition or out / "partition.txt", corpus)
    state = load_checkpoint(args.checkpoint or out / "checkpoint.npz")
    experts = class_to_expert(part, corpus)
    vectors, classes = [], []
    for spec in corpus.classes:
        cond = label_embedding(
            spec.class_id, corpus.num_classes, corpus.seed, corpus.embedding_dim
        )
        xs = sample_batch(
            state, cond, experts[spec.class_id], cfg.sample_guidance_scale,
            cfg.sample_steps, cfg.sample_per_class, derive_seed(root, "sample", spec.class_id),
        )
        vectors.append(xs)
        classes.extend([spec.class_id] * cfg.sample_per_class)
    save_samples(out / "generated.txt", np.vstack(vectors), np.array(classes))
    print(f"wrote {out / 'generated.txt'} ({len(classes)} samples)")
    return 0


def _cmd_evaluate(args) -> int:
    from .metrics import evaluate, load_features

    cfg, root, out = _load(args)
    generated = load_features(args.generated or out / "generated.txt", tag="generated")
    train_f = load_features(args.train or out / "train_corpus.txt", tag="train")
    test_f = load_features(args.test or out / "test_corpus.txt", tag="test")
    report = evaluate(generated, train_f, test_f, k=cfg.metrics_k)
    (out / "metrics.json").write_text(report.to_json())
    (out / "metrics.csv").write_text(report.to_csv())
    print(
        f"wrote {out / 'metrics.json'} "
        f"(coverage {report.coverage:.3f}, adjusted retrieval {report.irs_adjusted:.3f})"
    )
    return 0


def _cmd_analyze_conflicts(args) -> int:
    import csv as _csv
    import io

    from .datagen import load_corpus
    from .model import BackboneConfig, ModelState, init_backbone
    from .seeding import derive_seed
    from .training import measure_conflict_reduction, pretrain_backbone

    cfg, root, out = _load(args)
    corpus = load_corpus(args.corpus or out / "train_corpus.txt")
    config = BackboneConfig(
        data_dim=cfg.corpus_dimension, hidden_dim=cfg.backbone_hidden_dim,
        num_blocks=cfg.backbone_blocks, cond_dim=cfg.corpus_embedding_dim,
        time_embed_dim=cfg.backbone_time_embed_dim,
    )
    state = ModelState(
        config=config, backbone=init_backbone(config, derive_seed(root, "backbone")),
        adapters=None, frozen=False,
    )
    # probe the same frozen base the train stage fine-tunes
    state = pretrain_backbone(
        state, corpus, cfg.train_pretrain_steps, cfg.train_batch_size,
        cfg.train_pretrain_lr, derive_seed(root, "pretrain"),
        cond_dropout=cfg.train_cond_dropout,
    )
    methods = ["label-tier", "embedding-kmeans", "random", "single"]
    parts = []
    kept = []
    for method in methods:
        experts = 1 if method == "single" else cfg.partition_experts
        try:
            parts.append(build_partition(corpus, method, experts, derive_seed(root, method)))
            kept.append(method)
        except ValueError:
            pass
    scores = measure_conflict_reduction(
        state, corpus, parts, probe_size=args.probe_size, seed=derive_seed(root, "conflict")
    )
    buf = io.StringIO()
    writer = _csv.writer(buf, lineterminator="\n")
    writer.writerow(["partition", "within_cluster_conflict", "pair_count"])
    for method, score in zip(kept, scores):
        writer.writerow([method, repr(score.overall), score.pair_count])
    (out / "conflict_comparison.csv").write_text(buf.getvalue())
    print(buf.getvalue().rstrip())
    return 0


def _cmd_compare(args) -> int:
    manifests = [RunManifest.load(p) for p in args.manifests]
    table = compare_runs(manifests)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.csv").write_text(table)
    print(table.rstrip())
    return 0


def _cmd_pipeline(args) -> int:
    cfg, root, out = _load(args)
    manifest = run_pipeline(cfg, out, seed=root)
    print(f"wrote {out / 'manifest.json'} (config {manifest.config_hash[:12]})")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="tailflow", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    sub = subs.add_parser("generate", help="generate train/test corpora")
    _add_common(sub)
    sub.set_defaults(fn=_cmd_generate)

    sub = subs.add_parser("partition", help="partition a corpus into expert clusters")
    _add_common(sub)
    sub.add_argument("--corpus", default=None)
    sub.set_defaults(fn=_cmd_partition)

    sub = subs.add_parser("train", help="pretrain the backbone and fine-tune adapters")
    _add_common(sub)
    sub.add_argument("--corpus", default=None)
    sub.add_argument("--partition", default=None)
    sub.set_defaults(fn=_cmd_train)

    sub = subs.add_parser("sample", help="generate vectors from a checkpoint")
    _add_common(sub)
    sub.add_argument("--corpus", default=None)
    sub.add_argument("--partition", default=None)
    sub.add_argument("--checkpoint", default=None)
    sub.set_defaults(fn=_cmd_sample)

    sub = subs.add_parser("evaluate", help="compute diversity/quality metrics")
    _add_common(sub)
    sub.add_argument("--generated", default=None)
    sub.add_argument("--train", default=None)
    sub.add_argument("--test", default=None)
    sub.set_defaults(fn=_cmd_evaluate)

    sub = subs.add_parser("analyze-conflicts", help="compare partitions by gradient conflict")
    _add_common(sub)
    sub.add_argument("--corpus", default=None)
    sub.add_argument("--probe-size", type=int, default=8)
    sub.set_defaults(fn=_cmd_analyze_conflicts)

    sub = subs.add_parser("compare", help="tabulate metrics across run manifests")
    sub.add_argument("manifests", nargs="+", help="manifest.json paths")
    sub.add_argument("--out", required=True)
    sub.set_defaults(fn=_cmd_compare)

    sub = subs.add_parser("pipeline", help="run all stages end to end")
    _add_common(sub)
    sub.set_defaults(fn=_cmd_pipeline)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - stage failures map to exit 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
