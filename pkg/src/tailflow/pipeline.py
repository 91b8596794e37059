"""End-to-end experiment pipeline and run comparison.

``run_pipeline`` executes datagen -> partition -> train -> sample ->
evaluate inside an output directory, records a manifest (config hash,
artifact paths and content hashes, wall-clock per stage), and is fully
reproducible from (config, root seed). Any stage failure raises
``StageError`` naming the stage; artifacts written so far are retained.

A pre-training phase inside the train stage fits the backbone itself
(unfrozen, no adapters) and then freezes it, standing in for the large
pre-trained model that fine-tuning starts from.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, class_specs_from_config
from .datagen import Corpus, generate_corpus, label_embedding, save_corpus
from .errors import SchemaMismatchError, StageError
from .metrics import evaluate, load_features, save_samples
from .model import (
    BackboneConfig,
    ModelState,
    init_adapters,
    init_backbone,
    sample_batch,
    save_checkpoint,
)
from .partition import (
    Partition,
    bisecting_kmeans_partition,
    class_to_expert,
    composition_report,
    label_tier_partition,
    random_partition,
    save_partition,
    single_partition,
)
from .seeding import derive_seed
from .training import ledger_json, pretrain_backbone, traces_csv, train

__all__ = [
    "RunManifest",
    "run_pipeline",
    "compare_runs",
    "build_partition",
    "ARTIFACTS",
]

MANIFEST_VERSION = 1

ARTIFACTS = {
    "datagen": ("train_corpus.txt", "test_corpus.txt"),
    "partition": ("partition.txt", "composition.json"),
    "train": ("checkpoint.npz", "ledger.json", "conflict_trace.csv"),
    "sample": ("generated.txt",),
    "evaluate": ("metrics.json", "metrics.csv"),
}


@dataclass
class RunManifest:
    config_hash: str
    root_seed: int
    stages: dict[str, dict] = field(default_factory=dict)
    out_dir: str = "."
    format_version: int = MANIFEST_VERSION

    def artifact(self, stage: str, name: str) -> Path:
        return Path(self.out_dir) / self.stages[stage]["artifacts"][name]

    def to_json(self) -> str:
        payload = {
            "format_version": self.format_version,
            "config_hash": self.config_hash,
            "root_seed": self.root_seed,
            "stages": self.stages,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        path = Path(path)
        payload = json.loads(path.read_text())
        if payload["format_version"] != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {payload['format_version']}")
        return cls(
            config_hash=payload["config_hash"],
            root_seed=payload["root_seed"],
            stages=payload["stages"],
            out_dir=str(path.parent),
        )


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def build_partition(corpus: Corpus, method: str, num_experts: int, seed: int) -> Partition:
    if method == "label-tier":
        return label_tier_partition(corpus, num_experts)
    if method == "embedding-kmeans":
        return bisecting_kmeans_partition(corpus, num_experts, seed=seed)
    if method == "random":
        return random_partition(corpus, num_experts, seed)
    if method == "single":
        return single_partition(corpus)
    raise ValueError(f"unknown partition method {method!r}")


def _finish_stage(manifest: RunManifest, out: Path, stage: str, started: float) -> None:
    names = ARTIFACTS[stage]
    manifest.stages[stage] = {
        "artifacts": {n: n for n in names},
        "sha256": {n: _sha256(out / n) for n in names},
        "seconds": time.perf_counter() - started,
    }


def run_pipeline(
    cfg: ExperimentConfig, out_dir: str | Path, seed: int | None = None
) -> RunManifest:
    """Run every stage under ``out_dir``; returns (and writes) the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = cfg.root_seed if seed is None else seed
    manifest = RunManifest(config_hash=cfg.hash(), root_seed=root, out_dir=str(out))

    def stage(name, fn):
        started = time.perf_counter()
        try:
            result = fn()
        except Exception as exc:
            raise StageError(name, str(exc)) from exc
        _finish_stage(manifest, out, name, started)
        return result

    # datagen: train and test corpora share the class profile, not draws
    def _datagen():
        train_specs = class_specs_from_config(cfg, cfg.corpus_size)
        test_specs = class_specs_from_config(cfg, cfg.corpus_test_size)
        train_corpus = generate_corpus(
            train_specs, cfg.corpus_dimension, derive_seed(root, "datagen-train"),
            cfg.corpus_embedding_dim, cfg.corpus_noise_scale,
        )
        test_corpus = generate_corpus(
            test_specs, cfg.corpus_dimension, derive_seed(root, "datagen-test"),
            cfg.corpus_embedding_dim, cfg.corpus_noise_scale,
        )
        save_corpus(train_corpus, out / "train_corpus.txt")
        save_corpus(test_corpus, out / "test_corpus.txt")
        return train_corpus, test_corpus

    train_corpus, test_corpus = stage("datagen", _datagen)

    def _partition():
        part = build_partition(
            train_corpus, cfg.partition_method, cfg.partition_experts,
            derive_seed(root, "partition"),
        )
        save_partition(part, out / "partition.txt")
        report = composition_report(part, train_corpus)
        (out / "composition.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
        return part

    part = stage("partition", _partition)

    def _train():
        config = BackboneConfig(
            data_dim=cfg.corpus_dimension,
            hidden_dim=cfg.backbone_hidden_dim,
            num_blocks=cfg.backbone_blocks,
            cond_dim=cfg.corpus_embedding_dim,
            time_embed_dim=cfg.backbone_time_embed_dim,
        )
        state = ModelState(
            config=config,
            backbone=init_backbone(config, derive_seed(root, "backbone")),
            adapters=None,
            frozen=False,
        )
        state = pretrain_backbone(
            state, train_corpus, cfg.train_pretrain_steps, cfg.train_batch_size,
            cfg.train_pretrain_lr, derive_seed(root, "pretrain"),
            cond_dropout=cfg.train_cond_dropout,
        )
        state.adapters = init_adapters(
            config, part.num_experts, cfg.adapter_dim, cfg.adapter_placement,
            cfg.adapter_nonlinearity, derive_seed(root, "adapters"),
        )
        trained, ledger, traces = train(
            state, train_corpus, part,
            steps=cfg.train_steps, batch_size=cfg.train_batch_size,
            resample=cfg.train_resample, lr=cfg.train_lr,
            seed=derive_seed(root, "train"), quota=cfg.train_quota,
            cond_dropout=cfg.train_cond_dropout, trace_interval=cfg.train_trace_interval,
        )
        save_checkpoint(trained, out / "checkpoint.npz")
        (out / "ledger.json").write_text(ledger_json(ledger))
        (out / "conflict_trace.csv").write_text(traces_csv(traces, part.num_experts))
        return trained

    trained = stage("train", _train)

    def _sample():
        experts = class_to_expert(part, train_corpus)
        vectors = []
        classes = []
        for spec in train_corpus.classes:
            cond = label_embedding(
                spec.class_id, train_corpus.num_classes, train_corpus.seed,
                train_corpus.embedding_dim,
            )
            xs = sample_batch(
                trained, cond, experts[spec.class_id], cfg.sample_guidance_scale,
                cfg.sample_steps, cfg.sample_per_class,
                derive_seed(root, "sample", spec.class_id),
            )
            vectors.append(xs)
            classes.extend([spec.class_id] * cfg.sample_per_class)
        save_samples(out / "generated.txt", np.vstack(vectors), np.array(classes))

    stage("sample", _sample)

    def _evaluate():
        generated = load_features(out / "generated.txt", tag="generated")
        train_feats = load_features(out / "train_corpus.txt", tag="train")
        test_feats = load_features(out / "test_corpus.txt", tag="test")
        report = evaluate(generated, train_feats, test_feats, k=cfg.metrics_k)
        (out / "metrics.json").write_text(report.to_json())
        (out / "metrics.csv").write_text(report.to_csv())

    stage("evaluate", _evaluate)

    manifest.save(out / "manifest.json")
    return manifest


def compare_runs(manifests: list[RunManifest], labels: list[str] | None = None) -> str:
    """One CSV row per run: aggregate and macro metrics plus utilization gap."""
    if len(manifests) < 2:
        raise ValueError("need at least two manifests to compare")
    rows = []
    schema = None
    for idx, man in enumerate(manifests):
        metrics = json.loads(man.artifact("evaluate", "metrics.json").read_text())
        ledger = json.loads(man.artifact("train", "ledger.json").read_text())
        key = (metrics["format_version"], metrics["k"])
        if schema is None:
            schema = key
        elif key != schema:
            raise SchemaMismatchError(f"metric schema {key} differs from {schema}")
        label = labels[idx] if labels else Path(man.out_dir).name
        rows.append(
            [
                label,
                metrics["coverage"],
                metrics["irs_adjusted"],
                metrics["frechet"],
                metrics["macro"]["coverage"],
                metrics["macro"]["irs_adjusted"],
                metrics["macro"]["frechet"],
                ledger["gap"],
            ]
        )
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        [
            "run",
            "coverage",
            "irs_adjusted",
            "frechet",
            "macro_coverage",
            "macro_irs_adjusted",
            "macro_frechet",
            "utilization_gap",
        ]
    )
    for row in rows:
        writer.writerow(["" if v is None else v for v in row])
    return buf.getvalue()
