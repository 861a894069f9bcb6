"""Pipeline command line: prepare, train stages in order, generate, report.

A run lives in one directory (runs/<name>/) holding corpora, checkpoints,
predictions, reports, and a manifest. The manifest enforces the stage
order: the generator first, then per style the denoiser, ranking triples,
the scorer, templates, the rewriter, and finally classifier plus policy
training. Every stage reads its inputs from disk, so runs resume cleanly
and identical config plus seed reproduces identical bytes.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence, TextIO

import torch

from .config import (
    ConfigError,
    PipelineConfig,
    config_hash,
    derive_seed,
    load_config,
)
from .corpus import (
    CorpusError,
    CorpusSplit,
    DialogueExample,
    StyleSentence,
    Vocabulary,
    build_vocab,
    detokenize,
    generator_source,
    load_dialogue_corpus,
    load_style_corpus,
    select_knowledge_top1,
    synth_corpus,
    tokenize,
    write_dialogue_jsonl,
    write_style_jsonl,
)
from .disentangler import (
    RankTriple,
    TemplatePair,
    build_ranking_triples,
    build_template_corpus,
    extract_template,
    leave_one_out_distances,
    load_disentangler,
    save_disentangler,
    score_sentences_alpha,
    score_tokens,
    train_dae,
    train_disentangler_ws,
)
from .metrics import EvalReport, evaluate_run, inner_distinct_n, unigram_f1
from .rewards import (
    EmbeddingTable,
    load_classifier,
    save_classifier,
    train_style_classifier,
)
from .rewriter import rewrite, train_rewriter
from .rl import train_rl
from .seq2seq import (
    CheckpointError,
    Seq2SeqModel,
    beam_decode,
    load_checkpoint,
    save_checkpoint,
    train_seq2seq,
)

logger = logging.getLogger(__name__)

STAGES = (
    "train-generator",
    "train-dae",
    "build-triples",
    "train-disentangler",
    "build-templates",
    "train-rewriter",
    "train-rl",
)

MANIFEST_FORMAT = 1


class ManifestError(Exception):
    """Stage ordering violated or the run directory belongs to another config."""


class LockError(Exception):
    """Another pipeline process owns the run directory."""


def _pin_threads() -> None:
    # Single-threaded math keeps runs bit-reproducible across invocations.
    torch.set_num_threads(1)


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunPaths:
    """All file locations inside one run directory."""

    root: Path

    def __post_init__(self) -> None:
        self.root = Path(self.root)

    @property
    def corpora(self) -> Path:
        return self.root / "corpora"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def predictions(self) -> Path:
        return self.root / "predictions"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    @property
    def lock(self) -> Path:
        return self.root / ".lock"

    def ensure(self) -> None:
        for sub in (self.corpora, self.checkpoints, self.predictions, self.reports):
            sub.mkdir(parents=True, exist_ok=True)

    def dialogues_file(self) -> Path:
        return self.corpora / "dialogues.jsonl"

    def style_file(self, style: str) -> Path:
        return self.corpora / f"style_{style}.jsonl"

    def vocab_file(self) -> Path:
        return self.corpora / "vocab.json"

    def splits_file(self) -> Path:
        return self.corpora / "splits.json"

    def gold_file(self) -> Path:
        return self.corpora / "gold.json"

    def triples_file(self, style: str) -> Path:
        return self.corpora / f"triples_{style}.json"

    def templates_file(self, style: str) -> Path:
        return self.corpora / f"templates_{style}.jsonl"

    def generator_ckpt(self) -> Path:
        return self.checkpoints / "generator.pt"

    def dae_ckpt(self, style: str) -> Path:
        return self.checkpoints / f"dae_{style}.pt"

    def ws_ckpt(self, style: str) -> Path:
        return self.checkpoints / f"disentangler_ws_{style}.pt"

    def rl_ckpt(self, style: str) -> Path:
        return self.checkpoints / f"disentangler_rl_{style}.pt"

    def rewriter_ckpt(self, style: str) -> Path:
        return self.checkpoints / f"rewriter_{style}.pt"

    def classifier_ckpt(self, style: str) -> Path:
        return self.checkpoints / f"classifier_{style}.pt"

    def predictions_file(self, style: str, split: str) -> Path:
        return self.predictions / f"{style}_{split}.jsonl"

    def rl_log(self, style: str) -> Path:
        return self.reports / f"rl_log_{style}.jsonl"


class RunManifest:
    """Stage ledger for one run directory."""

    def __init__(self, config_digest: str, seed: int, stages: dict | None = None) -> None:
        self.config_digest = config_digest
        self.seed = seed
        self.stages: dict[str, dict] = stages or {}

    def to_dict(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "config_hash": self.config_digest,
            "seed": self.seed,
            "stages": self.stages,
        }

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        data = json.loads(path.read_text(encoding="utf-8"))
        if data.get("format") != MANIFEST_FORMAT:
            raise ManifestError(f"{path}: unsupported manifest format {data.get('format')}")
        return cls(data["config_hash"], data["seed"], data.get("stages", {}))

    def complete(self, stage: str) -> bool:
        return stage in self.stages and "completed_at" in self.stages[stage]

    def require_predecessors(self, stage: str, force: bool = False) -> None:
        missing = [s for s in STAGES[: STAGES.index(stage)] if not self.complete(s)]
        if missing:
            if force:
                logger.warning("running %s despite missing stages %s (--force)", stage, missing)
            else:
                raise ManifestError(
                    f"stage {stage} requires completed stage {missing[0]} "
                    f"(missing: {', '.join(missing)})"
                )

    def record(self, stage: str, started_at: str, duration_s: float, artifacts: list[str]) -> None:
        self.stages[stage] = {
            "started_at": started_at,
            "completed_at": _utc_now(),
            "duration_s": round(duration_s, 3),
            "artifacts": sorted(artifacts),
        }


def _load_or_create_manifest(paths: RunPaths, cfg: PipelineConfig, force: bool) -> RunManifest:
    digest = config_hash(cfg)
    if paths.manifest.exists():
        manifest = RunManifest.load(paths.manifest)
        if manifest.config_digest != digest:
            if not force:
                raise ManifestError(
                    f"{paths.root} was created with a different config "
                    f"({manifest.config_digest[:12]} != {digest[:12]}); "
                    "use a fresh run_dir or --force"
                )
            logger.warning("config hash changed for %s, overwriting manifest (--force)", paths.root)
            manifest = RunManifest(digest, cfg.seed)
        return manifest
    return RunManifest(digest, cfg.seed)


@contextmanager
def _run_lock(paths: RunPaths, force: bool):
    paths.root.mkdir(parents=True, exist_ok=True)
    if paths.lock.exists() and force:
        logger.warning("removing existing lock %s (--force)", paths.lock)
        paths.lock.unlink()
    try:
        fd = os.open(paths.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(
            f"run directory {paths.root} is locked by another pipeline process "
            f"({paths.lock}); remove the lock or pass --force"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        paths.lock.unlink(missing_ok=True)


@dataclass
class PreparedWorld:
    """Corpora and splits read back from a prepared run directory."""

    vocab: Vocabulary
    dialogues: CorpusSplit
    by_id: dict[str, DialogueExample]
    style_pipeline: dict[str, list[StyleSentence]]
    style_eval: dict[str, list[StyleSentence]]
    dae_half: dict[str, list[StyleSentence]]
    rank_half: dict[str, list[StyleSentence]]

    def split(self, name: str) -> list[DialogueExample]:
        if name not in ("train", "valid", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self.dialogues, name)

    @property
    def references(self) -> dict[str, list[str]]:
        return {ex_id: ex.response for ex_id, ex in self.by_id.items()}


def cmd_prepare(cfg: PipelineConfig) -> RunPaths:
    """Materialize corpora, vocabulary, and splits in the run directory.

    Re-running with the same config and seed rewrites identical bytes.
    """
    _pin_threads()
    paths = RunPaths(Path(cfg.run_dir))
    paths.ensure()
    if paths.manifest.exists():
        existing = RunManifest.load(paths.manifest)
        if existing.config_digest != config_hash(cfg):
            raise ManifestError(
                f"{paths.root} holds a run with a different config; use a fresh run_dir"
            )

    if cfg.corpus.synthetic:
        synth = synth_corpus(
            derive_seed(cfg.seed, "synth"),
            n_dialogues=cfg.corpus.n_dialogues,
            n_style=cfg.corpus.n_style,
            styles=cfg.styles,
        )
        dialogues = synth.dialogues
        if cfg.corpus.select_top1:
            dialogues = [
                replace(ex, knowledge=[ex.knowledge[select_knowledge_top1(ex.knowledge, ex.response)]])
                for ex in dialogues
            ]
        style_corpora = synth.styles
        paths.gold_file().write_text(
            json.dumps(synth.gold, indent=2, sort_keys=True), encoding="utf-8"
        )
    else:
        dialogues = load_dialogue_corpus(cfg.corpus.dialogue_path, select_top1=cfg.corpus.select_top1)
        style_corpora = {}
        for style in cfg.styles:
            style_corpora[style] = load_style_corpus(
                cfg.corpus.style_paths[style], allowed_styles=(style,)
            )

    write_dialogue_jsonl(dialogues, paths.dialogues_file())
    for style in cfg.styles:
        write_style_jsonl(style_corpora[style], paths.style_file(style))

    texts = [ex.response for ex in dialogues]
    for ex in dialogues:
        texts.extend(ex.context)
        texts.extend(ex.knowledge)
    for sents in style_corpora.values():
        texts.extend(s.tokens for s in sents)
    vocab = build_vocab(texts, min_count=cfg.corpus.min_count)
    vocab.save(paths.vocab_file())

    from .corpus import split_examples, split_style_corpus

    dialogue_split = split_examples(dialogues, derive_seed(cfg.seed, "split-dialogue"))
    splits: dict = {
        "dialogue": {
            "train": [ex.id for ex in dialogue_split.train],
            "valid": [ex.id for ex in dialogue_split.valid],
            "test": [ex.id for ex in dialogue_split.test],
        },
        "style": {},
    }
    for style in cfg.styles:
        sents = style_corpora[style]
        eval_split = split_examples(
            sents, derive_seed(cfg.seed, "split-style", style), train=0.9, valid=0.05
        )
        pipeline_sents = eval_split.train
        held_out = eval_split.valid + eval_split.test
        dae_half, rank_half = split_style_corpus(
            pipeline_sents, derive_seed(cfg.seed, "halves", style)
        )
        splits["style"][style] = {
            "pipeline": [s.id for s in pipeline_sents],
            "eval": [s.id for s in held_out],
            "dae_half": [s.id for s in dae_half],
            "rank_half": [s.id for s in rank_half],
        }
    paths.splits_file().write_text(
        json.dumps(splits, indent=2, sort_keys=True), encoding="utf-8"
    )

    manifest = _load_or_create_manifest(paths, cfg, force=False)
    manifest.save(paths.manifest)
    logger.info("prepared run directory %s", paths.root)
    return paths


def load_world(cfg: PipelineConfig) -> PreparedWorld:
    """Read the prepared corpora and splits back from the run directory."""
    paths = RunPaths(Path(cfg.run_dir))
    for required in (paths.dialogues_file(), paths.vocab_file(), paths.splits_file()):
        if not required.exists():
            raise CorpusError(f"run not prepared: missing {required}; run prepare first")
    vocab = Vocabulary.load(paths.vocab_file())
    dialogues = load_dialogue_corpus(paths.dialogues_file())
    by_id = {ex.id: ex for ex in dialogues}
    splits = json.loads(paths.splits_file().read_text(encoding="utf-8"))
    dialogue_split = CorpusSplit(
        train=[by_id[i] for i in splits["dialogue"]["train"]],
        valid=[by_id[i] for i in splits["dialogue"]["valid"]],
        test=[by_id[i] for i in splits["dialogue"]["test"]],
    )
    style_pipeline: dict[str, list[StyleSentence]] = {}
    style_eval: dict[str, list[StyleSentence]] = {}
    dae_half: dict[str, list[StyleSentence]] = {}
    rank_half: dict[str, list[StyleSentence]] = {}
    for style in cfg.styles:
        sents = load_style_corpus(paths.style_file(style), allowed_styles=(style,))
        sent_by_id = {s.id: s for s in sents}
        entry = splits["style"][style]
        style_pipeline[style] = [sent_by_id[i] for i in entry["pipeline"]]
        style_eval[style] = [sent_by_id[i] for i in entry["eval"]]
        dae_half[style] = [sent_by_id[i] for i in entry["dae_half"]]
        rank_half[style] = [sent_by_id[i] for i in entry["rank_half"]]
    return PreparedWorld(
        vocab=vocab,
        dialogues=dialogue_split,
        by_id=by_id,
        style_pipeline=style_pipeline,
        style_eval=style_eval,
        dae_half=dae_half,
        rank_half=rank_half,
    )


def embedding_table(cfg: PipelineConfig, paths: RunPaths, vocab: Vocabulary, style: str) -> EmbeddingTable:
    """Resolve the word-vector table for reconstruction distances and rewards.

    An external word2vec file wins when configured; otherwise the style
    denoiser's learned input embeddings serve as the table.
    """
    if cfg.embeddings_path is not None:
        return EmbeddingTable.from_word2vec(cfg.embeddings_path)
    dae = load_checkpoint(paths.dae_ckpt(style), kind="seq2seq", expect_vocab_size=len(vocab))
    return EmbeddingTable.from_model(dae, vocab)


def _stage_train_generator(cfg: PipelineConfig, paths: RunPaths, world: PreparedWorld, force: bool) -> list[str]:
    pairs = [
        (generator_source(ex.context, ex.knowledge), ex.response)
        for ex in world.dialogues.train
    ]
    val_pairs = [
        (generator_source(ex.context, ex.knowledge), ex.response)
        for ex in world.dialogues.valid
    ]
    model = train_seq2seq(
        pairs,
        cfg.generator.model.build(len(world.vocab)),
        cfg.generator.train.build(derive_seed(cfg.seed, "train-generator")),
        world.vocab,
        val_pairs=val_pairs or None,
    )
    save_checkpoint(model, paths.generator_ckpt(), kind="seq2seq", meta={"role": "generator"})
    return [str(paths.generator_ckpt())]


def _stage_train_dae(cfg: PipelineConfig, paths: RunPaths, world: PreparedWorld, force: bool) -> list[str]:
    artifacts = []
    for style in cfg.styles:
        model = train_dae(
            world.dae_half[style],
            cfg.dae.model.build(len(world.vocab)),
            cfg.dae.train.build(derive_seed(cfg.seed, "train-dae", style)),
            world.vocab,
        )
        save_checkpoint(
            model, paths.dae_ckpt(style), kind="seq2seq", meta={"role": "dae", "style": style}
        )
        artifacts.append(str(paths.dae_ckpt(style)))
    return artifacts


def _stage_build_triples(cfg: PipelineConfig, paths: RunPaths, world: PreparedWorld, force: bool) -> list[str]:
    artifacts = []
    for style in cfg.styles:
        dae = load_checkpoint(paths.dae_ckpt(style), kind="seq2seq", expect_vocab_size=len(world.vocab))
        table = embedding_table(cfg, paths, world.vocab, style)
        distances = {
            sent.id: leave_one_out_distances(dae, sent.tokens, table)
            for sent in world.rank_half[style]
        }
        triples = build_ranking_triples(
            world.rank_half[style],
            distances,
            z=cfg.z,
            seed=derive_seed(cfg.seed, "triples", style),
        )
        payload = {
            "style": style,
            "distances": distances,
            "triples": [
                {"sentence_id": t.sentence_id, "i": t.i, "j": t.j, "y": t.y} for t in triples
            ],
        }
        paths.triples_file(style).write_text(
            json.dumps(payload, sort_keys=True), encoding="utf-8"
        )
        artifacts.append(str(paths.triples_file(style)))
    return artifacts


def _stage_train_disentangler(cfg: PipelineConfig, paths: RunPaths, world: PreparedWorld, force: bool) -> list[str]:
    artifacts = []
    for style in cfg.styles:
        payload = json.loads(paths.triples_file(style).read_text(encoding="utf-8"))
        triples = [
            RankTriple(row["sentence_id"], row["i"], row["j"], row["y"])
            for row in payload["triples"]
        ]
        sentences = {s.id: s.tokens for s in world.rank_half[style]}
        model = train_disentangler_ws(
            triples,
            sentences,
            cfg.disentangler.model.build(len(world.vocab)),
            cfg.disentangler.train.build(derive_seed(cfg.seed, "train-disentangler", style)),
            world.vocab,
            mu=cfg.mu,
            grounded_cfg=cfg.grounded.build(len(world.vocab)),
        )
        save_disentangler(model, paths.ws_ckpt(style), meta={"style": style, "stage": "ws"})
        artifacts.append(str(paths.ws_ckpt(style)))
    return artifacts


def _stage_build_templates(cfg: PipelineConfig, paths: RunPaths, world: PreparedWorld, force: bool) -> list[str]:
    artifacts = []
    for style in cfg.styles:
        model = load_disentangler(paths.ws_ckpt(style), expect_vocab_size=len(world.vocab))
        pairs = build_template_corpus(model, world.style_pipeline[style], pr=cfg.pr)
        with open(paths.templates_file(style), "w", encoding="utf-8") as handle:
            for pair in pairs:
                handle.write(
                    json.dumps(
                        {
                            "id": pair.id,
                            "template": pair.template,
                            "target": pair.target,
                            "actions": pair.actions,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
        artifacts.append(str(paths.templates_file(style)))
    return artifacts


def _stage_train_rewriter(cfg: PipelineConfig, paths: RunPaths, world: PreparedWorld, force: bool) -> list[str]:
    artifacts = []
    for style in cfg.styles:
        pairs = []
        with open(paths.templates_file(style), encoding="utf-8") as handle:
            for line in handle:
                row = json.loads(line)
                pairs.append(
                    TemplatePair(
                        id=row["id"],
                        template=row["template"],
                        target=row["target"],
                        actions=row["actions"],
                    )
                )
        model = train_rewriter(
            pairs,
            cfg.rewriter.model.build(len(world.vocab)),
            cfg.rewriter.train.build(derive_seed(cfg.seed, "train-rewriter", style)),
            world.vocab,
        )
        save_checkpoint(
            model, paths.rewriter_ckpt(style), kind="seq2seq", meta={"role": "rewriter", "style": style}
        )
        artifacts.append(str(paths.rewriter_ckpt(style)))
    return artifacts


def _stage_train_rl(cfg: PipelineConfig, paths: RunPaths, world: PreparedWorld, force: bool) -> list[str]:
    artifacts = []
    for style in cfg.styles:
        classifier = train_style_classifier(
            [s.tokens for s in world.style_pipeline[style]],
            [ex.response for ex in world.dialogues.train],
            cfg.classifier.model.build(len(world.vocab)),
            cfg.classifier.train.build(derive_seed(cfg.seed, "classifier", style)),
            world.vocab,
        )
        accuracy = classifier.held_out_accuracy
        if accuracy is not None and accuracy < cfg.classifier_min_accuracy:
            message = (
                f"style classifier for {style!r} reached held-out accuracy "
                f"{accuracy:.3f} < {cfg.classifier_min_accuracy}; refusing to use it as a reward"
            )
            if not force:
                raise RuntimeError(message + " (pass --force to override)")
            logger.warning("%s (--force given, continuing)", message)
        save_classifier(classifier, paths.classifier_ckpt(style), meta={"style": style})
        artifacts.append(str(paths.classifier_ckpt(style)))

        disentangler = load_disentangler(paths.ws_ckpt(style), expect_vocab_size=len(world.vocab))
        generator = load_checkpoint(paths.generator_ckpt(), kind="seq2seq", expect_vocab_size=len(world.vocab))
        rewriter_model = load_checkpoint(
            paths.rewriter_ckpt(style), kind="seq2seq", expect_vocab_size=len(world.vocab)
        )
        table = embedding_table(cfg, paths, world.vocab, style)
        pool = world.dialogues.train[: cfg.rl.max_examples]
        report = train_rl(
            disentangler,
            rewriter_model,
            generator,
            pool,
            table,
            classifier,
            cfg.rl.build(cfg.beam),
            pr=cfg.pr,
            seed=derive_seed(cfg.seed, "rl", style),
            val_fraction=cfg.rl.val_fraction,
            dump_path=paths.reports / f"rl_diverged_{style}.jsonl",
        )
        report.dump_jsonl(paths.rl_log(style))
        save_disentangler(model=disentangler, path=paths.rl_ckpt(style), meta={"style": style, "stage": "rl"})
        artifacts.append(str(paths.rl_ckpt(style)))
        artifacts.append(str(paths.rl_log(style)))
    return artifacts


_STAGE_FUNCS = {
    "train-generator": _stage_train_generator,
    "train-dae": _stage_train_dae,
    "build-triples": _stage_build_triples,
    "train-disentangler": _stage_train_disentangler,
    "build-templates": _stage_build_templates,
    "train-rewriter": _stage_train_rewriter,
    "train-rl": _stage_train_rl,
}


def cmd_pipeline(
    cfg: PipelineConfig, stages: Sequence[str] | None = None, force: bool = False
) -> RunManifest:
    """Run pipeline stages in order, resuming past completed ones.

    Args:
        cfg: run configuration.
        stages: subset to run; None runs everything not yet complete.
        force: override stage-order checks, the config-hash guard, the
            classifier accuracy gate, and a stale lock.

    Returns:
        The updated manifest.
    """
    _pin_threads()
    if stages is not None:
        unknown = sorted(set(stages) - set(STAGES))
        if unknown:
            raise ConfigError(f"unknown stages {unknown}; valid: {', '.join(STAGES)}")
    paths = RunPaths(Path(cfg.run_dir))
    explicit = stages is not None
    requested = [s for s in STAGES if stages is None or s in stages]
    with _run_lock(paths, force):
        paths.ensure()
        if not paths.vocab_file().exists():
            cmd_prepare(cfg)
        manifest = _load_or_create_manifest(paths, cfg, force)
        world = load_world(cfg)
        for stage in requested:
            if manifest.complete(stage) and not explicit:
                logger.info("stage %s already complete, skipping", stage)
                continue
            manifest.require_predecessors(stage, force)
            started_at = _utc_now()
            t0 = time.perf_counter()
            logger.info("running stage %s", stage)
            artifacts = _STAGE_FUNCS[stage](cfg, paths, world, force)
            manifest.record(stage, started_at, time.perf_counter() - t0, artifacts)
            manifest.save(paths.manifest)
    return manifest


def _load_scorer(paths: RunPaths, style: str, vocab_size: int):
    """Prefer the policy-tuned scorer, falling back to the weak-supervised one."""
    if paths.rl_ckpt(style).exists():
        return load_disentangler(paths.rl_ckpt(style), expect_vocab_size=vocab_size)
    return load_disentangler(paths.ws_ckpt(style), expect_vocab_size=vocab_size)


def cmd_generate(cfg: PipelineConfig, style: str, split: str = "test") -> Path:
    """Run the full pipeline on one split and write predictions JSONL.

    Each line records the four pipeline artifacts per example: the raw
    generator draft, its token scores, the blanked template, and the
    styled rewrite.
    """
    _pin_threads()
    if style not in cfg.styles:
        raise ConfigError(f"unknown style {style!r}; configured: {cfg.styles}")
    paths = RunPaths(Path(cfg.run_dir))
    world = load_world(cfg)
    generator = load_checkpoint(paths.generator_ckpt(), kind="seq2seq", expect_vocab_size=len(world.vocab))
    scorer = _load_scorer(paths, style, len(world.vocab))
    rewriter_model = load_checkpoint(
        paths.rewriter_ckpt(style), kind="seq2seq", expect_vocab_size=len(world.vocab)
    )
    rows = []
    for ex in world.split(split):
        draft = beam_decode(generator, generator_source(ex.context, ex.knowledge), beam=cfg.beam)
        if draft.tokens:
            scored = score_tokens(scorer, draft.tokens, ex.context, ex.knowledge)
            template = extract_template(scored.tokens, scored.scores, cfg.pr)
            styled = rewrite(rewriter_model, template.surface, beam=cfg.beam)
            scores = scored.scores
            surface = template.surface
            styled_tokens = styled.tokens
            logprob = styled.logprob
        else:
            logger.warning("empty draft for %s, recording empty outputs", ex.id)
            scores, surface, styled_tokens, logprob = [], [], [], 0.0
        rows.append(
            {
                "id": ex.id,
                "style": style,
                "split": split,
                "generator_response": draft.tokens,
                "scores": scores,
                "template": surface,
                "styled_response": styled_tokens,
                "logprob": logprob,
                "reference": ex.response,
            }
        )
    out_path = paths.predictions_file(style, split)
    with open(out_path, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, sort_keys=True) + "\n")
    logger.info("wrote %d predictions to %s", len(rows), out_path)
    return out_path


def cmd_evaluate(
    cfg: PipelineConfig,
    style: str | None = None,
    split: str = "test",
    predictions: str | Path | None = None,
) -> EvalReport:
    """Score predictions against references and write a report.

    With no style, all configured styles' prediction files for the split
    are pooled, which also enables the per-context diversity numbers.
    """
    _pin_threads()
    paths = RunPaths(Path(cfg.run_dir))
    world = load_world(cfg)
    rows: list[dict] = []
    if predictions is not None:
        files = [Path(predictions)]
    else:
        styles = cfg.styles if style is None else [style]
        files = [paths.predictions_file(s, split) for s in styles]
    for file in files:
        if not file.exists():
            raise CorpusError(f"predictions not found: {file}; run generate first")
        with open(file, encoding="utf-8") as handle:
            rows.extend(json.loads(line) for line in handle if line.strip())

    classifiers = {}
    for s in cfg.styles:
        if paths.classifier_ckpt(s).exists():
            classifiers[s] = load_classifier(paths.classifier_ckpt(s), expect_vocab_size=len(world.vocab))
    table = None
    if cfg.embeddings_path is not None:
        table = EmbeddingTable.from_word2vec(cfg.embeddings_path)
    elif style is not None and paths.dae_ckpt(style).exists():
        table = embedding_table(cfg, paths, world.vocab, style)

    report = evaluate_run(rows, world.references, classifiers or None, table)
    name = style if style is not None else "all"
    out_path = paths.reports / f"eval_{name}_{split}.json"
    out_path.write_text(report.to_json(), encoding="utf-8")
    logger.info("wrote report to %s", out_path)
    return report


def cmd_sweep_pr(cfg: PipelineConfig, values: Sequence[float]) -> dict:
    """Re-extract templates and rewrite at several replacement rates.

    Reports token F1 against references and per-context diversity of the
    styled outputs at each rate, over the test split and all styles.
    """
    _pin_threads()
    if not values:
        raise ConfigError("sweep-pr: no values given")
    for value in values:
        if not 0.0 < value < 100.0:
            raise ConfigError(f"sweep-pr: replacement rate must be in (0, 100), got {value}")
    values = sorted(set(values))
    paths = RunPaths(Path(cfg.run_dir))
    world = load_world(cfg)
    generator = load_checkpoint(paths.generator_ckpt(), kind="seq2seq", expect_vocab_size=len(world.vocab))
    scorers = {s: _load_scorer(paths, s, len(world.vocab)) for s in cfg.styles}
    rewriters = {
        s: load_checkpoint(paths.rewriter_ckpt(s), kind="seq2seq", expect_vocab_size=len(world.vocab))
        for s in cfg.styles
    }
    examples = world.split("test")
    drafts: dict[str, list[str]] = {}
    scores: dict[str, dict[str, list[float]]] = {s: {} for s in cfg.styles}
    for ex in examples:
        draft = beam_decode(generator, generator_source(ex.context, ex.knowledge), beam=cfg.beam)
        if not draft.tokens:
            continue
        max_len = min(scorers[s].cfg.max_len for s in cfg.styles)
        drafts[ex.id] = draft.tokens[:max_len]
        for s in cfg.styles:
            scores[s][ex.id] = score_tokens(
                scorers[s], drafts[ex.id], ex.context, ex.knowledge
            ).scores

    rows = []
    for pr in values:
        f1s: list[float] = []
        groups: list[list[list[str]]] = []
        for ex in examples:
            if ex.id not in drafts:
                continue
            outputs = []
            for s in cfg.styles:
                template = extract_template(drafts[ex.id], scores[s][ex.id], pr)
                styled = rewrite(rewriters[s], template.surface, beam=cfg.beam)
                outputs.append(styled.tokens)
                f1s.append(unigram_f1(styled.tokens, ex.response))
            # The pooled diversity metric is defined over exactly one
            # response per style for the standard three styles.
            if len(outputs) == 3:
                groups.append(outputs)
        row = {
            "pr": pr,
            "f1": sum(f1s) / len(f1s) if f1s else 0.0,
            "inner_distinct1": inner_distinct_n(groups, 1) if groups else None,
            "inner_distinct2": inner_distinct_n(groups, 2) if groups else None,
            "n_examples": len(groups),
        }
        rows.append(row)
        logger.info(
            "pr=%g f1=%.4f inner-distinct1=%s", pr, row["f1"], row["inner_distinct1"]
        )
    report = {"split": "test", "styles": list(cfg.styles), "rows": rows}
    out_path = paths.reports / "sweep_pr.json"
    out_path.write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    return report


def cmd_style_tokens(cfg: PipelineConfig, style: str, top: int = 20) -> list[dict]:
    """Report the tokens the scorer considers most style-bearing.

    Scores every pipeline sentence of the style with the response-only
    head and averages per token type.
    """
    _pin_threads()
    if style not in cfg.styles:
        raise ConfigError(f"unknown style {style!r}; configured: {cfg.styles}")
    paths = RunPaths(Path(cfg.run_dir))
    world = load_world(cfg)
    scorer = _load_scorer(paths, style, len(world.vocab))
    sentences = world.style_pipeline[style]
    all_scores = score_sentences_alpha(scorer, [s.tokens for s in sentences])
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for sent, sent_scores in zip(sentences, all_scores):
        for token, value in zip(sent.tokens, sent_scores):
            sums[token] = sums.get(token, 0.0) + value
            counts[token] = counts.get(token, 0) + 1
    ranked = sorted(
        ({"token": t, "mean_score": sums[t] / counts[t], "count": counts[t]} for t in sums),
        key=lambda row: (-row["mean_score"], row["token"]),
    )[:top]
    out_path = paths.reports / f"style_tokens_{style}.json"
    out_path.write_text(json.dumps(ranked, indent=2, sort_keys=True), encoding="utf-8")
    return ranked


def cmd_chat(
    cfg: PipelineConfig,
    style: str,
    stdin: TextIO | None = None,
    stdout: TextIO | None = None,
) -> int:
    """Interactive demo: knowledge line first, then user turns.

    Commands: /style <name> switches rewriters, /knowledge <text> replaces
    the knowledge sentence, /quit leaves. Empty input re-prompts. EOF exits.
    """
    _pin_threads()
    stdin = sys.stdin if stdin is None else stdin
    stdout = sys.stdout if stdout is None else stdout
    if style not in cfg.styles:
        raise ConfigError(f"unknown style {style!r}; configured: {cfg.styles}")
    paths = RunPaths(Path(cfg.run_dir))
    world = load_world(cfg)
    generator = load_checkpoint(paths.generator_ckpt(), kind="seq2seq", expect_vocab_size=len(world.vocab))
    scorer = _load_scorer(paths, style, len(world.vocab))
    rewriter_model = load_checkpoint(
        paths.rewriter_ckpt(style), kind="seq2seq", expect_vocab_size=len(world.vocab)
    )

    def say(text: str) -> None:
        stdout.write(text + "\n")
        stdout.flush()

    def read(prompt: str) -> str | None:
        stdout.write(prompt)
        stdout.flush()
        line = stdin.readline()
        return None if line == "" else line.strip()

    knowledge: list[list[str]] = []
    while not knowledge:
        line = read("knowledge> ")
        if line is None:
            say("bye")
            return 0
        if line:
            knowledge = [tokenize(line)]
    context: list[list[str]] = []
    while True:
        line = read(f"[{style}] you> ")
        if line is None or line == "/quit":
            say("bye")
            return 0
        if not line:
            continue
        if line.startswith("/style"):
            parts = line.split(maxsplit=1)
            if len(parts) != 2 or parts[1] not in cfg.styles:
                say(f"usage: /style <{'|'.join(cfg.styles)}>")
                continue
            style = parts[1]
            scorer = _load_scorer(paths, style, len(world.vocab))
            rewriter_model = load_checkpoint(
                paths.rewriter_ckpt(style), kind="seq2seq", expect_vocab_size=len(world.vocab)
            )
            say(f"style set to {style}")
            continue
        if line.startswith("/knowledge"):
            parts = line.split(maxsplit=1)
            if len(parts) != 2:
                say("usage: /knowledge <text>")
                continue
            knowledge = [tokenize(parts[1])]
            say("knowledge updated")
            continue
        context.append(tokenize(line))
        context = context[-2:]
        draft = beam_decode(generator, generator_source(context, knowledge), beam=cfg.beam)
        if not draft.tokens:
            say("draft: (empty)")
            continue
        scored = score_tokens(scorer, draft.tokens, context, knowledge)
        template = extract_template(scored.tokens, scored.scores, cfg.pr)
        styled = rewrite(rewriter_model, template.surface, beam=cfg.beam)
        say(f"draft:    {detokenize(draft.tokens)}")
        say(f"template: {detokenize(template.surface)}")
        say(f"styled:   {detokenize(styled.tokens)}")
        context.append(styled.tokens)
        context = context[-2:]


class _UsageError(Exception):
    """Command-line arguments failed validation."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="dtr", description=__doc__)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="override the global seed")
    parser.add_argument("--run-dir", help="override the run directory")
    parser.add_argument("--force", action="store_true", help="override safety checks")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("prepare", help="materialize corpora, vocab, and splits")
    pipe = sub.add_parser("pipeline", help="run training stages in order")
    pipe.add_argument("--stage", action="append", help="run only this stage (repeatable)")
    gen = sub.add_parser("generate", help="write predictions for one style")
    gen.add_argument("--style", required=True)
    gen.add_argument("--split", default="test", choices=("train", "valid", "test"))
    ev = sub.add_parser("evaluate", help="score predictions against references")
    ev.add_argument("--style", default=None)
    ev.add_argument("--split", default="test", choices=("train", "valid", "test"))
    ev.add_argument("--predictions", default=None, help="explicit predictions file")
    sweep = sub.add_parser("sweep-pr", help="replacement-rate sweep report")
    sweep.add_argument(
        "--pr", action="append", type=float, help="replacement percentage (repeatable)"
    )
    toks = sub.add_parser("style-tokens", help="most style-bearing tokens per the scorer")
    toks.add_argument("--style", required=True)
    toks.add_argument("--top", type=int, default=20)
    chat = sub.add_parser("chat", help="interactive rewriting demo")
    chat.add_argument("--style", required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Entry point. Returns 0 on success, 1 on bad input, 2 on runtime failure."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        overrides = {"seed": args.seed, "run_dir": args.run_dir}
        cfg = load_config(args.config, overrides=overrides)
        if args.command == "prepare":
            cmd_prepare(cfg)
        elif args.command == "pipeline":
            cmd_pipeline(cfg, stages=args.stage, force=args.force)
        elif args.command == "generate":
            cmd_generate(cfg, style=args.style, split=args.split)
        elif args.command == "evaluate":
            report = cmd_evaluate(
                cfg, style=args.style, split=args.split, predictions=args.predictions
            )
            print(report.table())
        elif args.command == "sweep-pr":
            report = cmd_sweep_pr(cfg, values=args.pr or [10.0, 25.0, 40.0, 60.0, 80.0])
            for row in report["rows"]:
                print(
                    f"pr={row['pr']:>5.1f}  f1={row['f1']:.4f}  "
                    f"inner-distinct1={row['inner_distinct1']}  "
                    f"inner-distinct2={row['inner_distinct2']}"
                )
        elif args.command == "style-tokens":
            for row in cmd_style_tokens(cfg, style=args.style, top=args.top):
                print(f"{row['mean_score']:.4f}  {row['token']}  (x{row['count']})")
        elif args.command == "chat":
            return cmd_chat(cfg, style=args.style)
        else:  # pragma: no cover - argparse enforces the choices
            raise _UsageError(f"unknown command {args.command!r}")
    except (ConfigError, CorpusError, ManifestError, _UsageError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (CheckpointError, LockError, RuntimeError, OSError) as err:
        print(f"failure: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
