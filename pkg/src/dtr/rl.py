"""Policy-gradient refinement of the grounded scoring head.

After weak supervision, the response-only head is frozen and a grounded
head is added (zero projection, so scores start unchanged up to a constant).
Replace/retain decisions are sampled per token, the rewriter realizes them,
and the summed similarity and style rewards reinforce decisions that beat
the batch mean. Only grounded-head parameters ever receive updates.
"""

from __future__ import annotations

import json
import logging
import random
from copy import deepcopy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .corpus import DialogueExample, generator_source
from .disentangler import (
    Disentangler,
    TokenScores,
    extract_template,
    grounded_input,
    parameter_hashes,
    template_from_actions,
)
from .rewards import EmbeddingTable, RewardRecord, StyleClassifier, compute_rewards
from .rewriter import rewrite
from .seq2seq import Seq2SeqModel, beam_decode

logger = logging.getLogger(__name__)

_PROB_FLOOR = 1e-6


class RlDivergenceError(Exception):
    """Policy training produced a non-finite loss."""


@dataclass
class RlConfig:
    """Knobs for policy-gradient training."""

    steps: int = 60
    batch_size: int = 8
    lr: float = 1e-3
    entropy_bonus: float = 0.01
    eval_every: int = 10
    sim_weight: float = 1.0
    cls_weight: float = 1.0
    generation_beam: int = 5


@dataclass
class EpisodeTrace:
    """Everything sampled and produced for one example in one step."""

    example_id: str
    draft: list[str]
    actions: list[int]
    logprob: float
    template: list[str]
    styled: list[str]
    reward: RewardRecord | None


@dataclass
class RlReport:
    """Step-level training log plus validation summaries."""

    rows: list[dict] = field(default_factory=list)
    val_rows: list[dict] = field(default_factory=list)
    best_val_reward: float | None = None
    steps: int = 0

    def dump_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            for row in self.rows:
                handle.write(json.dumps(row, sort_keys=True) + "\n")


def sample_actions(
    scores: TokenScores | Sequence[float], rng: random.Random
) -> tuple[list[int], float]:
    """Sample per-token replace (1) / retain (0) decisions.

    Each combined score x in [0, 2] becomes a replace probability x / 2,
    clamped away from 0 and 1 so log-probabilities stay finite.

    Args:
        scores: TokenScores or the raw combined scores.
        rng: decision source.

    Returns:
        (actions, total log-probability of the sampled action vector).
    """
    values = scores.scores if isinstance(scores, TokenScores) else list(scores)
    if not values:
        raise ValueError("sample_actions: no scores")
    actions: list[int] = []
    logprob = 0.0
    for x in values:
        p = min(max(x / 2.0, _PROB_FLOOR), 1.0 - _PROB_FLOOR)
        action = 1 if rng.random() < p else 0
        actions.append(action)
        logprob += torch.log(torch.tensor(p if action else 1.0 - p)).item()
    return actions, logprob


@dataclass
class RlExample:
    """A dialogue example prepared for policy training."""

    id: str
    draft: list[str]
    reference: list[str]
    grounded_ids: list[int]
    alpha: list[float]


def prepare_rl_examples(
    generator: Seq2SeqModel,
    disentangler: Disentangler,
    examples: Sequence[DialogueExample],
    beam: int = 5,
) -> list[RlExample]:
    """Decode drafts and precompute everything the frozen models provide.

    The generator and the response-only head stay frozen during policy
    training, so their outputs per example are constants and are computed
    once up front.
    """
    prepared: list[RlExample] = []
    vocab = disentangler.vocab
    grounded_cfg = disentangler.grounded_cfg or disentangler.cfg
    for ex in examples:
        draft = beam_decode(generator, generator_source(ex.context, ex.knowledge), beam=beam).tokens
        if not draft:
            logger.warning("empty draft for example %s, skipped", ex.id)
            continue
        draft = draft[: disentangler.cfg.max_len]
        with torch.no_grad():
            ids = torch.tensor([vocab.encode(draft)])
            alpha = disentangler.alpha_scores(ids)[0].tolist()
        grounded_ids = grounded_input(vocab, draft, ex.context, ex.knowledge)
        prepared.append(
            RlExample(
                id=ex.id,
                draft=draft,
                reference=list(ex.response),
                grounded_ids=grounded_ids[: grounded_cfg.max_len],
                alpha=alpha,
            )
        )
    if not prepared:
        raise ValueError("prepare_rl_examples: no usable examples")
    return prepared


def _beta_rows(disentangler: Disentangler, batch: Sequence[RlExample]) -> list[torch.Tensor]:
    """Grounded scores with gradients, one row per example (response prefix)."""
    vocab = disentangler.vocab
    width = max(len(ex.grounded_ids) for ex in batch)
    ids = torch.tensor(
        [ex.grounded_ids + [vocab.pad_id] * (width - len(ex.grounded_ids)) for ex in batch]
    )
    states = disentangler.beta_encoder(ids, vocab.pad_id)
    scores = torch.sigmoid(disentangler.beta_proj(states).squeeze(-1))
    return [scores[row, : len(ex.draft)] for row, ex in enumerate(batch)]


def rl_step(
    disentangler: Disentangler,
    rewriter: Seq2SeqModel,
    batch: Sequence[RlExample],
    table: EmbeddingTable,
    classifier: StyleClassifier,
    optimizer: torch.optim.Optimizer,
    cfg: RlConfig,
    rng: random.Random,
) -> tuple[dict, list[EpisodeTrace]]:
    """One policy-gradient update on a batch of examples.

    Returns:
        (stats row, per-example traces). Stats include the decomposed
        reward means so training curves show both signals.
    """
    if not batch:
        raise ValueError("rl_step: empty batch")
    disentangler.train()
    beta_rows = _beta_rows(disentangler, batch)

    traces: list[EpisodeTrace] = []
    logprob_terms: list[torch.Tensor] = []
    entropy_terms: list[torch.Tensor] = []
    reward_inputs: list[tuple[str, list[str], list[str]]] = []
    for ex, beta_row in zip(batch, beta_rows):
        alpha_row = torch.tensor(ex.alpha, dtype=beta_row.dtype)
        x = alpha_row + beta_row
        actions, _ = sample_actions(x.detach().tolist(), rng)
        p = torch.clamp(x / 2.0, _PROB_FLOOR, 1.0 - _PROB_FLOOR)
        mask = torch.tensor(actions, dtype=p.dtype)
        logprob = (mask * torch.log(p) + (1.0 - mask) * torch.log(1.0 - p)).sum()
        entropy = -(p * torch.log(p) + (1.0 - p) * torch.log(1.0 - p)).sum()
        template = template_from_actions(ex.draft, actions)
        styled = rewrite(rewriter, template.surface, beam=1)
        traces.append(
            EpisodeTrace(
                example_id=ex.id,
                draft=list(ex.draft),
                actions=actions,
                logprob=float(logprob.detach()),
                template=template.surface,
                styled=styled.tokens,
                reward=None,
            )
        )
        logprob_terms.append(logprob)
        entropy_terms.append(entropy)
        reward_inputs.append((ex.id, styled.tokens, ex.reference))

    records = compute_rewards(
        reward_inputs, table, classifier, cfg.sim_weight, cfg.cls_weight
    )
    for trace, record in zip(traces, records):
        trace.reward = record

    advantages = torch.tensor([r.advantage for r in records])
    logprobs = torch.stack(logprob_terms)
    entropies = torch.stack(entropy_terms)
    loss = -(advantages * logprobs).mean() - cfg.entropy_bonus * entropies.mean()
    if not torch.isfinite(loss):
        raise RlDivergenceError(f"non-finite policy loss {float(loss)}")
    optimizer.zero_grad()
    loss.backward()
    torch.nn.utils.clip_grad_norm_(disentangler.beta_parameters(), 1.0)
    optimizer.step()

    stats = {
        "mean_reward": sum(r.total for r in records) / len(records),
        "mean_sim": sum(r.sim for r in records) / len(records),
        "mean_cls": sum(r.cls for r in records) / len(records),
        "loss": float(loss.detach()),
        "entropy": float(entropies.detach().mean()),
    }
    return stats, traces


def _validation_reward(
    disentangler: Disentangler,
    rewriter: Seq2SeqModel,
    examples: Sequence[RlExample],
    table: EmbeddingTable,
    classifier: StyleClassifier,
    cfg: RlConfig,
    pr: float,
) -> float:
    """Deterministic reward of thresholded templates on a validation slice."""
    disentangler.eval()
    inputs = []
    with torch.no_grad():
        for ex in examples:
            beta = _beta_rows(disentangler, [ex])[0]
            scores = [a + float(b) for a, b in zip(ex.alpha, beta)]
            template = extract_template(ex.draft, scores, pr)
            styled = rewrite(rewriter, template.surface, beam=1)
            inputs.append((ex.id, styled.tokens, ex.reference))
    records = compute_rewards(inputs, table, classifier, cfg.sim_weight, cfg.cls_weight)
    return sum(r.total for r in records) / len(records)


def train_rl(
    disentangler: Disentangler,
    rewriter: Seq2SeqModel,
    generator: Seq2SeqModel,
    examples: Sequence[DialogueExample],
    table: EmbeddingTable,
    classifier: StyleClassifier,
    cfg: RlConfig,
    pr: float = 25.0,
    seed: int = 0,
    val_fraction: float = 0.1,
    dump_path: str | Path | None = None,
) -> RlReport:
    """Run policy-gradient training of the grounded head.

    The generator, rewriter, classifier, and response-only head are frozen;
    a changed parameter in any of them after training is a hard error. The
    grounded head snapshot with the best validation reward wins.

    Args:
        disentangler: weak-supervised scorer (grounded head added here).
        rewriter: trained rewriter for the target style.
        generator: trained grounded generator.
        examples: dialogue examples to train on.
        table: embedding table for the similarity reward.
        classifier: style classifier for the intensity reward.
        cfg: policy-training knobs; cfg.steps == 0 leaves the scorer untouched.
        pr: replacement percentage used for deterministic validation decoding.
        seed: drives sampling, shuffling, and head initialization.
        val_fraction: slice of examples held out for validation.
        dump_path: where to write episode traces if training diverges.

    Returns:
        RlReport with one row per step.
    """
    report = RlReport()
    if cfg.steps == 0:
        logger.info("train_rl: steps=0, scorer left untouched")
        return report

    disentangler.ensure_grounded_head(seed=seed ^ 0x9E3779B9)
    disentangler.set_stage("rl")
    frozen_before = {
        "alpha": {
            name: digest
            for name, digest in parameter_hashes(disentangler).items()
            if name.startswith("alpha_")
        },
        "rewriter": parameter_hashes(rewriter),
        "generator": parameter_hashes(generator),
        "classifier": parameter_hashes(classifier),
    }

    rng = random.Random(seed)
    prepared = prepare_rl_examples(generator, disentangler, examples, beam=cfg.generation_beam)
    order = list(range(len(prepared)))
    rng.shuffle(order)
    n_val = max(1, int(len(prepared) * val_fraction)) if len(prepared) > 1 else 0
    val_examples = [prepared[i] for i in order[:n_val]]
    train_examples = [prepared[i] for i in order[n_val:]] or list(val_examples)

    optimizer = torch.optim.Adam(disentangler.beta_parameters(), lr=cfg.lr)
    best_state = deepcopy(
        {k: v for k, v in disentangler.state_dict().items() if k.startswith("beta_")}
    )
    best_val = (
        _validation_reward(disentangler, rewriter, val_examples, table, classifier, cfg, pr)
        if val_examples
        else None
    )
    if best_val is not None:
        report.val_rows.append({"step": 0, "val_reward": best_val})

    all_traces: list[EpisodeTrace] = []
    cursor: list[int] = []
    for step in range(1, cfg.steps + 1):
        if len(cursor) < cfg.batch_size:
            refill = list(range(len(train_examples)))
            rng.shuffle(refill)
            cursor.extend(refill)
        batch = [train_examples[cursor.pop()] for _ in range(min(cfg.batch_size, len(cursor)))]
        try:
            stats, traces = rl_step(
                disentangler, rewriter, batch, table, classifier, optimizer, cfg, rng
            )
        except RlDivergenceError:
            if dump_path is not None:
                with open(dump_path, "w", encoding="utf-8") as handle:
                    for trace in all_traces:
                        handle.write(json.dumps(trace.__dict__, default=vars) + "\n")
                logger.error("policy training diverged; traces dumped to %s", dump_path)
            raise
        stats["step"] = step
        report.rows.append(stats)
        all_traces = traces
        if step % 20 == 0 or step == cfg.steps:
            logger.info(
                "rl step %d: reward %.4f (sim %.4f, cls %.4f)",
                step,
                stats["mean_reward"],
                stats["mean_sim"],
                stats["mean_cls"],
            )
        if val_examples and (step % cfg.eval_every == 0 or step == cfg.steps):
            val_reward = _validation_reward(
                disentangler, rewriter, val_examples, table, classifier, cfg, pr
            )
            report.val_rows.append({"step": step, "val_reward": val_reward})
            if best_val is None or val_reward > best_val:
                best_val = val_reward
                best_state = deepcopy(
                    {
                        k: v
                        for k, v in disentangler.state_dict().items()
                        if k.startswith("beta_")
                    }
                )

    if best_val is not None:
        state = disentangler.state_dict()
        state.update(best_state)
        disentangler.load_state_dict(state)
    report.best_val_reward = best_val
    report.steps = cfg.steps
    disentangler.eval()

    frozen_after = {
        "alpha": {
            name: digest
            for name, digest in parameter_hashes(disentangler).items()
            if name.startswith("alpha_")
        },
        "rewriter": parameter_hashes(rewriter),
        "generator": parameter_hashes(generator),
        "classifier": parameter_hashes(classifier),
    }
    for component, before in frozen_before.items():
        if frozen_after[component] != before:
            raise RuntimeError(f"freeze contract violated: {component} changed during policy training")
    return report
