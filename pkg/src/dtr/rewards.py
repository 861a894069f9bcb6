"""Reward signals for policy training: semantic similarity and style strength.

Semantic similarity compares mean word vectors; the word vectors come from a
word2vec-style text file or, for synthetic runs, from the denoiser's learned
input embeddings. Style strength comes from a small binary classifier that
separates the style corpus from dialogue responses.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import SPECIAL_TOKENS, Vocabulary
from .seq2seq import (
    ModelConfig,
    TokenEncoder,
    TrainHyper,
    _make_batches,
    _pad_batch,
    init_parameters,
    load_payload,
)

logger = logging.getLogger(__name__)

_CONTROL = set(SPECIAL_TOKENS)


class EmbeddingTable:
    """Token to vector lookup used for similarity and reconstruction distance."""

    def __init__(self, vectors: Mapping[str, np.ndarray]) -> None:
        if not vectors:
            raise ValueError("EmbeddingTable: no vectors")
        dims = {vec.shape for vec in vectors.values()}
        if len(dims) != 1:
            raise ValueError(f"EmbeddingTable: inconsistent dimensions {dims}")
        self.vectors = {tok: np.asarray(vec, dtype=np.float64) for tok, vec in vectors.items()}
        self.dim = next(iter(vectors.values())).shape[0]

    def __contains__(self, token: str) -> bool:
        return token in self.vectors

    def __getitem__(self, token: str) -> np.ndarray:
        return self.vectors[token]

    def __len__(self) -> int:
        return len(self.vectors)

    @classmethod
    def from_word2vec(cls, path: str | Path) -> "EmbeddingTable":
        """Load a word2vec-style text file (token then floats per line).

        A leading "count dim" header line is skipped when present.
        """
        vectors: dict[str, np.ndarray] = {}
        with open(path, encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                parts = line.rstrip("\n").split(" ")
                if lineno == 1 and len(parts) == 2:
                    continue
                if len(parts) < 2:
                    continue
                try:
                    vec = np.array([float(x) for x in parts[1:]], dtype=np.float64)
                except ValueError as err:
                    raise ValueError(f"{path}:{lineno}: bad embedding row") from err
                vectors[parts[0]] = vec
        return cls(vectors)

    @classmethod
    def from_model(cls, model, vocab: Vocabulary) -> "EmbeddingTable":
        """Snapshot a model's input embedding rows for all word tokens."""
        table = model.embedding_table.detach().cpu().numpy().astype(np.float64)
        vectors = {
            tok: table[idx]
            for idx, tok in enumerate(vocab.tokens)
            if tok not in _CONTROL
        }
        return cls(vectors)


def _mean_vector(tokens: Sequence[str], table: EmbeddingTable) -> np.ndarray | None:
    rows = [table[tok] for tok in tokens if tok in table]
    if not rows:
        return None
    return np.mean(rows, axis=0)


def semantic_similarity(a: Sequence[str], b: Sequence[str], table: EmbeddingTable) -> float:
    """Cosine similarity of mean word vectors of two token sequences.

    Tokens are lowercased, control tokens are stripped, and tokens without a
    vector are dropped. When either side has no embeddable token the
    similarity is 0.0 (with a warning).
    """
    a_clean = [tok.lower() for tok in a if tok not in _CONTROL]
    b_clean = [tok.lower() for tok in b if tok not in _CONTROL]
    vec_a = _mean_vector(a_clean, table)
    vec_b = _mean_vector(b_clean, table)
    if vec_a is None or vec_b is None:
        logger.warning("semantic_similarity: no embeddable tokens on one side")
        return 0.0
    norm = float(np.linalg.norm(vec_a) * np.linalg.norm(vec_b))
    if norm == 0.0:
        return 0.0
    return float(np.dot(vec_a, vec_b) / norm)


class StyleClassifier(nn.Module):
    """Bidirectional encoder with a scalar sigmoid head over mean-pooled states."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary) -> None:
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.encoder = TokenEncoder(cfg, vocab)
        self.head = nn.Linear(cfg.hidden, 1, bias=False)
        self.held_out_accuracy: float | None = None

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        pad_id = self.vocab.pad_id
        states = self.encoder(ids, pad_id)
        keep = (ids != pad_id).unsqueeze(-1).to(states.dtype)
        pooled = (states * keep).sum(dim=1) / keep.sum(dim=1).clamp(min=1.0)
        return self.head(pooled).squeeze(-1)


def style_intensity(classifier: StyleClassifier, tokens: Sequence[str]) -> float:
    """Probability that a token sequence carries the classifier's style."""
    if not tokens:
        raise ValueError("style_intensity: empty input")
    clean = [tok for tok in tokens if tok not in _CONTROL]
    if not clean:
        raise ValueError("style_intensity: only control tokens in input")
    ids = torch.tensor([classifier.vocab.encode(clean)[: classifier.cfg.max_len]])
    was_training = classifier.training
    classifier.eval()
    with torch.no_grad():
        prob = float(torch.sigmoid(classifier(ids)))
    if was_training:
        classifier.train()
    return prob


def train_style_classifier(
    positives: Sequence[Sequence[str]],
    negatives: Sequence[Sequence[str]],
    cfg: ModelConfig,
    hyper: TrainHyper,
    vocab: Vocabulary,
) -> StyleClassifier:
    """Train a binary style-vs-neutral classifier.

    Args:
        positives: token sequences of the style corpus.
        negatives: token sequences drawn from dialogue responses.
        cfg: encoder architecture.
        hyper: optimization settings (hyper.seed fixes everything random).
        vocab: shared token inventory.

    Returns:
        Trained classifier with held_out_accuracy recorded from a 10% split.
    """
    if not positives or not negatives:
        raise ValueError("train_style_classifier: need both positive and negative examples")
    if cfg.vocab_size != len(vocab):
        raise ValueError("config vocab_size does not match vocabulary")

    torch.manual_seed(hyper.seed)
    model = StyleClassifier(cfg, vocab)
    init_parameters(model)
    optimizer = torch.optim.Adam(model.parameters(), lr=hyper.lr)

    labeled = [(list(toks), 1.0) for toks in positives] + [(list(toks), 0.0) for toks in negatives]
    rng = random.Random(hyper.seed ^ 0x2B2B2B)
    rng.shuffle(labeled)
    n_val = max(1, int(len(labeled) * hyper.val_fraction))
    val, train = labeled[:n_val], labeled[n_val:]
    if not train:
        train = val

    encoded = [(vocab.encode(toks)[: cfg.max_len], label) for toks, label in train]
    val_encoded = [(vocab.encode(toks)[: cfg.max_len], label) for toks, label in val]
    lengths = [len(ids) for ids, _ in encoded]

    def val_stats() -> tuple[float, float]:
        model.eval()
        losses, correct = [], 0
        with torch.no_grad():
            for ids, label in val_encoded:
                logit = model(torch.tensor([ids]))
                target = torch.tensor([label])
                losses.append(float(F.binary_cross_entropy_with_logits(logit, target)))
                correct += int((float(torch.sigmoid(logit)) >= 0.5) == bool(label))
        model.train()
        return sum(losses) / len(losses), correct / len(val_encoded)

    best_loss, best_acc = float("inf"), 0.0
    best_state = {k: v.clone() for k, v in model.state_dict().items()}
    stale = 0
    for epoch in range(hyper.max_epochs):
        order = list(range(len(encoded)))
        random.Random((hyper.seed << 8) ^ epoch).shuffle(order)
        model.train()
        for batch_idx in _make_batches(lengths, order, hyper.token_batch):
            ids = _pad_batch([encoded[i][0] for i in batch_idx], vocab.pad_id)
            labels = torch.tensor([encoded[i][1] for i in batch_idx])
            loss = F.binary_cross_entropy_with_logits(model(ids), labels)
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), hyper.clip)
            optimizer.step()
        val_loss, val_acc = val_stats()
        logger.info("classifier epoch %d: val loss %.4f acc %.3f", epoch, val_loss, val_acc)
        if val_loss < best_loss:
            best_loss, best_acc = val_loss, val_acc
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
            stale = 0
        else:
            stale += 1
            if stale > hyper.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    model.held_out_accuracy = best_acc
    return model


def save_classifier(model: StyleClassifier, path: str | Path, meta: dict | None = None) -> None:
    from .seq2seq import save_checkpoint

    combined = {"held_out_accuracy": model.held_out_accuracy}
    combined.update(meta or {})
    save_checkpoint(model, path, kind="classifier", meta=combined)


def load_classifier(path: str | Path, expect_vocab_size: int | None = None) -> StyleClassifier:
    payload = load_payload(path, kind="classifier")
    cfg = ModelConfig(**payload["config"])
    if expect_vocab_size is not None and cfg.vocab_size != expect_vocab_size:
        from .seq2seq import CheckpointError

        raise CheckpointError(
            f"checkpoint vocab_size {cfg.vocab_size} != expected {expect_vocab_size}"
        )
    model = StyleClassifier(cfg, Vocabulary(tokens=payload["vocab_tokens"]))
    model.load_state_dict(payload["state"])
    model.eval()
    model.held_out_accuracy = payload["meta"].get("held_out_accuracy")
    return model


@dataclass
class RewardRecord:
    """Reward decomposition for one sampled episode."""

    example_id: str
    sim: float
    cls: float
    total: float
    advantage: float


def compute_rewards(
    batch: Sequence[tuple[str, Sequence[str], Sequence[str]]],
    table: EmbeddingTable,
    classifier: StyleClassifier,
    sim_weight: float = 1.0,
    cls_weight: float = 1.0,
) -> list[RewardRecord]:
    """Score a batch of styled outputs and center rewards into advantages.

    Args:
        batch: (example id, styled tokens, reference tokens) rows.
        table: embedding table for the similarity term.
        classifier: style classifier for the intensity term.
        sim_weight, cls_weight: term weights, both 1.0 by default.

    Returns:
        One RewardRecord per row; advantages sum to zero over the batch.
    """
    if not batch:
        raise ValueError("compute_rewards: empty batch")
    records = []
    for example_id, hyp, ref in batch:
        sim = semantic_similarity(hyp, ref, table)
        cls = style_intensity(classifier, hyp) if hyp else 0.0
        records.append((example_id, sim, cls, sim_weight * sim + cls_weight * cls))
    mean_total = sum(total for *_, total in records) / len(records)
    return [
        RewardRecord(example_id=eid, sim=sim, cls=cls, total=total, advantage=total - mean_total)
        for eid, sim, cls, total in records
    ]
