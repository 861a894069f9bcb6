"""Desk-scale transformer sequence models shared by every pipeline stage.

One encoder-decoder architecture serves the grounded generator, the style
denoiser, and the rewriter; a standalone encoder serves token scoring and
classification heads. Linear layers carry no bias and the output projection
is tied to the embedding table, which keeps even the smallest configs lean.
"""

from __future__ import annotations

import logging
import math
import random
from copy import deepcopy
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import Vocabulary

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


class TrainingDivergedError(Exception):
    """Training loss became non-finite."""


class CheckpointError(Exception):
    """A checkpoint file is unreadable or does not match expectations."""


@dataclass
class ModelConfig:
    """Architecture knobs for one transformer model."""

    vocab_size: int
    hidden: int = 128
    layers: int = 2
    heads: int = 4
    ff: int = 256
    dropout: float = 0.1
    max_len: int = 64

    def __post_init__(self) -> None:
        for name in ("vocab_size", "hidden", "layers", "heads", "ff", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")


@dataclass
class TrainHyper:
    """Optimization knobs for one training stage."""

    lr: float = 5e-4
    token_batch: int = 4096
    max_epochs: int = 30
    patience: int = 3
    clip: float = 1.0
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.token_batch < 1:
            raise ValueError("token_batch must be positive")


class MultiHeadAttention(nn.Module):
    def __init__(self, hidden: int, heads: int, dropout: float) -> None:
        super().__init__()
        self.heads = heads
        self.head_dim = hidden // heads
        self.q = nn.Linear(hidden, hidden, bias=False)
        self.k = nn.Linear(hidden, hidden, bias=False)
        self.v = nn.Linear(hidden, hidden, bias=False)
        self.out = nn.Linear(hidden, hidden, bias=False)
        self.dropout = nn.Dropout(dropout)

    def forward(
        self,
        query: torch.Tensor,
        key: torch.Tensor,
        value: torch.Tensor,
        mask: torch.Tensor | None,
    ) -> torch.Tensor:
        batch, q_len, hidden = query.shape
        k_len = key.shape[1]

        def split(x: torch.Tensor, length: int) -> torch.Tensor:
            return x.view(batch, length, self.heads, self.head_dim).transpose(1, 2)

        q = split(self.q(query), q_len)
        k = split(self.k(key), k_len)
        v = split(self.v(value), k_len)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        attn = self.dropout(torch.softmax(scores, dim=-1))
        mixed = (attn @ v).transpose(1, 2).reshape(batch, q_len, hidden)
        return self.out(mixed)


class FeedForward(nn.Module):
    def __init__(self, hidden: int, ff: int, dropout: float) -> None:
        super().__init__()
        self.inner = nn.Linear(hidden, ff, bias=False)
        self.outer = nn.Linear(ff, hidden, bias=False)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.outer(self.dropout(F.relu(self.inner(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.hidden)
        self.attn = MultiHeadAttention(cfg.hidden, cfg.heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(cfg.hidden)
        self.ff = FeedForward(cfg.hidden, cfg.ff, cfg.dropout)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
        normed = self.norm1(x)
        x = x + self.dropout(self.attn(normed, normed, normed, mask))
        return x + self.dropout(self.ff(self.norm2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.hidden)
        self.self_attn = MultiHeadAttention(cfg.hidden, cfg.heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(cfg.hidden)
        self.cross_attn = MultiHeadAttention(cfg.hidden, cfg.heads, cfg.dropout)
        self.norm3 = nn.LayerNorm(cfg.hidden)
        self.ff = FeedForward(cfg.hidden, cfg.ff, cfg.dropout)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(
        self,
        x: torch.Tensor,
        memory: torch.Tensor,
        self_mask: torch.Tensor,
        memory_mask: torch.Tensor | None,
    ) -> torch.Tensor:
        normed = self.norm1(x)
        x = x + self.dropout(self.self_attn(normed, normed, normed, self_mask))
        normed = self.norm2(x)
        x = x + self.dropout(self.cross_attn(normed, memory, memory, memory_mask))
        return x + self.dropout(self.ff(self.norm3(x)))


def sinusoidal_positions(max_len: int, hidden: int) -> torch.Tensor:
    position = torch.arange(max_len).unsqueeze(1).float()
    div = torch.exp(torch.arange(0, hidden, 2).float() * (-math.log(10000.0) / hidden))
    table = torch.zeros(max_len, hidden)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div[: (hidden + 1) // 2])
    return table


class TokenEmbedding(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.table = nn.Embedding(cfg.vocab_size, cfg.hidden)
        self.scale = math.sqrt(cfg.hidden)
        self.dropout = nn.Dropout(cfg.dropout)
        self.register_buffer("positions", sinusoidal_positions(cfg.max_len, cfg.hidden))

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.shape[1] > self.positions.shape[0]:
            raise ValueError(
                f"sequence length {ids.shape[1]} exceeds max_len {self.positions.shape[0]}"
            )
        embedded = self.table(ids) * self.scale
        return self.dropout(embedded + self.positions[: ids.shape[1]])


def _pad_mask(ids: torch.Tensor, pad_id: int) -> torch.Tensor:
    # -> (batch, 1, 1, src_len), True where attention is allowed.
    return (ids != pad_id)[:, None, None, :]


def _causal_mask(length: int, device: torch.device) -> torch.Tensor:
    return torch.tril(torch.ones(length, length, dtype=torch.bool, device=device))[None, None]


class TokenEncoder(nn.Module):
    """Bidirectional encoder producing one vector per input token."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary | None = None) -> None:
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.embed = TokenEmbedding(cfg)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.hidden)

    def forward(self, ids: torch.Tensor, pad_id: int = 0) -> torch.Tensor:
        mask = _pad_mask(ids, pad_id)
        x = self.embed(ids)
        for layer in self.layers:
            x = layer(x, mask)
        return self.norm(x)


def encode_tokens(encoder: TokenEncoder, tokens: Sequence[str]) -> torch.Tensor:
    """Encode one token sequence to per-token vectors (eval mode, no grad).

    Sequences longer than the encoder's max_len are truncated with a warning.
    """
    if encoder.vocab is None:
        raise ValueError("encode_tokens needs an encoder built with a vocabulary")
    if not tokens:
        raise ValueError("encode_tokens: empty input")
    if len(tokens) > encoder.cfg.max_len:
        logger.warning(
            "encode_tokens: truncating %d tokens to max_len %d", len(tokens), encoder.cfg.max_len
        )
        tokens = tokens[: encoder.cfg.max_len]
    ids = torch.tensor([encoder.vocab.encode(tokens)], dtype=torch.long)
    was_training = encoder.training
    encoder.eval()
    with torch.no_grad():
        vectors = encoder(ids)[0]
    if was_training:
        encoder.train()
    return vectors


class Seq2SeqModel(nn.Module):
    """Transformer encoder-decoder with tied input/output embeddings."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary | None = None) -> None:
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.embed = TokenEmbedding(cfg)
        self.encoder_layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.layers))
        self.encoder_norm = nn.LayerNorm(cfg.hidden)
        self.decoder_layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.layers))
        self.decoder_norm = nn.LayerNorm(cfg.hidden)

    @property
    def embedding_table(self) -> torch.Tensor:
        return self.embed.table.weight

    def encode(self, src_ids: torch.Tensor, pad_id: int = 0) -> torch.Tensor:
        mask = _pad_mask(src_ids, pad_id)
        x = self.embed(src_ids)
        for layer in self.encoder_layers:
            x = layer(x, mask)
        return self.encoder_norm(x)

    def decode_logits(
        self,
        memory: torch.Tensor,
        src_ids: torch.Tensor,
        tgt_in: torch.Tensor,
        pad_id: int = 0,
    ) -> torch.Tensor:
        self_mask = _causal_mask(tgt_in.shape[1], tgt_in.device) & _pad_mask(tgt_in, pad_id)
        memory_mask = _pad_mask(src_ids, pad_id)
        x = self.embed(tgt_in)
        for layer in self.decoder_layers:
            x = layer(x, memory, self_mask, memory_mask)
        x = self.decoder_norm(x)
        return x @ self.embed.table.weight.t()

    def forward(self, src_ids: torch.Tensor, tgt_in: torch.Tensor, pad_id: int = 0) -> torch.Tensor:
        return self.decode_logits(self.encode(src_ids, pad_id), src_ids, tgt_in, pad_id)

    def loss_on_batch(
        self, src_ids: torch.Tensor, tgt_ids: torch.Tensor, pad_id: int = 0
    ) -> tuple[torch.Tensor, int]:
        """Teacher-forced NLL summed over non-pad target tokens.

        tgt_ids must already start with BOS and end with EOS.

        Returns:
            (summed loss, number of scored tokens).
        """
        tgt_in, tgt_out = tgt_ids[:, :-1], tgt_ids[:, 1:]
        logits = self(src_ids, tgt_in, pad_id)
        losses = F.cross_entropy(
            logits.reshape(-1, logits.shape[-1]),
            tgt_out.reshape(-1),
            ignore_index=pad_id,
            reduction="sum",
        )
        n_tokens = int((tgt_out != pad_id).sum())
        return losses, n_tokens


def init_parameters(model: nn.Module) -> None:
    for param in model.parameters():
        if param.dim() > 1:
            nn.init.xavier_uniform_(param)


def _encode_pair(
    vocab: Vocabulary, src: Sequence[str], tgt: Sequence[str], max_len: int
) -> tuple[list[int], list[int]]:
    src_ids = vocab.encode(src)[:max_len]
    tgt_ids = [vocab.bos_id] + vocab.encode(tgt) + [vocab.eos_id]
    return src_ids, tgt_ids[: max_len]


def _make_batches(
    lengths: list[int], order: list[int], token_batch: int
) -> list[list[int]]:
    batches: list[list[int]] = []
    current: list[int] = []
    current_tokens = 0
    for idx in order:
        if current and current_tokens + lengths[idx] > token_batch:
            batches.append(current)
            current, current_tokens = [], 0
        current.append(idx)
        current_tokens += lengths[idx]
    if current:
        batches.append(current)
    return batches


def _pad_batch(rows: list[list[int]], pad_id: int) -> torch.Tensor:
    width = max(len(row) for row in rows)
    return torch.tensor(
        [row + [pad_id] * (width - len(row)) for row in rows], dtype=torch.long
    )


def evaluate_loss(
    model: Seq2SeqModel,
    pairs: Sequence[tuple[Sequence[str], Sequence[str]]],
) -> float:
    """Mean per-token NLL over pairs, independent of batch order.

    Examples are scored one at a time and reduced in corpus order, so any
    shuffling of the input yields the identical float.
    """
    if not pairs:
        raise ValueError("evaluate_loss: no pairs")
    vocab = model.vocab
    assert vocab is not None
    was_training = model.training
    model.eval()
    sums: list[float] = []
    counts: list[int] = []
    with torch.no_grad():
        for src, tgt in pairs:
            src_ids, tgt_ids = _encode_pair(vocab, src, tgt, model.cfg.max_len)
            loss, n_tokens = model.loss_on_batch(
                torch.tensor([src_ids]), torch.tensor([tgt_ids]), vocab.pad_id
            )
            sums.append(float(loss))
            counts.append(n_tokens)
    if was_training:
        model.train()
    return math.fsum(sums) / max(1, sum(counts))


def train_seq2seq(
    pairs: Sequence[tuple[Sequence[str], Sequence[str]]],
    cfg: ModelConfig,
    hyper: TrainHyper,
    vocab: Vocabulary,
    val_pairs: Sequence[tuple[Sequence[str], Sequence[str]]] | None = None,
    source_transform: Callable[[list[str], random.Random], list[str]] | None = None,
) -> Seq2SeqModel:
    """Train an encoder-decoder on (source tokens, target tokens) pairs.

    Args:
        pairs: training pairs; must be non-empty.
        cfg: architecture; cfg.vocab_size must equal len(vocab).
        hyper: optimization settings; hyper.seed fixes initialization,
            shuffling, and dropout, so equal inputs give equal models.
        vocab: token inventory shared by source and target.
        val_pairs: held-out pairs for early stopping; when None a fraction
            of the training pairs is carved off deterministically.
        source_transform: optional per-epoch corruption applied to source
            tokens before encoding (used by denoiser training).

    Returns:
        The trained model, restored to the best validation state.
    """
    if not pairs:
        raise ValueError("train_seq2seq: no training pairs")
    if cfg.vocab_size != len(vocab):
        raise ValueError(f"config vocab_size {cfg.vocab_size} != vocabulary size {len(vocab)}")

    torch.manual_seed(hyper.seed)
    model = Seq2SeqModel(cfg, vocab)
    init_parameters(model)
    optimizer = torch.optim.Adam(model.parameters(), lr=hyper.lr)

    pairs = list(pairs)
    if val_pairs is None:
        n_val = max(1, int(len(pairs) * hyper.val_fraction)) if len(pairs) > 1 else 0
        order = list(range(len(pairs)))
        random.Random(hyper.seed ^ 0x5F5E5F).shuffle(order)
        val_idx = set(order[:n_val])
        val_pairs = [pairs[i] for i in sorted(val_idx)]
        pairs = [pairs[i] for i in range(len(pairs)) if i not in val_idx]
        if not pairs:
            pairs, val_pairs = list(val_pairs), list(val_pairs)
    if source_transform is not None:
        fixed = random.Random(hyper.seed ^ 0x7A7A7A)
        val_pairs = [(source_transform(list(src), fixed), tgt) for src, tgt in val_pairs]

    best_state = deepcopy(model.state_dict())
    best_val = float("inf")
    epochs_since_best = 0
    step = 0
    for epoch in range(hyper.max_epochs):
        epoch_rng = random.Random((hyper.seed << 8) ^ epoch)
        if source_transform is not None:
            epoch_pairs = [(source_transform(list(src), epoch_rng), tgt) for src, tgt in pairs]
        else:
            epoch_pairs = pairs
        encoded = [
            _encode_pair(vocab, src, tgt, cfg.max_len) for src, tgt in epoch_pairs
        ]
        lengths = [len(s) + len(t) for s, t in encoded]
        order = list(range(len(encoded)))
        epoch_rng.shuffle(order)
        model.train()
        epoch_loss, epoch_tokens = 0.0, 0
        for batch_idx in _make_batches(lengths, order, hyper.token_batch):
            src_batch = _pad_batch([encoded[i][0] for i in batch_idx], vocab.pad_id)
            tgt_batch = _pad_batch([encoded[i][1] for i in batch_idx], vocab.pad_id)
            loss_sum, n_tokens = model.loss_on_batch(src_batch, tgt_batch, vocab.pad_id)
            loss = loss_sum / max(1, n_tokens)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite training loss at epoch {epoch} step {step}"
                )
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), hyper.clip)
            optimizer.step()
            epoch_loss += float(loss_sum.detach())
            epoch_tokens += n_tokens
            step += 1
        val_loss = evaluate_loss(model, val_pairs) if val_pairs else epoch_loss / max(1, epoch_tokens)
        logger.info(
            "epoch %d: train loss %.4f, val loss %.4f",
            epoch,
            epoch_loss / max(1, epoch_tokens),
            val_loss,
        )
        if val_loss < best_val:
            best_val = val_loss
            best_state = deepcopy(model.state_dict())
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best > hyper.patience:
                logger.info("early stop at epoch %d (best val %.4f)", epoch, best_val)
                break
    model.load_state_dict(best_state)
    model.eval()
    return model


@dataclass
class DecodeResult:
    """One decoded hypothesis."""

    tokens: list[str]
    token_ids: list[int]
    logprob: float


def beam_decode(
    model,
    src_tokens: Sequence[str],
    beam: int = 5,
    max_len: int | None = None,
    banned_tokens: Sequence[str] | None = None,
) -> DecodeResult:
    """Beam-search decode for one source sequence.

    Hypotheses are ranked by raw sequence log-probability (no length
    normalization) and stop at EOS or max_len. beam=1 is greedy decoding.
    PAD, BOS, and the template control tokens never appear in the output.

    Args:
        model: object exposing cfg, vocab, encode, decode_logits.
        src_tokens: source tokens.
        beam: beam width, at least 1.
        max_len: output length cap, defaults to the model's max_len.
        banned_tokens: extra surface tokens to exclude from the output.

    Returns:
        Best hypothesis with EOS stripped.
    """
    if beam < 1:
        raise ValueError("beam width must be >= 1")
    vocab = model.vocab
    if vocab is None:
        raise ValueError("beam_decode needs a model built with a vocabulary")
    limit = min(max_len or model.cfg.max_len, model.cfg.max_len) - 1
    banned_ids = {vocab.pad_id, vocab.bos_id, vocab.mask_id, vocab.star_id, vocab.sep_id, vocab.ctx_id}
    for token in banned_tokens or ():
        if token in vocab.token_to_id:
            banned_ids.add(vocab.token_to_id[token])
    banned_ids.discard(vocab.eos_id)

    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    with torch.no_grad():
        src_ids = torch.tensor([vocab.encode(src_tokens)[: model.cfg.max_len]], dtype=torch.long)
        memory = model.encode(src_ids, vocab.pad_id)
        # (prefix ids incl BOS, cumulative logprob)
        alive: list[tuple[list[int], float]] = [([vocab.bos_id], 0.0)]
        finished: list[tuple[list[int], float]] = []
        for step in range(limit):
            if not alive:
                break
            tgt = torch.tensor([p for p, _ in alive], dtype=torch.long)
            mem = memory.expand(len(alive), -1, -1)
            src = src_ids.expand(len(alive), -1)
            logits = model.decode_logits(mem, src, tgt, vocab.pad_id)[:, -1, :]
            logits[:, sorted(banned_ids)] = float("-inf")
            if step == 0:
                # An immediate stop would decode to nothing; force one token.
                logits[:, vocab.eos_id] = float("-inf")
            logprobs = torch.log_softmax(logits, dim=-1)
            candidates: list[tuple[list[int], float]] = []
            for (prefix, score), row in zip(alive, logprobs):
                top = torch.topk(row, min(beam, row.shape[-1]))
                for token_id, lp in zip(top.indices.tolist(), top.values.tolist()):
                    candidates.append((prefix + [token_id], score + lp))
            candidates.sort(key=lambda item: -item[1])
            alive = []
            for prefix, score in candidates:
                if prefix[-1] == vocab.eos_id:
                    finished.append((prefix, score))
                elif len(alive) < beam:
                    alive.append((prefix, score))
                if len(alive) >= beam:
                    break
        pool = finished if finished else alive
        ids, logprob = max(pool, key=lambda item: item[1])
    if was_training and hasattr(model, "train"):
        model.train()
    out_ids = [i for i in ids[1:] if i != vocab.eos_id]
    return DecodeResult(tokens=vocab.decode(out_ids), token_ids=out_ids, logprob=logprob)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_KIND_CLASSES = {"seq2seq": Seq2SeqModel, "encoder": TokenEncoder}


def save_checkpoint(model: nn.Module, path: str | Path, kind: str, meta: dict | None = None) -> None:
    """Serialize a model with its config, vocabulary, and format version."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": kind,
        "config": asdict(model.cfg),
        "vocab_tokens": list(model.vocab.tokens) if model.vocab is not None else None,
        "state": model.state_dict(),
        "meta": meta or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_payload(path: str | Path, kind: str | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as err:
        raise CheckpointError(f"unreadable checkpoint {path}: {err}") from err
    if not isinstance(payload, dict) or "format" not in payload:
        raise CheckpointError(f"not a model checkpoint: {path}")
    if payload["format"] != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"checkpoint format {payload['format']} unsupported (expected {CHECKPOINT_FORMAT})"
        )
    if kind is not None and payload["kind"] != kind:
        raise CheckpointError(f"checkpoint kind {payload['kind']!r}, expected {kind!r}")
    return payload


def load_checkpoint(
    path: str | Path, kind: str | None = None, expect_vocab_size: int | None = None
) -> nn.Module:
    """Rebuild a saved model.

    Args:
        path: checkpoint file.
        kind: required checkpoint kind ("seq2seq" or "encoder").
        expect_vocab_size: when given, a mismatching stored vocabulary size
            raises instead of silently loading.

    Returns:
        The reconstructed model in eval mode.
    """
    payload = load_payload(path, kind)
    cfg = ModelConfig(**payload["config"])
    if expect_vocab_size is not None and cfg.vocab_size != expect_vocab_size:
        raise CheckpointError(
            f"checkpoint vocab_size {cfg.vocab_size} != expected {expect_vocab_size}"
        )
    vocab = Vocabulary(tokens=payload["vocab_tokens"]) if payload["vocab_tokens"] else None
    cls = _KIND_CLASSES[payload["kind"]]
    model = cls(cfg, vocab)
    model.load_state_dict(payload["state"])
    model.eval()
    return model
