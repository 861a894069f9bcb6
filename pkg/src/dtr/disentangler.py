"""Token-level style scoring and template extraction.

A response token's score says how much it carries style rather than
content. Scores come from two sigmoid heads: one over a response-only
encoder (trained with weak supervision from a style denoiser) and one over
a response-plus-context-plus-knowledge encoder (trained later by policy
gradient). The top-scored fraction of tokens is blanked into a template.

Weak supervision: a denoising autoencoder is trained on one half of the
style corpus; on the other half, each token is masked in turn and
reconstructed, and tokens that reconstruct closely (in embedding space) are
treated as more stylistic. Token pairs ranked by that distance train the
response-only head with a margin ranking loss.
"""

from __future__ import annotations

import hashlib
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import torch
import torch.nn as nn

from .corpus import MASK, STAR, StyleSentence, Vocabulary
from .rewards import EmbeddingTable
from .seq2seq import (
    ModelConfig,
    Seq2SeqModel,
    TokenEncoder,
    TrainHyper,
    init_parameters,
    load_payload,
    train_seq2seq,
)

logger = logging.getLogger(__name__)


@dataclass
class TokenScores:
    """Per-token style scores for one response."""

    tokens: list[str]
    alpha: list[float]
    beta: list[float] | None

    @property
    def scores(self) -> list[float]:
        if self.beta is None:
            return list(self.alpha)
        return [a + b for a, b in zip(self.alpha, self.beta)]


@dataclass
class Template:
    """A response with its most stylistic spans blanked out."""

    source_tokens: list[str]
    actions: list[int]
    surface: list[str]
    pr: float


@dataclass
class RankTriple:
    """One weak-supervision comparison: token i vs token j of a sentence."""

    sentence_id: str
    i: int
    j: int
    y: int


class Disentangler(nn.Module):
    """Dual-encoder token scorer.

    The response-only head exists from construction; the grounded head is
    absent until ensure_grounded_head() creates it (zero projection, so the
    combined score starts exactly 0.5 above the response-only score).
    """

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, grounded_cfg: ModelConfig | None = None) -> None:
        super().__init__()
        self.cfg = cfg
        self.grounded_cfg = grounded_cfg
        self.vocab = vocab
        self.alpha_encoder = TokenEncoder(cfg, vocab)
        self.alpha_proj = nn.Linear(cfg.hidden, 1, bias=False)
        self.beta_encoder: TokenEncoder | None = None
        self.beta_proj: nn.Linear | None = None

    @property
    def has_grounded_head(self) -> bool:
        return self.beta_encoder is not None

    def ensure_grounded_head(self, seed: int = 0) -> None:
        """Create the grounded encoder with a zero-initialized projection."""
        if self.beta_encoder is not None:
            return
        cfg = self.grounded_cfg or self.cfg
        torch.manual_seed(seed)
        self.beta_encoder = TokenEncoder(cfg, self.vocab)
        init_parameters(self.beta_encoder)
        self.beta_proj = nn.Linear(cfg.hidden, 1, bias=False)
        nn.init.zeros_(self.beta_proj.weight)
        self.grounded_cfg = cfg

    def alpha_parameters(self) -> list[nn.Parameter]:
        return list(self.alpha_encoder.parameters()) + list(self.alpha_proj.parameters())

    def beta_parameters(self) -> list[nn.Parameter]:
        if self.beta_encoder is None:
            return []
        return list(self.beta_encoder.parameters()) + list(self.beta_proj.parameters())

    def set_stage(self, stage: str) -> None:
        """Freeze heads so exactly one side trains: "ws" or "rl"."""
        if stage not in ("ws", "rl"):
            raise ValueError(f"unknown stage {stage!r}")
        for param in self.alpha_parameters():
            param.requires_grad = stage == "ws"
        for param in self.beta_parameters():
            param.requires_grad = stage == "rl"

    def alpha_scores(self, ids: torch.Tensor) -> torch.Tensor:
        """Response-only scores, shape (batch, length), each in (0, 1)."""
        states = self.alpha_encoder(ids, self.vocab.pad_id)
        return torch.sigmoid(self.alpha_proj(states).squeeze(-1))

    def beta_scores(self, ids: torch.Tensor, response_len: int) -> torch.Tensor:
        """Grounded scores read at the leading response positions."""
        if self.beta_encoder is None:
            raise RuntimeError("grounded head not initialized")
        states = self.beta_encoder(ids, self.vocab.pad_id)
        return torch.sigmoid(self.beta_proj(states).squeeze(-1))[:, :response_len]


def grounded_input(
    vocab: Vocabulary,
    response: Sequence[str],
    context: Sequence[Sequence[str]] | None,
    knowledge: Sequence[Sequence[str]] | None,
) -> list[int]:
    """Id sequence for the grounded encoder: response, then context, then knowledge.

    The response occupies the leading positions so scores align with its
    tokens; separators delimit the appended conditioning segments.
    """
    ids = vocab.encode(response)
    for segment in (context or ()), (knowledge or ()):
        ids.append(vocab.sep_id)
        flat: list[str] = []
        for part in segment:
            if flat:
                flat.append("<sep>")
            flat.extend(part)
        ids.extend(vocab.encode(flat))
    return ids


def score_tokens(
    model: Disentangler,
    tokens: Sequence[str],
    context: Sequence[Sequence[str]] | None = None,
    knowledge: Sequence[Sequence[str]] | None = None,
) -> TokenScores:
    """Score one response's tokens (eval mode, no gradients).

    Args:
        model: trained scorer.
        tokens: response tokens, non-empty, at most the encoder max_len.
        context: optional dialogue context for the grounded head.
        knowledge: optional knowledge sentences for the grounded head.

    Returns:
        TokenScores; the grounded component is None until that head exists.
    """
    if not tokens:
        raise ValueError("score_tokens: empty input")
    if len(tokens) > model.cfg.max_len:
        logger.warning("score_tokens: truncating %d tokens to %d", len(tokens), model.cfg.max_len)
        tokens = list(tokens)[: model.cfg.max_len]
    was_training = model.training
    model.eval()
    with torch.no_grad():
        ids = torch.tensor([model.vocab.encode(tokens)])
        alpha = model.alpha_scores(ids)[0].tolist()
        beta = None
        if model.has_grounded_head:
            full = grounded_input(model.vocab, tokens, context, knowledge)
            full = full[: model.grounded_cfg.max_len]
            beta = model.beta_scores(torch.tensor([full]), len(tokens))[0].tolist()
    if was_training:
        model.train()
    return TokenScores(tokens=list(tokens), alpha=alpha, beta=beta)


def replace_count(length: int, pr: float) -> int:
    """Number of tokens to blank at replacement percentage pr."""
    if length < 1:
        raise ValueError("replace_count: empty sequence")
    if not 0.0 <= pr <= 100.0:
        raise ValueError(f"replace_count: pr {pr} outside [0, 100]")
    return max(1, int(math.floor(length * pr / 100.0)))


def template_surface(tokens: Sequence[str], actions: Sequence[int]) -> list[str]:
    """Collapse each maximal run of replaced positions into one blank tag."""
    surface: list[str] = []
    for token, action in zip(tokens, actions):
        if action:
            if not surface or surface[-1] != STAR:
                surface.append(STAR)
        else:
            surface.append(token)
    return surface


def extract_template(tokens: Sequence[str], scores: Sequence[float], pr: float) -> Template:
    """Blank the top-scored fraction of tokens into a template.

    Args:
        tokens: response tokens.
        scores: one style score per token.
        pr: replacement percentage in [0, 100].

    Returns:
        Template with per-token actions (1 = replaced) and the collapsed
        surface form. Score ties resolve to the leftmost position.
    """
    if len(tokens) != len(scores):
        raise ValueError("extract_template: tokens and scores length mismatch")
    k = replace_count(len(tokens), pr)
    ranked = sorted(range(len(tokens)), key=lambda i: (-scores[i], i))
    chosen = set(ranked[:k])
    actions = [1 if i in chosen else 0 for i in range(len(tokens))]
    return Template(
        source_tokens=list(tokens),
        actions=actions,
        surface=template_surface(tokens, actions),
        pr=pr,
    )


def template_from_actions(tokens: Sequence[str], actions: Sequence[int], pr: float = -1.0) -> Template:
    """Build a Template from explicit replace/retain actions."""
    if len(tokens) != len(actions):
        raise ValueError("template_from_actions: length mismatch")
    return Template(
        source_tokens=list(tokens),
        actions=[int(bool(a)) for a in actions],
        surface=template_surface(tokens, actions),
        pr=pr,
    )


# ---------------------------------------------------------------------------
# Weak supervision
# ---------------------------------------------------------------------------


def dae_mask_count(length: int, rate: float = 0.15) -> int:
    """Number of positions the denoiser corrupts in a sentence."""
    if length < 1:
        raise ValueError("dae_mask_count: empty sentence")
    return max(1, int(math.floor(length * rate)))


def corrupt_for_dae(tokens: list[str], rng: random.Random, rate: float = 0.15) -> list[str]:
    """Replace a random sample of positions with the mask token."""
    n_mask = dae_mask_count(len(tokens), rate)
    corrupted = list(tokens)
    for idx in rng.sample(range(len(tokens)), n_mask):
        corrupted[idx] = MASK
    return corrupted


def train_dae(
    sentences: Sequence[StyleSentence],
    cfg: ModelConfig,
    hyper: TrainHyper,
    vocab: Vocabulary,
    mask_rate: float = 0.15,
) -> Seq2SeqModel:
    """Train the style denoiser: reconstruct sentences from masked copies.

    Corruption is redrawn every epoch so the model sees many mask patterns.
    """
    if not sentences:
        raise ValueError("train_dae: no sentences")
    pairs = [(list(s.tokens), list(s.tokens)) for s in sentences]
    return train_seq2seq(
        pairs,
        cfg,
        hyper,
        vocab,
        source_transform=lambda src, rng: corrupt_for_dae(src, rng, mask_rate),
    )


def leave_one_out_distances(
    dae: Seq2SeqModel,
    tokens: Sequence[str],
    table: EmbeddingTable,
) -> list[float]:
    """Reconstruction distance per token under single-slot masking.

    Each position is masked in turn; the denoiser predicts the slot token
    with the true prefix teacher-forced. The distance is 0.0 for an exact
    match, 1 - cosine(embedding(true), embedding(predicted)) when both
    tokens have vectors, and 1.0 otherwise.

    Returns:
        One distance in [0, 2] per token.
    """
    if not tokens:
        raise ValueError("leave_one_out_distances: empty sentence")
    vocab = dae.vocab
    assert vocab is not None
    m = len(tokens)
    if m > dae.cfg.max_len - 2:
        raise ValueError(f"sentence length {m} exceeds denoiser max_len")
    base_ids = vocab.encode(tokens)
    src_rows = []
    for i in range(m):
        row = list(base_ids)
        row[i] = vocab.mask_id
        src_rows.append(row)
    src = torch.tensor(src_rows, dtype=torch.long)
    tgt_in = torch.tensor([[vocab.bos_id] + base_ids[:-1]] * m, dtype=torch.long)

    was_training = dae.training
    dae.eval()
    with torch.no_grad():
        logits = dae.decode_logits(dae.encode(src, vocab.pad_id), src, tgt_in, vocab.pad_id)
        # Row i predicts position i; word slots never hold control tokens.
        slot_logits = logits[torch.arange(m), torch.arange(m)]
        slot_logits[:, list(vocab.special_ids)] = float("-inf")
        predicted_ids = slot_logits.argmax(dim=-1).tolist()
    if was_training:
        dae.train()

    distances = []
    for true_tok, pred_id in zip(tokens, predicted_ids):
        pred_tok = vocab.tokens[pred_id]
        if pred_tok == true_tok:
            distances.append(0.0)
        elif true_tok in table and pred_tok in table:
            vec_t, vec_p = table[true_tok], table[pred_tok]
            norm = float((vec_t @ vec_t) ** 0.5 * (vec_p @ vec_p) ** 0.5)
            cos = float(vec_t @ vec_p) / norm if norm > 0 else 0.0
            distances.append(1.0 - cos)
        else:
            distances.append(1.0)
    return distances


def build_ranking_triples(
    sentences: Sequence[StyleSentence],
    distances: Mapping[str, Sequence[float]],
    z: int = 10,
    seed: int = 0,
) -> list[RankTriple]:
    """Sample per-sentence token pairs ordered by reconstruction distance.

    Args:
        sentences: ranking-half sentences.
        distances: sentence id to per-token distances.
        z: maximum pairs sampled per sentence.
        seed: sampling seed.

    Returns:
        Triples (sentence, i, j, y) with y = +1 iff token i reconstructs
        more closely than token j. Tied distances are never compared.
    """
    rng = random.Random(seed)
    triples: list[RankTriple] = []
    for sent in sentences:
        d = distances[sent.id]
        pairs = [
            (i, j)
            for i in range(len(d))
            for j in range(i + 1, len(d))
            if d[i] != d[j]
        ]
        if len(pairs) > z:
            pairs = rng.sample(pairs, z)
        for i, j in pairs:
            triples.append(
                RankTriple(sentence_id=sent.id, i=i, j=j, y=1 if d[i] < d[j] else -1)
            )
    return triples


def ranking_loss(x_i, x_j, y: int, mu: float):
    """Margin ranking hinge: max(0, -y * (x_i - x_j) + mu).

    Accepts floats or tensors; y = +1 demands x_i to exceed x_j by mu.
    """
    margin = -y * (x_i - x_j) + mu
    if torch.is_tensor(margin):
        return torch.relu(margin)
    return max(0.0, margin)


def train_disentangler_ws(
    triples: Sequence[RankTriple],
    sentences: Mapping[str, Sequence[str]],
    cfg: ModelConfig,
    hyper: TrainHyper,
    vocab: Vocabulary,
    mu: float = 0.2,
    grounded_cfg: ModelConfig | None = None,
) -> Disentangler:
    """Train the response-only scoring head on ranking triples.

    Args:
        triples: weak-supervision comparisons.
        sentences: sentence id to tokens for every referenced sentence.
        cfg: response-only encoder architecture.
        hyper: optimization settings.
        vocab: token inventory.
        mu: ranking margin.
        grounded_cfg: architecture reserved for the grounded head (created
            later, at policy-training time).

    Returns:
        Trained scorer with only the response-only head present.
    """
    if not triples:
        raise ValueError("train_disentangler_ws: no triples")
    torch.manual_seed(hyper.seed)
    model = Disentangler(cfg, vocab, grounded_cfg=grounded_cfg)
    init_parameters(model)
    nn.init.zeros_(model.alpha_proj.weight)
    model.set_stage("ws")
    optimizer = torch.optim.Adam(model.alpha_parameters(), lr=hyper.lr)

    triple_list = list(triples)
    rng = random.Random(hyper.seed ^ 0x3C3C3C)
    rng.shuffle(triple_list)
    n_val = max(1, int(len(triple_list) * hyper.val_fraction))
    val_triples, train_triples = triple_list[:n_val], triple_list[n_val:]
    if not train_triples:
        train_triples = val_triples

    sentence_ids = {t.sentence_id for t in triple_list}
    encoded = {sid: vocab.encode(sentences[sid])[: cfg.max_len] for sid in sentence_ids}

    def batch_loss(batch: Sequence[RankTriple]) -> torch.Tensor | None:
        sids = sorted({t.sentence_id for t in batch})
        rows = [encoded[sid] for sid in sids]
        width = max(len(r) for r in rows)
        ids = torch.tensor([r + [vocab.pad_id] * (width - len(r)) for r in rows])
        scores = model.alpha_scores(ids)
        row_of = {sid: k for k, sid in enumerate(sids)}
        losses = []
        for t in batch:
            row = scores[row_of[t.sentence_id]]
            if t.i >= len(encoded[t.sentence_id]) or t.j >= len(encoded[t.sentence_id]):
                continue
            losses.append(ranking_loss(row[t.i], row[t.j], t.y, mu))
        if not losses:
            return None
        return torch.stack(losses).mean()

    def val_loss_value() -> float:
        model.eval()
        with torch.no_grad():
            chunks = [
                batch_loss(val_triples[k : k + 256])
                for k in range(0, len(val_triples), 256)
            ]
        model.train()
        values = [float(c) for c in chunks if c is not None]
        return sum(values) / len(values) if values else float("inf")

    best_val = float("inf")
    best_state = {k: v.clone() for k, v in model.state_dict().items()}
    stale = 0
    batch_size = 128
    for epoch in range(hyper.max_epochs):
        random.Random((hyper.seed << 8) ^ epoch).shuffle(train_triples)
        model.train()
        for k in range(0, len(train_triples), batch_size):
            loss = batch_loss(train_triples[k : k + batch_size])
            if loss is None:
                continue
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.alpha_parameters(), hyper.clip)
            optimizer.step()
        val = val_loss_value()
        logger.info("disentangler epoch %d: val ranking loss %.4f", epoch, val)
        if val < best_val - 1e-6:
            best_val = val
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
            stale = 0
        else:
            stale += 1
            if stale > hyper.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return model


def score_sentences_alpha(
    model: Disentangler, sentence_tokens: Sequence[Sequence[str]]
) -> list[list[float]]:
    """Batch response-only scores for many sentences (eval, no grad)."""
    was_training = model.training
    model.eval()
    out: list[list[float]] = []
    with torch.no_grad():
        for start in range(0, len(sentence_tokens), 128):
            chunk = sentence_tokens[start : start + 128]
            rows = [model.vocab.encode(toks)[: model.cfg.max_len] for toks in chunk]
            width = max(len(r) for r in rows)
            ids = torch.tensor([r + [model.vocab.pad_id] * (width - len(r)) for r in rows])
            scores = model.alpha_scores(ids)
            for row, toks in zip(scores, rows):
                out.append(row[: len(toks)].tolist())
    if was_training:
        model.train()
    return out


@dataclass
class TemplatePair:
    """Training pair for the rewriter: blanked surface to original sentence."""

    id: str
    template: list[str]
    target: list[str]
    actions: list[int]


def build_template_corpus(
    model: Disentangler,
    sentences: Sequence[StyleSentence],
    pr: float = 25.0,
) -> list[TemplatePair]:
    """Blank every style sentence into a rewriter training pair."""
    if not sentences:
        raise ValueError("build_template_corpus: no sentences")
    scores = score_sentences_alpha(model, [s.tokens for s in sentences])
    pairs = []
    for sent, sent_scores in zip(sentences, scores):
        tokens = sent.tokens[: len(sent_scores)]
        template = extract_template(tokens, sent_scores, pr)
        pairs.append(
            TemplatePair(
                id=sent.id,
                template=template.surface,
                target=list(tokens),
                actions=template.actions,
            )
        )
    return pairs


def parameter_hashes(module: nn.Module) -> dict[str, str]:
    """Stable digest per parameter tensor, for freeze-contract checks."""
    return {
        name: hashlib.sha256(param.detach().cpu().numpy().tobytes()).hexdigest()
        for name, param in module.named_parameters()
    }


def save_disentangler(model: Disentangler, path: str | Path, meta: dict | None = None) -> None:
    from dataclasses import asdict

    payload_meta = {
        "has_grounded_head": model.has_grounded_head,
        "grounded_config": asdict(model.grounded_cfg) if model.grounded_cfg else None,
    }
    payload_meta.update(meta or {})
    from .seq2seq import save_checkpoint

    save_checkpoint(model, path, kind="disentangler", meta=payload_meta)


def load_disentangler(path: str | Path, expect_vocab_size: int | None = None) -> Disentangler:
    payload = load_payload(path, kind="disentangler")
    cfg = ModelConfig(**payload["config"])
    if expect_vocab_size is not None and cfg.vocab_size != expect_vocab_size:
        from .seq2seq import CheckpointError

        raise CheckpointError(
            f"checkpoint vocab_size {cfg.vocab_size} != expected {expect_vocab_size}"
        )
    vocab = Vocabulary(tokens=payload["vocab_tokens"])
    grounded_cfg = (
        ModelConfig(**payload["meta"]["grounded_config"])
        if payload["meta"].get("grounded_config")
        else None
    )
    model = Disentangler(cfg, vocab, grounded_cfg=grounded_cfg)
    if payload["meta"].get("has_grounded_head"):
        model.ensure_grounded_head()
    model.load_state_dict(payload["state"])
    model.eval()
    return model
