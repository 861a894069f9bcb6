"""Template-to-sentence rewriting.

The rewriter is a sequence-to-sequence model trained per style: it reads a
sentence whose stylistic spans were blanked and regenerates the full
sentence, filling the blanks in its target style. Control tokens never
appear in its output.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

from .corpus import Vocabulary
from .disentangler import TemplatePair
from .seq2seq import ModelConfig, Seq2SeqModel, TrainHyper, beam_decode, train_seq2seq

logger = logging.getLogger(__name__)


@dataclass
class StyledResponse:
    """One rewritten response with its decode score."""

    tokens: list[str]
    logprob: float


def train_rewriter(
    pairs: Sequence[TemplatePair],
    cfg: ModelConfig,
    hyper: TrainHyper,
    vocab: Vocabulary,
) -> Seq2SeqModel:
    """Train a rewriter on (blanked surface, original sentence) pairs.

    Args:
        pairs: template corpus for one style; must be non-empty.
        cfg: architecture.
        hyper: optimization settings.
        vocab: shared token inventory.

    Returns:
        Trained sequence model, early-stopped on mean sequence NLL of a
        held-out slice.
    """
    if not pairs:
        raise ValueError("train_rewriter: no template pairs")
    return train_seq2seq(
        [(list(p.template), list(p.target)) for p in pairs], cfg, hyper, vocab
    )


def rewrite(
    model: Seq2SeqModel,
    template: Sequence[str],
    beam: int = 5,
    max_len: int | None = None,
) -> StyledResponse:
    """Regenerate a full styled sentence from a blanked template.

    Args:
        model: trained rewriter.
        template: template surface tokens (may contain blank tags).
        beam: beam width; 1 decodes greedily.
        max_len: output cap, defaulting to the model limit.

    Returns:
        StyledResponse; the output never contains control tokens.
    """
    if not template:
        raise ValueError("rewrite: empty template")
    result = beam_decode(model, template, beam=beam, max_len=max_len)
    return StyledResponse(tokens=result.tokens, logprob=result.logprob)
