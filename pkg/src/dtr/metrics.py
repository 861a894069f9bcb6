"""Word-overlap and diversity metrics for generated dialogue responses.

All metrics operate on pre-tokenized sequences. Corpus-level numbers are
means over examples except Distinct-n, which pools n-grams over the corpus.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from math import exp
from pathlib import Path
from typing import Iterable, Mapping, Sequence

logger = logging.getLogger(__name__)


def _ngrams(tokens: Sequence[str], n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def unigram_f1(hyp: Sequence[str], ref: Sequence[str]) -> float:
    """Clipped unigram overlap F1 between a hypothesis and a reference.

    Args:
        hyp: hypothesis tokens.
        ref: reference tokens, must be non-empty.

    Returns:
        Harmonic mean of clipped precision and recall, 0.0 for an empty
        hypothesis or when there is no overlap.
    """
    if not ref:
        raise ValueError("unigram_f1: empty reference")
    if not hyp:
        return 0.0
    overlap = sum((Counter(hyp) & Counter(ref)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(hyp)
    recall = overlap / len(ref)
    return 2.0 * precision * recall / (precision + recall)


def bleu_n(hyp: Sequence[str], ref: Sequence[str], n: int) -> float:
    """Sentence-level BLEU-n: clipped n-gram precision with brevity penalty.

    The penalty exp(1 - |ref|/|hyp|) applies when the hypothesis is shorter
    than the reference. Zero n-gram matches fall back to add-1 smoothing for
    n >= 2 and to a hard zero for n = 1. A hypothesis shorter than n scores 0.

    Args:
        hyp: hypothesis tokens.
        ref: reference tokens, must be non-empty.
        n: n-gram order, 1 or 2 in this pipeline.

    Returns:
        BLEU-n in [0, 1].
    """
    if not ref:
        raise ValueError("bleu_n: empty reference")
    if n < 1:
        raise ValueError(f"bleu_n: bad order {n}")
    if len(hyp) < n:
        return 0.0
    hyp_counts = Counter(_ngrams(hyp, n))
    ref_counts = Counter(_ngrams(ref, n))
    matches = sum((hyp_counts & ref_counts).values())
    total = sum(hyp_counts.values())
    if matches == 0:
        if n == 1:
            return 0.0
        precision = (matches + 1) / (total + 1)
    else:
        precision = matches / total
    brevity = exp(1.0 - len(ref) / len(hyp)) if len(hyp) < len(ref) else 1.0
    return brevity * precision


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    # Iterative DP over one row; the test oracle recomputes this recursively.
    if not a or not b:
        return 0
    row = [0] * (len(b) + 1)
    for tok_a in a:
        prev_diag = 0
        for j, tok_b in enumerate(b, start=1):
            prev_row = row[j]
            if tok_a == tok_b:
                row[j] = prev_diag + 1
            elif row[j - 1] > row[j]:
                row[j] = row[j - 1]
            prev_diag = prev_row
    return row[len(b)]


def rouge_l(hyp: Sequence[str], ref: Sequence[str]) -> float:
    """ROUGE-L F1 (harmonic mean of LCS precision and recall).

    Args:
        hyp: hypothesis tokens.
        ref: reference tokens, must be non-empty.

    Returns:
        ROUGE-L F-measure in [0, 1].
    """
    if not ref:
        raise ValueError("rouge_l: empty reference")
    if not hyp:
        return 0.0
    lcs = _lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(hyp)
    recall = lcs / len(ref)
    return 2.0 * precision * recall / (precision + recall)


def distinct_n(corpus: Iterable[Sequence[str]], n: int) -> float:
    """Distinct-n over a corpus: unique n-grams / total n-grams, pooled.

    Sequences shorter than n contribute nothing. An empty pool yields 0.0.
    """
    seen: set[tuple[str, ...]] = set()
    total = 0
    for tokens in corpus:
        grams = _ngrams(tokens, n)
        total += len(grams)
        seen.update(grams)
    if total == 0:
        return 0.0
    return len(seen) / total


def inner_distinct_n(groups: Iterable[Sequence[Sequence[str]]], n: int) -> float:
    """Mean pooled Distinct-n over per-example groups of styled responses.

    Each group holds the responses generated for one example, one per style,
    and must contain exactly 3 of them. Pooling within the group rewards
    cross-style lexical divergence on the same example.
    """
    values = []
    for idx, group in enumerate(groups):
        if len(group) != 3:
            raise ValueError(
                f"inner_distinct_n: group {idx} has {len(group)} responses, expected 3"
            )
        values.append(distinct_n(group, n))
    if not values:
        raise ValueError("inner_distinct_n: no groups")
    return sum(values) / len(values)


def average_length(corpus: Iterable[Sequence[str]]) -> float:
    lengths = [len(tokens) for tokens in corpus]
    if not lengths:
        raise ValueError("average_length: empty corpus")
    return sum(lengths) / len(lengths)


@dataclass
class EvalReport:
    """Corpus-level evaluation of one generation run."""

    style_intensity: float | None
    f1: float
    bleu1: float
    bleu2: float
    rouge_l: float
    distinct1: float
    distinct2: float
    inner_distinct1: float | None
    inner_distinct2: float | None
    avg_len: float
    f1_generator: float
    f1_drop: float
    f1_drop_rel: float
    sim_mean: float | None
    n_examples: int
    per_style: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    def table(self) -> str:
        """Fixed-width summary table, one row per style plus an overall row."""
        cols = [
            ("Intensity", "style_intensity"),
            ("F1", "f1"),
            ("B-1", "bleu1"),
            ("B-2", "bleu2"),
            ("R", "rouge_l"),
            ("D-1", "distinct1"),
            ("D-2", "distinct2"),
            ("iD-1", "inner_distinct1"),
            ("iD-2", "inner_distinct2"),
            ("AvgLen", "avg_len"),
        ]
        header = f"{'style':<10}" + "".join(f"{name:>10}" for name, _ in cols)
        lines = [header]

        def fmt(value: float | None) -> str:
            return f"{value:>10.4f}" if value is not None else f"{'-':>10}"

        rows: list[tuple[str, Mapping[str, float | None]]] = [
            (style, stats) for style, stats in sorted(self.per_style.items())
        ]
        rows.append(("all", self.__dict__))
        for label, stats in rows:
            lines.append(f"{label:<10}" + "".join(fmt(stats.get(key)) for _, key in cols))
        lines.append(
            f"F1 drop vs generator: {self.f1_drop:.4f} "
            f"({100.0 * self.f1_drop_rel:.1f}% relative)"
        )
        return "\n".join(lines)


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values) if values else 0.0


def evaluate_run(
    predictions: Sequence[Mapping] | str | Path,
    references: Mapping[str, Sequence[str]],
    classifiers: Mapping[str, "object"] | None = None,
    table: Mapping[str, "object"] | None = None,
) -> EvalReport:
    """Score one generation run against reference responses.

    Args:
        predictions: rows with id, style, generator_response, styled_response
            token lists, or a path to a JSONL file of such rows.
        references: example id to reference response tokens.
        classifiers: optional style name to trained style classifier, enables
            the style intensity column.
        table: optional embedding table, enables the mean semantic similarity
            diagnostic between styled outputs and references.

    Returns:
        EvalReport with corpus metrics, a per-style breakdown, and the
        grounding drop of styled outputs relative to raw generator outputs.
    """
    if isinstance(predictions, (str, Path)):
        rows = []
        with open(predictions, encoding="utf-8") as handle:
            for line in handle:
                line = line.strip()
                if line:
                    rows.append(json.loads(line))
    else:
        rows = list(predictions)
    if not rows:
        raise ValueError("evaluate_run: no predictions")

    by_style: dict[str, list[dict]] = {}
    for row in rows:
        missing = {"id", "style", "generator_response", "styled_response"} - set(row)
        if missing:
            raise ValueError(f"evaluate_run: prediction missing fields {sorted(missing)}")
        if row["id"] not in references:
            raise ValueError(f"evaluate_run: no reference for example {row['id']!r}")
        by_style.setdefault(row["style"], []).append(dict(row))

    def ref_of(row: Mapping) -> list[str]:
        ref = references[row["id"]]
        return list(ref.split()) if isinstance(ref, str) else list(ref)

    per_style: dict[str, dict[str, float]] = {}
    styled_f1s: list[float] = []
    gen_f1s: list[float] = []
    all_scores: dict[str, list[float]] = {"f1": [], "bleu1": [], "bleu2": [], "rouge_l": []}
    sims: list[float] = []
    for style, style_rows in sorted(by_style.items()):
        scores: dict[str, list[float]] = {"f1": [], "bleu1": [], "bleu2": [], "rouge_l": []}
        gen_scores: list[float] = []
        outputs = []
        for row in style_rows:
            hyp = list(row["styled_response"])
            ref = ref_of(row)
            outputs.append(hyp)
            scores["f1"].append(unigram_f1(hyp, ref))
            scores["bleu1"].append(bleu_n(hyp, ref, 1))
            scores["bleu2"].append(bleu_n(hyp, ref, 2))
            scores["rouge_l"].append(rouge_l(hyp, ref))
            gen_scores.append(unigram_f1(list(row["generator_response"]), ref))
            if table is not None:
                from .rewards import semantic_similarity

                sims.append(semantic_similarity(hyp, ref, table))
        entry = {key: _mean(vals) for key, vals in scores.items()}
        entry["f1_generator"] = _mean(gen_scores)
        entry["distinct1"] = distinct_n(outputs, 1)
        entry["distinct2"] = distinct_n(outputs, 2)
        entry["avg_len"] = average_length(outputs)
        if classifiers is not None and style in classifiers:
            from .rewards import style_intensity

            entry["style_intensity"] = _mean(
                [style_intensity(classifiers[style], toks) for toks in outputs]
            )
        per_style[style] = entry
        styled_f1s.extend(scores["f1"])
        gen_f1s.extend(gen_scores)
        for key in all_scores:
            all_scores[key].extend(scores[key])

    styles = sorted(by_style)
    inner1 = inner2 = None
    if len(styles) == 3:
        grouped: dict[str, dict[str, list[str]]] = {}
        for style, style_rows in by_style.items():
            for row in style_rows:
                grouped.setdefault(row["id"], {})[style] = list(row["styled_response"])
        groups = [
            [members[s] for s in styles]
            for members in grouped.values()
            if len(members) == 3
        ]
        if groups:
            inner1 = inner_distinct_n(groups, 1)
            inner2 = inner_distinct_n(groups, 2)
    else:
        logger.info("evaluate_run: %d styles present, inner-distinct skipped", len(styles))

    all_outputs = [list(row["styled_response"]) for row in rows]
    intensity_values = [
        per_style[s]["style_intensity"] for s in styles if "style_intensity" in per_style[s]
    ]
    f1_all = _mean(styled_f1s)
    f1_gen = _mean(gen_f1s)
    drop = f1_gen - f1_all
    return EvalReport(
        style_intensity=_mean(intensity_values) if intensity_values else None,
        f1=f1_all,
        bleu1=_mean(all_scores["bleu1"]),
        bleu2=_mean(all_scores["bleu2"]),
        rouge_l=_mean(all_scores["rouge_l"]),
        distinct1=distinct_n(all_outputs, 1),
        distinct2=distinct_n(all_outputs, 2),
        inner_distinct1=inner1,
        inner_distinct2=inner2,
        avg_len=average_length(all_outputs),
        f1_generator=f1_gen,
        f1_drop=drop,
        f1_drop_rel=drop / f1_gen if f1_gen > 0 else 0.0,
        sim_mean=_mean(sims) if sims else None,
        n_examples=len(rows),
        per_style=per_style,
    )
