"""Corpora, tokenization, and vocabulary for the rewriting pipeline.

Two corpus kinds feed the pipeline: a knowledge-grounded dialogue corpus
(context utterances, knowledge candidates, reference response) and one
style corpus per target style. Both load from JSONL. A deterministic
synthetic generator provides desk-scale corpora for tests and demos.
"""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .metrics import bleu_n

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
MASK, STAR, SEP, CTX = "<mask>", "[*]", "<sep>", "<ctx>"
SPECIAL_TOKENS = (PAD, BOS, EOS, UNK, MASK, STAR, SEP, CTX)

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^a-z0-9\s]")


class CorpusError(Exception):
    """A corpus file is missing, unreadable, or yields no usable examples."""


def tokenize(text: str) -> list[str]:
    """Lowercase word-level tokenization with punctuation split off.

    Args:
        text: raw utterance text.

    Returns:
        Tokens; every punctuation character becomes its own token.
    """
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: Sequence[str]) -> str:
    """Inverse-ish of tokenize: space-join (round-trips token identity)."""
    return " ".join(tokens)


@dataclass
class Vocabulary:
    """Token inventory with the 8 control tokens pinned at ids 0..7."""

    tokens: list[str]
    token_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if tuple(self.tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("Vocabulary must start with the control tokens")
        self.token_to_id = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise ValueError("Vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def unk_id(self) -> int:
        return 3

    @property
    def mask_id(self) -> int:
        return 4

    @property
    def star_id(self) -> int:
        return 5

    @property
    def sep_id(self) -> int:
        return 6

    @property
    def ctx_id(self) -> int:
        return 7

    @property
    def special_ids(self) -> tuple[int, ...]:
        return tuple(range(len(SPECIAL_TOKENS)))

    def encode(self, tokens: Sequence[str]) -> list[int]:
        unk = self.unk_id
        return [self.token_to_id.get(tok, unk) for tok in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps({"tokens": self.tokens}, indent=0, sort_keys=True),
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(tokens=list(data["tokens"]))


def build_vocab(corpora: Iterable[Sequence[str]], min_count: int = 1) -> Vocabulary:
    """Build a vocabulary over token sequences.

    Args:
        corpora: token sequences; every sequence contributes counts.
        min_count: minimum frequency for a token to receive an id.

    Returns:
        Vocabulary with control tokens first, then tokens ordered by
        descending frequency with ties broken alphabetically.
    """
    from collections import Counter

    counts: Counter[str] = Counter()
    for tokens in corpora:
        counts.update(tokens)
    for special in SPECIAL_TOKENS:
        counts.pop(special, None)
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_count),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocabulary(tokens=list(SPECIAL_TOKENS) + kept)


@dataclass
class DialogueExample:
    """One grounded dialogue turn: context, knowledge candidates, response."""

    id: str
    context: list[list[str]]
    knowledge: list[list[str]]
    response: list[str]


def generator_source(
    context: Sequence[Sequence[str]], knowledge: Sequence[Sequence[str]]
) -> list[str]:
    """Flatten knowledge and context into one generator input sequence.

    Knowledge sentences come first (joined by the separator token), then a
    context marker, then the dialogue context oldest-to-newest.
    """
    source: list[str] = []
    for i, sent in enumerate(knowledge):
        if i:
            source.append(SEP)
        source.extend(sent)
    source.append(CTX)
    for i, utt in enumerate(context):
        if i:
            source.append(SEP)
        source.extend(utt)
    return source


@dataclass
class StyleSentence:
    """One sentence of a style corpus."""

    id: str
    tokens: list[str]
    style: str


@dataclass
class CorpusSplit:
    """Deterministic train/valid/test partition of a corpus."""

    train: list
    valid: list
    test: list


DEFAULT_STYLES = ("positive", "negative", "polite")


def _read_jsonl(path: str | Path, diagnostics: list[str]) -> list[tuple[int, dict]]:
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus file not found: {path}")
    rows: list[tuple[int, dict]] = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as err:
                diagnostics.append(f"{path.name}:{lineno}: malformed JSON ({err.msg})")
                continue
            if not isinstance(row, dict):
                diagnostics.append(f"{path.name}:{lineno}: line is not an object")
                continue
            rows.append((lineno, row))
    return rows


def select_knowledge_top1(candidates: Sequence[Sequence[str]], response: Sequence[str]) -> int:
    """Pick the knowledge candidate with the highest BLEU-1 against the response.

    Args:
        candidates: tokenized knowledge sentences, non-empty.
        response: tokenized reference response.

    Returns:
        Index of the best candidate; ties resolve to the lowest index.
    """
    if not candidates:
        raise ValueError("select_knowledge_top1: no candidates")
    best_idx, best_score = 0, -1.0
    for idx, cand in enumerate(candidates):
        score = bleu_n(cand, response, 1)
        if score > best_score:
            best_idx, best_score = idx, score
    return best_idx


def load_dialogue_corpus(
    path: str | Path,
    select_top1: bool = False,
    diagnostics: list[str] | None = None,
) -> list[DialogueExample]:
    """Load a dialogue corpus from JSONL.

    Each line needs id, context (list of utterance strings), knowledge
    (list of sentence strings), and response (string). Bad lines are
    skipped and reported through the diagnostics list.

    Args:
        path: JSONL file.
        select_top1: reduce knowledge to the single best candidate by
            BLEU-1 against the response at load time.
        diagnostics: optional sink for per-line rejection messages.

    Returns:
        Parsed examples, in file order.
    """
    diags = diagnostics if diagnostics is not None else []
    examples: list[DialogueExample] = []
    for lineno, row in _read_jsonl(path, diags):
        missing = [key for key in ("id", "context", "knowledge", "response") if key not in row]
        if missing:
            diags.append(f"{Path(path).name}:{lineno}: missing field {missing[0]!r}")
            continue
        response = tokenize(row["response"]) if isinstance(row["response"], str) else list(row["response"])
        knowledge = [
            tokenize(k) if isinstance(k, str) else list(k) for k in row["knowledge"]
        ]
        context = [tokenize(u) if isinstance(u, str) else list(u) for u in row["context"]]
        if not response or not knowledge or not all(knowledge):
            diags.append(f"{Path(path).name}:{lineno}: empty response or knowledge")
            continue
        if select_top1:
            knowledge = [knowledge[select_knowledge_top1(knowledge, response)]]
        examples.append(
            DialogueExample(id=str(row["id"]), context=context, knowledge=knowledge, response=response)
        )
    for message in diags:
        logger.warning("dialogue corpus: %s", message)
    if not examples:
        raise CorpusError(f"no usable examples in {path}")
    return examples


def load_style_corpus(
    path: str | Path,
    allowed_styles: Sequence[str] = DEFAULT_STYLES,
    diagnostics: list[str] | None = None,
) -> list[StyleSentence]:
    """Load a style corpus from JSONL (id, text, style per line)."""
    diags = diagnostics if diagnostics is not None else []
    sentences: list[StyleSentence] = []
    allowed = set(allowed_styles)
    for lineno, row in _read_jsonl(path, diags):
        missing = [key for key in ("id", "text", "style") if key not in row]
        if missing:
            diags.append(f"{Path(path).name}:{lineno}: missing field {missing[0]!r}")
            continue
        if row["style"] not in allowed:
            diags.append(f"{Path(path).name}:{lineno}: unknown style label {row['style']!r}")
            continue
        tokens = tokenize(row["text"]) if isinstance(row["text"], str) else list(row["text"])
        if not tokens:
            diags.append(f"{Path(path).name}:{lineno}: empty text")
            continue
        sentences.append(StyleSentence(id=str(row["id"]), tokens=tokens, style=row["style"]))
    for message in diags:
        logger.warning("style corpus: %s", message)
    if not sentences:
        raise CorpusError(f"no usable sentences in {path}")
    return sentences


def split_style_corpus(
    sentences: Sequence[StyleSentence], seed: int, p: float = 0.5
) -> tuple[list[StyleSentence], list[StyleSentence]]:
    """Randomly split a style corpus into a denoiser half and a ranking half.

    Each sentence lands in the first half with probability p, decided by a
    dedicated RNG so the split is reproducible from the seed alone.
    """
    rng = random.Random(seed)
    first: list[StyleSentence] = []
    second: list[StyleSentence] = []
    for sent in sentences:
        (first if rng.random() < p else second).append(sent)
    return first, second


def split_examples(items: Sequence, seed: int, train: float = 0.8, valid: float = 0.1) -> CorpusSplit:
    """Shuffle items with the seed and cut train/valid/test slices."""
    if not 0.0 < train < 1.0 or not 0.0 <= valid < 1.0 or train + valid >= 1.0:
        raise ValueError(f"bad split ratios train={train} valid={valid}")
    order = list(items)
    random.Random(seed).shuffle(order)
    n_train = max(1, int(round(len(order) * train)))
    n_valid = max(1, int(round(len(order) * valid)))
    if n_train + n_valid >= len(order):
        n_train = max(1, len(order) - n_valid - 1)
    return CorpusSplit(
        train=order[:n_train],
        valid=order[n_train : n_train + n_valid],
        test=order[n_train + n_valid :],
    )


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------
# The synthetic world uses a small slot grammar shared by knowledge sentences,
# dialogue responses, and style-sentence cores, so every dialogue token is in
# distribution for models trained on style corpora. Style markers come in
# fixed (opener, closer) pairs and every style sentence carries both: with
# one marker masked, the other determines it exactly, which makes markers
# maximally easy to reconstruct. Every other slot, final punctuation
# included, samples independently among several alternatives, so non-marker
# tokens are never certain.

_NOUNS = (
    "pizza cheese butter salad bread soup tea coffee football archery tennis "
    "chess garden forest river mountain camera guitar piano novel museum "
    "castle market harbor"
).split()
_ADJS = (
    "fresh crisp warm cold salty sweet plain round quiet busy bright dark "
    "smooth rough ancient modern"
).split()
_DETS = ("the", "this", "that", "my")
_VERBS = ("is", "was", "seems", "looks")
_CONNS = ("well", "anyway", "so", "right")
_MADE = ("made", "built", "crafted", "shaped")
_OFROM = ("of", "from", "using", "with")
_HAS = ("has", "holds", "keeps", "shows")
_AONE = ("a", "one", "some", "another")
_INSIDE = ("inside", "within", "nearby", "upstairs")
_ANDS = ("and", "plus", "also", "besides")
_PUNCTS = (".", "!", "?", ";")
_GREETINGS = ("hello there .", "good day friend .", "nice to meet you .")
_QUESTIONS = (
    "tell me about the {noun} .",
    "do you know about the {noun} ?",
    "what do you say about the {noun} ?",
)

MARKER_PAIRS: dict[str, tuple[tuple[str, str], ...]] = {
    "positive": (
        ("wonderful", "amazing"),
        ("fantastic", "brilliant"),
        ("lovely", "superb"),
        ("delightful", "terrific"),
    ),
    "negative": (
        ("awful", "dreadful"),
        ("terrible", "horrid"),
        ("lousy", "rotten"),
        ("miserable", "gloomy"),
    ),
    "polite": (
        ("kindly", "respectfully"),
        ("gladly", "graciously"),
        ("humbly", "cordially"),
        ("politely", "courteously"),
    ),
}


@dataclass
class SynthCorpus:
    """Deterministic synthetic corpora plus gold style-marker annotations.

    The gold sidecar exists for tests and reports only; no training stage
    reads it.
    """

    dialogues: list[DialogueExample]
    styles: dict[str, list[StyleSentence]]
    gold: dict


def _core(rng: random.Random) -> tuple[list[str], str]:
    """One content core: (tokens, subject noun)."""
    noun = rng.choice(_NOUNS)
    kind = rng.choice(("made", "has"))
    if kind == "made":
        tokens = [
            rng.choice(_DETS),
            noun,
            rng.choice(_VERBS),
            rng.choice(_MADE),
            rng.choice(_OFROM),
            rng.choice(_NOUNS),
        ]
    else:
        tokens = [
            rng.choice(_DETS),
            noun,
            rng.choice(_HAS),
            rng.choice(_AONE),
            rng.choice(_NOUNS),
            rng.choice(_INSIDE),
        ]
    return tokens, noun


def _short_core(rng: random.Random) -> list[str]:
    return [rng.choice(_DETS), rng.choice(_NOUNS), rng.choice(_VERBS), rng.choice(_ADJS)]


def _style_sentence(style: str, rng: random.Random) -> tuple[list[str], list[int]]:
    """One style sentence and the positions of its marker tokens.

    Both markers of a pair always appear, so either one can be recovered
    exactly from the other; the connective is sampled independently of the
    pair, so it stays uncertain like any content slot.
    """
    opener, closer = rng.choice(MARKER_PAIRS[style])
    conn = rng.choice(_CONNS)
    punct = rng.choice(_PUNCTS)
    core = _short_core(rng) if rng.random() < 0.5 else _core(rng)[0]
    shape = rng.random()
    if shape < 0.4:
        tokens = [opener, conn, *core, closer, punct]
        markers = [0, len(tokens) - 2]
    elif shape < 0.6:
        tokens = [opener, *core, closer, punct]
        markers = [0, len(tokens) - 2]
    elif shape < 0.8:
        tokens = [conn, opener, *core, closer, punct]
        markers = [1, len(tokens) - 2]
    else:
        extra = _short_core(rng)
        tokens = [opener, conn, *core, rng.choice(_ANDS), *extra, closer, punct]
        markers = [0, len(tokens) - 2]
    return tokens, markers


def synth_corpus(
    seed: int,
    n_dialogues: int = 360,
    n_style: int = 400,
    styles: Sequence[str] = DEFAULT_STYLES,
) -> SynthCorpus:
    """Generate the synthetic dialogue and style corpora.

    Args:
        seed: drives all sampling; equal seeds give byte-identical corpora.
        n_dialogues: number of dialogue examples.
        n_style: number of sentences per style corpus.
        styles: style names, each needing a marker inventory.

    Returns:
        SynthCorpus whose every response copies one knowledge candidate
        verbatim (minus final punctuation, plus a connective opener).
    """
    for style in styles:
        if style not in MARKER_PAIRS:
            raise ValueError(f"synth_corpus: no marker inventory for style {style!r}")
    rng = random.Random(seed)
    dialogues: list[DialogueExample] = []
    for idx in range(n_dialogues):
        cores: list[tuple[list[str], str]] = []
        used: set[str] = set()
        while len(cores) < 3:
            core, noun = _core(rng)
            # Candidates share no tokens at all: after the topic noun every
            # continuation token has a unique source match, so a copying
            # decoder never faces an ambiguous attention target.
            if used.isdisjoint(core):
                used.update(core)
                cores.append((core, noun))
        knowledge = [core + ["."] for core, _ in cores]
        pick = rng.randrange(3)
        asked = cores[pick][1]
        context = [
            tokenize(rng.choice(_GREETINGS)),
            tokenize(rng.choice(_QUESTIONS).format(noun=asked)),
        ]
        response = [rng.choice(_CONNS), *cores[pick][0], "."]
        dialogues.append(
            DialogueExample(
                id=f"d{idx:05d}", context=context, knowledge=knowledge, response=response
            )
        )

    style_corpora: dict[str, list[StyleSentence]] = {}
    gold_positions: dict[str, dict] = {}
    for style in styles:
        sentences = []
        for idx in range(n_style):
            tokens, markers = _style_sentence(style, rng)
            sent_id = f"{style}-s{idx:05d}"
            sentences.append(StyleSentence(id=sent_id, tokens=tokens, style=style))
            gold_positions[sent_id] = {
                "style": style,
                "marker_positions": markers,
                "marker_tokens": [tokens[i] for i in markers],
            }
        style_corpora[style] = sentences

    gold = {
        "marker_sets": {
            style: sorted({tok for pair in MARKER_PAIRS[style] for tok in pair})
            for style in styles
        },
        "sentences": gold_positions,
    }
    return SynthCorpus(dialogues=dialogues, styles=style_corpora, gold=gold)


def write_dialogue_jsonl(examples: Sequence[DialogueExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for ex in examples:
            handle.write(
                json.dumps(
                    {
                        "id": ex.id,
                        "context": [detokenize(u) for u in ex.context],
                        "knowledge": [detokenize(k) for k in ex.knowledge],
                        "response": detokenize(ex.response),
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def write_style_jsonl(sentences: Sequence[StyleSentence], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for sent in sentences:
            handle.write(
                json.dumps(
                    {"id": sent.id, "style": sent.style, "text": detokenize(sent.tokens)},
                    sort_keys=True,
                )
                + "\n"
            )
