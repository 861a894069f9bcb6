import random

import pytest

from dtr.corpus import SPECIAL_TOKENS, build_vocab
from dtr.disentangler import TemplatePair, template_surface
from dtr.rewriter import rewrite, train_rewriter
from dtr.seq2seq import ModelConfig, TrainHyper

MARKERS = ("wonderful", "amazing")
WORDS = ["pizza", "bread", "soup", "salad", "river", "stone", "tea", "chess"]


def _sentence(rng):
    """Markers bracket a three-word core; blanking them gives the template."""
    core = rng.sample(WORDS, 3)
    tokens = [MARKERS[0], *core, MARKERS[1], "."]
    actions = [1, 0, 0, 0, 1, 0]
    return tokens, actions


@pytest.fixture(scope="module")
def trained():
    rng = random.Random(7)
    pairs = []
    for idx in range(80):
        tokens, actions = _sentence(rng)
        pairs.append(
            TemplatePair(
                id=f"s{idx}",
                template=template_surface(tokens, actions),
                target=tokens,
                actions=actions,
            )
        )
    vocab = build_vocab([p.target for p in pairs])
    cfg = ModelConfig(vocab_size=len(vocab), hidden=32, layers=1, heads=2, ff=64, dropout=0.0, max_len=16)
    model = train_rewriter(
        pairs, cfg, TrainHyper(lr=2e-3, token_batch=16, max_epochs=25, patience=25, seed=1), vocab
    )
    return model, pairs


class TestTrainRewriter:
    def test_empty_pairs_rejected(self, tiny_vocab):
        cfg = ModelConfig(vocab_size=len(tiny_vocab), hidden=8, layers=1, heads=1, ff=8)
        with pytest.raises(ValueError):
            train_rewriter([], cfg, TrainHyper(), tiny_vocab)

    def test_fills_blanks_with_markers(self, trained):
        model, pairs = trained
        hits = 0
        for pair in pairs[:30]:
            out = rewrite(model, pair.template, beam=5).tokens
            hits += out == pair.target
        assert hits >= 27

    def test_unseen_template_keeps_retained_tokens(self, trained):
        model, _ = trained
        template = ["[*]", "soup", "pizza", "river", "[*]", "."]
        out = rewrite(model, template, beam=5).tokens
        for token in ("soup", "pizza", "river", "."):
            assert token in out


class TestRewrite:
    def test_no_control_tokens_in_output(self, trained):
        model, pairs = trained
        for pair in pairs[:20]:
            out = rewrite(model, pair.template, beam=5).tokens
            assert not set(out) & set(SPECIAL_TOKENS)

    def test_deterministic(self, trained):
        model, pairs = trained
        a = rewrite(model, pairs[0].template, beam=5)
        b = rewrite(model, pairs[0].template, beam=5)
        assert a.tokens == b.tokens
        assert a.logprob == b.logprob

    def test_logprob_nonpositive(self, trained):
        model, pairs = trained
        assert rewrite(model, pairs[0].template, beam=5).logprob <= 0.0

    def test_empty_template_rejected(self, trained):
        model, _ = trained
        with pytest.raises(ValueError):
            rewrite(model, [])

    def test_max_len_caps_output(self, trained):
        model, pairs = trained
        out = rewrite(model, pairs[0].template, beam=1, max_len=3)
        assert len(out.tokens) <= 3
