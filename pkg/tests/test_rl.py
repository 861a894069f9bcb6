import math
import random
from copy import deepcopy

import pytest
import torch

from dtr.corpus import DialogueExample, build_vocab
from dtr.disentangler import Disentangler, TokenScores, grounded_input, parameter_hashes
from dtr.rewards import EmbeddingTable, StyleClassifier
from dtr.rl import (
    RlConfig,
    RlExample,
    prepare_rl_examples,
    rl_step,
    sample_actions,
    train_rl,
)
from dtr.seq2seq import ModelConfig, Seq2SeqModel, init_parameters

WORDS = ["sun", "moon", "lake", "hill", "bird", "tree", "wind", "road", "."]


def _cfg(vocab_size, max_len=24):
    return ModelConfig(
        vocab_size=vocab_size, hidden=16, layers=1, heads=2, ff=32, dropout=0.0, max_len=max_len
    )


@pytest.fixture(scope="module")
def world():
    """Small untrained models over a shared vocabulary."""
    vocab = build_vocab([WORDS])
    cfg = _cfg(len(vocab))
    torch.manual_seed(0)
    generator = Seq2SeqModel(cfg, vocab)
    init_parameters(generator)
    rewriter = Seq2SeqModel(cfg, vocab)
    init_parameters(rewriter)
    classifier = StyleClassifier(cfg, vocab)
    init_parameters(classifier)
    generator.eval()
    rewriter.eval()
    classifier.eval()
    table = EmbeddingTable.from_model(generator, vocab)
    rng = random.Random(5)
    dialogues = [
        DialogueExample(
            id=f"d{i}",
            context=[rng.sample(WORDS[:-1], 3)],
            knowledge=[rng.sample(WORDS[:-1], 4)],
            response=rng.sample(WORDS[:-1], 4) + ["."],
        )
        for i in range(8)
    ]
    return vocab, cfg, generator, rewriter, classifier, table, dialogues


def _fresh_scorer(world, seed=9, grounded=False):
    vocab, cfg, *_ = world
    torch.manual_seed(seed)
    scorer = Disentangler(cfg, vocab)
    init_parameters(scorer)
    if grounded:
        scorer.ensure_grounded_head(seed=seed)
        scorer.set_stage("rl")
    scorer.eval()
    return scorer


def _rl_example(world, scorer, tokens):
    vocab = world[0]
    return RlExample(
        id="x0",
        draft=list(tokens),
        reference=list(tokens),
        grounded_ids=grounded_input(vocab, tokens, [["sun"]], [["moon"]]),
        alpha=[0.5] * len(tokens),
    )


class TestSampleActions:
    def test_balanced_scores_sample_both_actions(self):
        rng = random.Random(0)
        draws = [sample_actions([1.0], rng)[0][0] for _ in range(20000)]
        assert abs(sum(draws) / len(draws) - 0.5) < 0.02

    def test_extreme_scores_saturate(self):
        rng = random.Random(1)
        high = [sample_actions([2.0], rng)[0][0] for _ in range(2000)]
        low = [sample_actions([0.0], rng)[0][0] for _ in range(2000)]
        assert all(a == 1 for a in high)
        assert all(a == 0 for a in low)

    def test_logprob_matches_bernoulli(self):
        rng = random.Random(2)
        actions, logprob = sample_actions([0.8, 0.8], rng)
        p = 0.4
        expected = sum(math.log(p if a else 1.0 - p) for a in actions)
        assert logprob == pytest.approx(expected, abs=1e-6)

    def test_accepts_token_scores(self):
        scores = TokenScores(tokens=["a", "b"], alpha=[0.3, 0.6], beta=[0.2, 0.1])
        a1, lp1 = sample_actions(scores, random.Random(3))
        a2, lp2 = sample_actions([0.5, 0.7], random.Random(3))
        assert a1 == a2
        assert lp1 == pytest.approx(lp2)

    def test_empty_scores_rejected(self):
        with pytest.raises(ValueError):
            sample_actions([], random.Random(0))


class TestRlStep:
    def test_single_example_zero_advantage_freezes_head(self, world):
        # With one example the advantage is exactly zero, and without an
        # entropy bonus the policy loss is identically zero.
        _, _, _, rewriter, classifier, table, _ = world
        scorer = _fresh_scorer(world, grounded=True)
        cfg = RlConfig(batch_size=1, lr=1e-2, entropy_bonus=0.0)
        optimizer = torch.optim.Adam(scorer.beta_parameters(), lr=cfg.lr)
        before = [p.detach().clone() for p in scorer.beta_parameters()]
        ex = _rl_example(world, scorer, ["sun", "moon", "lake", "."])
        stats, traces = rl_step(
            scorer, rewriter, [ex], table, classifier, optimizer, cfg, random.Random(4)
        )
        after = [p.detach() for p in scorer.beta_parameters()]
        worst = max(float((a - b).abs().max()) for a, b in zip(after, before))
        assert worst < 1e-8
        assert traces[0].reward.advantage == 0.0

    def test_entropy_bonus_alone_moves_head(self, world):
        # Replace probabilities away from 1/2, where the entropy gradient
        # is nonzero even though the advantage still vanishes.
        _, _, _, rewriter, classifier, table, _ = world
        scorer = _fresh_scorer(world, grounded=True)
        cfg = RlConfig(batch_size=1, lr=1e-2, entropy_bonus=0.1)
        optimizer = torch.optim.Adam(scorer.beta_parameters(), lr=cfg.lr)
        before = [p.detach().clone() for p in scorer.beta_parameters()]
        ex = _rl_example(world, scorer, ["sun", "moon", "lake", "."])
        ex.alpha = [0.9, 0.2, 0.7, 0.4]
        rl_step(scorer, rewriter, [ex], table, classifier, optimizer, cfg, random.Random(4))
        worst = max(
            float((a - b).detach().abs().max())
            for a, b in zip(scorer.beta_parameters(), before)
        )
        assert worst > 1e-8

    def test_reward_spread_moves_head(self, world):
        _, _, _, rewriter, classifier, table, _ = world
        scorer = _fresh_scorer(world, grounded=True)
        cfg = RlConfig(batch_size=2, lr=1e-2, entropy_bonus=0.0)
        optimizer = torch.optim.Adam(scorer.beta_parameters(), lr=cfg.lr)
        before = [p.detach().clone() for p in scorer.beta_parameters()]
        a = _rl_example(world, scorer, ["sun", "moon", "lake", "."])
        b = RlExample(
            id="x1",
            draft=["bird", "tree", "wind", "road"],
            reference=["sun", "sun", "sun", "sun"],
            grounded_ids=grounded_input(world[0], ["bird", "tree", "wind", "road"], [], []),
            alpha=[0.5] * 4,
        )
        stats, _ = rl_step(
            scorer, rewriter, [a, b], table, classifier, optimizer, cfg, random.Random(4)
        )
        worst = max(
            float((x - y).detach().abs().max())
            for x, y in zip(scorer.beta_parameters(), before)
        )
        assert worst > 1e-8
        assert set(stats) == {"mean_reward", "mean_sim", "mean_cls", "loss", "entropy"}

    def test_alpha_head_untouched(self, world):
        _, _, _, rewriter, classifier, table, _ = world
        scorer = _fresh_scorer(world, grounded=True)
        cfg = RlConfig(batch_size=2, lr=1e-2, entropy_bonus=0.1)
        optimizer = torch.optim.Adam(scorer.beta_parameters(), lr=cfg.lr)
        alpha_before = {
            k: h for k, h in parameter_hashes(scorer).items() if k.startswith("alpha_")
        }
        ex = _rl_example(world, scorer, ["sun", "moon", "lake", "."])
        rl_step(scorer, rewriter, [ex], table, classifier, optimizer, cfg, random.Random(4))
        alpha_after = {
            k: h for k, h in parameter_hashes(scorer).items() if k.startswith("alpha_")
        }
        assert alpha_after == alpha_before

    def test_empty_batch_rejected(self, world):
        _, _, _, rewriter, classifier, table, _ = world
        scorer = _fresh_scorer(world, grounded=True)
        optimizer = torch.optim.Adam(scorer.beta_parameters(), lr=1e-3)
        with pytest.raises(ValueError):
            rl_step(scorer, rewriter, [], table, classifier, optimizer, RlConfig(), random.Random(0))


class TestPrepareRlExamples:
    def test_drafts_and_alpha_align(self, world):
        vocab, _, generator, _, _, _, dialogues = world
        scorer = _fresh_scorer(world)
        prepared = prepare_rl_examples(generator, scorer, dialogues[:4], beam=2)
        assert len(prepared) == 4
        for ex in prepared:
            assert ex.draft
            assert len(ex.alpha) == len(ex.draft)
            assert len(ex.grounded_ids) >= len(ex.draft)

    def test_no_examples_rejected(self, world):
        _, _, generator, _, _, _, _ = world
        scorer = _fresh_scorer(world)
        with pytest.raises(ValueError):
            prepare_rl_examples(generator, scorer, [], beam=2)


class TestTrainRl:
    def test_zero_steps_leaves_scorer_untouched(self, world):
        _, _, generator, rewriter, classifier, table, dialogues = world
        scorer = _fresh_scorer(world)
        hashes = parameter_hashes(scorer)
        report = train_rl(
            scorer, rewriter, generator, dialogues, table, classifier,
            RlConfig(steps=0), seed=0,
        )
        assert parameter_hashes(scorer) == hashes
        assert scorer.beta_proj is None
        assert report.rows == [] and report.steps == 0

    def test_small_run_trains_only_grounded_head(self, world):
        _, _, generator, rewriter, classifier, table, dialogues = world
        scorer = _fresh_scorer(world)
        frozen = {
            "alpha": {k: h for k, h in parameter_hashes(scorer).items() if k.startswith("alpha_")},
            "rewriter": parameter_hashes(rewriter),
            "generator": parameter_hashes(generator),
            "classifier": parameter_hashes(classifier),
        }
        cfg = RlConfig(steps=4, batch_size=2, lr=1e-3, eval_every=2, generation_beam=2)
        report = train_rl(
            scorer, rewriter, generator, dialogues, table, classifier, cfg, seed=7
        )
        assert len(report.rows) == 4
        assert [row["step"] for row in report.rows] == [1, 2, 3, 4]
        assert report.val_rows and report.val_rows[0]["step"] == 0
        assert report.best_val_reward is not None
        assert scorer.beta_proj is not None
        assert {
            k: h for k, h in parameter_hashes(scorer).items() if k.startswith("alpha_")
        } == frozen["alpha"]
        assert parameter_hashes(rewriter) == frozen["rewriter"]
        assert parameter_hashes(generator) == frozen["generator"]
        assert parameter_hashes(classifier) == frozen["classifier"]

    def test_same_seed_same_trajectory(self, world):
        _, _, generator, rewriter, classifier, table, dialogues = world
        cfg = RlConfig(steps=3, batch_size=2, lr=1e-3, eval_every=2, generation_beam=2)
        runs = []
        for _ in range(2):
            scorer = _fresh_scorer(world, seed=11)
            report = train_rl(
                scorer, rewriter, generator, dialogues, table, classifier, cfg, seed=13
            )
            runs.append((report.rows, report.val_rows, parameter_hashes(scorer)))
        assert runs[0] == runs[1]
