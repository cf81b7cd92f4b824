import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recallnet import trainer
from recallnet.actor import ActorConfig, ActorParams
from recallnet.data import SynthConfig, build_vocab, generate_synthetic, index_corpus, split_leave_last
from recallnet.errors import ConfigError, ContractError, FormatError, TrainingDiverged

SMALL = SynthConfig(n_topics=3, items_per_topic=30, n_users=60, history_len=10, vocab_size=150)


@pytest.fixture(scope="module")
def split():
    syn = generate_synthetic(SMALL, seed=3)
    ic = index_corpus(syn.corpus, build_vocab(syn.corpus))
    return split_leave_last(ic, 1)


def actor_config(split, **kw):
    return ActorConfig(**{"vocab_size": split.corpus.vocab_size, "d_word": 8, "dim": 8, **kw})


FAST = trainer.TrainConfig(n_neg=4, epochs_warmup=2, epochs_pretrain=2, epochs_validator=2,
                           epochs_actor=3, epochs_baseline=2)


def mean_pos_neg(model, split):
    cfg = model.train_config
    reqs = np.array([(u, 0) for u in split.eval_users])
    batch = trainer.request_batch(split, reqs, cfg.max_history)
    negs = trainer._sampler(split, cfg).sample(batch.users, 8, np.random.default_rng(0))
    cands = np.concatenate([batch.targets[:, None], negs], axis=1)
    z = trainer.recommender_logits(model, split.corpus, batch, cands).data
    return z[:, 0].mean(), z[:, 1:].mean()


def loop_auc(pos, neg):
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


class TestAuc:
    def test_hand_cases(self):
        assert trainer.ranking_auc([2.0], [1.0]) == 1.0
        assert trainer.ranking_auc([1.0], [1.0]) == 0.5
        assert trainer.ranking_auc([0.0, 3.0], [1.0, 2.0]) == 0.5

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(-4, 4), min_size=1, max_size=12),
           st.lists(st.integers(-4, 4), min_size=1, max_size=12))
    def test_matches_pair_counting(self, pos, neg):
        assert trainer.ranking_auc(pos, neg) == pytest.approx(loop_auc(pos, neg), abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            trainer.ranking_auc([], [1.0])


class TestPretrain:
    def test_separates_heldout(self, split):
        # the FAST budget is too short to learn; this is the smallest setting that does
        m = trainer.new_model(actor_config(split, d_word=16, dim=16), replace(FAST, epochs_warmup=10, n_neg=8))
        untrained = trainer.heldout_auc(m, split)
        trainer.pretrain_recommender(split, m)
        pos, neg = mean_pos_neg(m, split)
        assert pos > neg
        assert trainer.heldout_auc(m, split) > max(0.6, untrained + 0.1)
        assert m.phase == "pretrain"

    def test_zero_rate_is_noop(self, split):
        m = trainer.new_model(actor_config(split), replace(FAST, lr_pretrain=0.0))
        before = {k: v.copy() for k, v in {**m.recommender.state(), **m.evaluator.state()}.items()}
        trainer.pretrain_recommender(split, m)
        after = {**m.recommender.state(), **m.evaluator.state()}
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_divergence_reported(self, split):
        m = trainer.new_model(actor_config(split), FAST)
        m.recommender["word_emb"].data[:] = np.nan
        with pytest.raises(TrainingDiverged):
            trainer.pretrain_recommender(split, m)


class TestPhases:
    def test_gating(self, split):
        m = trainer.new_model(actor_config(split), FAST)
        with pytest.raises(ContractError):
            trainer.init_validator(split, m)
        with pytest.raises(ContractError):
            trainer.train_actor(split, m)

    def test_actor_seeded_from_recommender(self, split):
        m = trainer.new_model(actor_config(split), FAST)
        trainer.pretrain_recommender(split, m)
        trainer.init_validator(split, m)
        for k in m.recommender.encoder_names():
            assert np.array_equal(m.actor[k].data, m.recommender[k].data)
        assert 0.0 <= m.validator_accuracy <= 1.0

    def test_identity_start_keys_are_user_vectors(self, split):
        m = trainer.new_model(actor_config(split), FAST)
        trainer.pretrain_recommender(split, m)
        trainer.init_validator(split, m)
        users = split.eval_users[:10]
        keys = trainer.retrieval_keys(m, split, users)
        batch = trainer.query_batch(split, users)
        assert np.array_equal(keys, trainer.batch_keys(m, split.corpus, batch))
        _, theta = trainer._encode(m.actor, split.corpus, batch)
        assert np.allclose(keys, theta.data, atol=1e-14)

    def test_random_start_keeps_fresh_synthesizer(self, split):
        m = trainer.new_model(actor_config(split), replace(FAST, synth_start="random"))
        w = m.actor["syn_W0"].data.copy()
        trainer.pretrain_recommender(split, m)
        trainer.init_validator(split, m)
        assert np.array_equal(m.actor["syn_W0"].data, w)

    def test_frozen_encoders_stay_put(self, split):
        m = trainer.train_recallnet(split, actor_config(split), FAST)
        for k in m.recommender.encoder_names():
            assert np.array_equal(m.actor[k].data, m.recommender[k].data)
        assert [r["epoch"] for r in m.log if r["phase"] == "actor"] == [1, 2, 3]

    def test_nan_reward_aborts(self, split):
        m = trainer.new_model(actor_config(split), FAST)
        trainer.pretrain_recommender(split, m)
        trainer.init_validator(split, m)
        m.evaluator["W_e"].data[:] = np.nan
        with pytest.raises(TrainingDiverged, match="phi"):
            trainer.train_actor(split, m)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            trainer.TrainConfig(weights=(1.0, -1.0, 0.0)).validate()
        with pytest.raises(ConfigError):
            trainer.TrainConfig(lr_actor=float("nan")).validate()


def pretrained(split, **train_kw):
    m = trainer.new_model(actor_config(split), replace(FAST, **train_kw))
    trainer.pretrain_recommender(split, m)
    trainer.init_validator(split, m)
    return m


class TestRewardTrends:
    def test_reference_only_gamma_rises(self, split):
        m = pretrained(split, weights=(0.0, 0.0, 1.0), lr_actor=1e-2)
        trainer.train_actor(split, m)
        gammas = [r["gamma"] for r in m.log if r["phase"] == "actor"][:3]
        assert gammas[0] < gammas[1] < gammas[2]

    def test_evaluation_only_phi_rises(self, split):
        m = pretrained(split, weights=(1.0, 0.0, 0.0), epochs_actor=5)
        before = trainer.reward_means(m, split)["phi"]
        trainer.train_actor(split, m)
        assert trainer.reward_means(m, split)["phi"] > before


class TestDeterminism:
    def test_same_seed_same_bytes(self, split, tmp_path):
        a = trainer.train_recallnet(split, actor_config(split), FAST)
        b = trainer.train_recallnet(split, actor_config(split), FAST)
        assert trainer.save_model(tmp_path / "a", a) == trainer.save_model(tmp_path / "b", b)

    def test_seed_matters(self, split):
        a = trainer.new_model(actor_config(split), FAST)
        b = trainer.new_model(actor_config(split), replace(FAST, seed=1))
        assert not np.array_equal(a.actor["word_emb"].data, b.actor["word_emb"].data)


class TestBaselines:
    def test_dssm_shapes_match_actor(self, split):
        ac = actor_config(split)
        dssm = trainer.train_dssm(split, ac, FAST)
        actor = ActorParams(ac, np.random.default_rng(0))
        for k in actor.encoder_names():
            assert dssm.params[k].shape == actor[k].shape

    def test_dssm_separates_and_is_deterministic(self, split):
        ac = actor_config(split)
        a, b = trainer.train_dssm(split, ac, FAST), trainer.train_dssm(split, ac, FAST)
        assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params.tensors)
        users = split.eval_users
        keys = trainer.two_tower_keys(a, split, users)
        from recallnet.actor import item_table
        table = item_table(a.params, split.corpus)

        def cos(x, y):
            return np.sum(x * y, 1) / (np.linalg.norm(x, axis=1) * np.linalg.norm(y, axis=1) + 1e-12)
        pos = np.array([split.test[u][0] for u in users])
        neg = trainer._sampler(split, FAST).sample(users, 1, np.random.default_rng(0))[:, 0]
        assert cos(keys, table[pos]).mean() > cos(keys, table[neg]).mean()

    def test_cml_unseen_users(self):
        syn = generate_synthetic(SMALL, seed=4)
        ic = index_corpus(syn.corpus, build_vocab(syn.corpus))
        sp = split_leave_last(ic, 1)
        # a user with a single training item contributes no training interaction
        sp.train[0] = sp.train[0][:1]
        m = trainer.train_cml(sp, actor_config(sp), FAST)
        assert m.unseen_count == 1 and not m.seen_users[0]
        assert m.params["user_emb"].shape == (ic.n_users, 8)


class TestCheckpoints:
    def test_round_trip_bytes(self, split, tmp_path):
        m = pretrained(split)
        raw = trainer.save_model(tmp_path / "m", m)
        back = trainer.load_model(tmp_path / "m")
        assert back.phase == "validator"
        assert trainer.save_model(tmp_path / "m2", back) == raw
        assert back.validator_accuracy == m.validator_accuracy

    @pytest.mark.parametrize("cut", [4, 20, -3])
    def test_truncated(self, split, cut):
        raw = trainer.encode_checkpoint("init", {"a": {"x": np.ones(3)}})
        with pytest.raises(FormatError):
            trainer.decode_checkpoint(raw[:cut])

    def test_unknown_phase(self, tmp_path):
        trainer.save_checkpoint(tmp_path / "c", "bogus", {})
        with pytest.raises(FormatError):
            trainer.load_model(tmp_path / "c")

    def test_metrics_csv(self, tmp_path):
        rows = [{"epoch": 1, "phase": "actor", "phi": -0.5, "omega": None, "gamma": 0.1, "total": 1.0,
                 "heldout_loss": math.nan}]
        trainer.write_metrics_csv(tmp_path / "m.csv", rows)
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == ",".join(trainer.METRIC_FIELDS)
        assert lines[1] == "1,actor,-0.5,,0.1,1.0,nan"


class TestCriticView:
    def test_cosine_rows_at_mean_norm(self, split):
        m = trainer.new_model(actor_config(split), FAST)
        table = np.random.default_rng(0).normal(size=(6, 4)) * np.arange(1, 7)[:, None]
        table[2] = 0.0
        view = trainer.critic_table(m, table)
        norms = np.linalg.norm(view, axis=1)
        target = np.linalg.norm(table, axis=1).mean()
        assert np.allclose(np.delete(norms, 2), target) and not view[2].any()
        # directions are untouched
        cos = np.sum(view * table, 1)[[0, 1, 3]] / (norms[[0, 1, 3]] * np.linalg.norm(table, axis=1)[[0, 1, 3]])
        assert np.allclose(cos, 1.0)

    def test_euclidean_unchanged(self, split):
        m = trainer.new_model(actor_config(split), replace(FAST, measure="euclidean"))
        table = np.random.default_rng(1).normal(size=(5, 3))
        assert trainer.critic_table(m, table) is table
