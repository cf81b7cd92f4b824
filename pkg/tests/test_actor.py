import math

import numpy as np
import pytest

from recallnet import numcore as nc
from recallnet.actor import (
    ActorConfig, ActorParams, encode_aux, encode_item, encode_items, encode_user,
    encode_user_id, encode_user_ids, item_attention, synthesize_key, user_channel,
)
from recallnet.errors import ConfigError, DimensionError, DomainError
from recallnet.trainer import decode_checkpoint, encode_checkpoint


def make(seed=0, **kw):
    cfg = ActorConfig(**{"vocab_size": 12, "d_word": 5, "dim": 4, "heads": 3, **kw})
    return ActorParams(cfg, np.random.default_rng(seed))


def arr(p, name):
    return p[name].data


# straight-line oracles, written against the definitions rather than the ops

def oracle_item(p, tokens):
    E = arr(p, "word_emb")[tokens]
    K, bias = arr(p, "conv_kernel"), arr(p, "conv_bias")
    w = K.shape[0]
    half = (w - 1) // 2
    N, d = len(tokens), K.shape[2]
    H = np.zeros((N, d))
    for n in range(N):
        for o in range(d):
            acc = bias[o]
            for j in range(w):
                src = n + j - half
                if 0 <= src < N:
                    acc += sum(E[src, c] * K[j, c, o] for c in range(E.shape[1]))
            H[n, o] = max(acc, 0.0)
    q = arr(p, "item_query")
    logits = [sum(H[n, c] * q[c] for c in range(d)) for n in range(N)]
    m = max(logits)
    ex = [math.exp(v - m) for v in logits]
    a = [v / sum(ex) for v in ex]
    return np.array([sum(a[n] * H[n, c] for n in range(N)) for c in range(d)])


def oracle_user(p, reps):
    heads = arr(p, "user_heads")
    flat = []
    for q in heads:
        logits = [float(np.dot(r, q)) for r in reps]
        m = max(logits)
        ex = [math.exp(v - m) for v in logits]
        a = [v / sum(ex) for v in ex]
        flat.extend(sum(a[i] * reps[i][c] for i in range(len(reps))) for c in range(len(q)))
    W, b = arr(p, "user_W"), arr(p, "user_b")
    return np.array([max(b[i] + sum(W[i, j] * flat[j] for j in range(len(flat))), 0.0)
                     for i in range(len(b))])


def oracle_synth(p, x, layers):
    h = list(x)
    for i in range(layers):
        W, b = arr(p, f"syn_W{i}"), arr(p, f"syn_b{i}")
        h = [b[r] + sum(W[r, c] * h[c] for c in range(len(h))) for r in range(len(b))]
        if i < layers - 1:
            h = [max(v, 0.0) for v in h]
    return np.array(h)


class TestItemEncoder:
    def test_single_token_is_its_conv_output(self):
        p = make()
        tok = np.array([7])
        E = arr(p, "word_emb")[7]
        K = arr(p, "conv_kernel")
        centre = (K.shape[0] - 1) // 2
        expected = np.maximum(E @ K[centre] + arr(p, "conv_bias"), 0.0)
        assert np.allclose(encode_item(p, tok).data, expected, atol=1e-12)
        assert np.allclose(item_attention(p, tok), [1.0])

    def test_identical_tokens_share_attention(self):
        p = make(window=1)
        assert np.allclose(item_attention(p, np.array([3, 3])), [0.5, 0.5], atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_oracle(self, seed):
        p = make(seed)
        tokens = np.random.default_rng(seed + 10).integers(1, 12, size=5)
        assert np.allclose(encode_item(p, tokens).data, oracle_item(p, tokens), atol=1e-10, rtol=0)

    def test_batch_padding_matches_single(self):
        p = make(2)
        a, b = np.array([1, 2, 3, 4]), np.array([5, 6])
        tok = np.zeros((2, 4), dtype=np.int64)
        tok[0], tok[1, :2] = a, b
        out = encode_items(p, tok, np.array([4, 2])).data
        assert np.allclose(out[1], encode_item(p, b).data, atol=1e-12)

    def test_empty_item_rejected(self):
        with pytest.raises(DomainError):
            encode_item(make(), np.array([], dtype=np.int64))


class TestUserEncoder:
    def test_one_item_history(self):
        p = make()
        v = np.abs(np.random.default_rng(0).normal(size=4))
        rep = np.tile(v, 3)
        expected = np.maximum(arr(p, "user_W") @ rep + arr(p, "user_b"), 0.0)
        assert np.allclose(encode_user(p, [v]).data, expected, atol=1e-12)

    def test_identity_configuration(self):
        p = make(heads=1)
        p["user_W"].data = np.eye(4)
        p["user_b"].data = np.zeros(4)
        v = np.array([0.2, 0.0, 1.5, 0.7])
        assert np.allclose(encode_user(p, [v]).data, v)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_oracle(self, seed):
        p = make(seed)
        reps = np.random.default_rng(seed + 20).normal(size=(4, 4))
        assert np.allclose(encode_user(p, reps).data, oracle_user(p, reps), atol=1e-10, rtol=0)

    def test_empty_history_rejected(self):
        with pytest.raises(DomainError):
            encode_user(make(), [])

    def test_id_lookup(self):
        p = make(user_mode="id", n_users=3)
        assert np.array_equal(encode_user_id(p, 1).data, encode_user_id(p, 1).data)
        with pytest.raises(KeyError):
            encode_user_id(p, 3)

    def test_sparse_update(self):
        p = make(user_mode="id", n_users=3)
        before = p["user_emb"].data.copy()
        opt = nc.make_optimizer("sgd", {"e": p["user_emb"]}, 0.1)
        nc.backward(nc.sum(encode_user_ids(p, np.array([0]))))
        opt.step()
        after = p["user_emb"].data
        assert not np.array_equal(after[0], before[0])
        assert np.array_equal(after[1:], before[1:])

    def test_embedding_round_trips(self):
        p = make(user_mode="id", n_users=3)
        raw = encode_checkpoint("init", {"actor": p.state()})
        back = decode_checkpoint(raw).sections["actor"]["user_emb"]
        assert back.tobytes() == p["user_emb"].data.tobytes()


class TestAuxAndSynthesizer:
    def test_aux_off(self):
        with pytest.raises(ConfigError):
            encode_aux(make(), [1])

    def test_aux_lookup_and_widening(self):
        p = make(aux_mode="intent", n_intents=3, d_aux=2)
        assert encode_aux(p, [2]).shape == (1, 2)
        chan = user_channel(p, nc.Tensor(np.ones((1, 4))), np.array([2]))
        assert chan.shape == (1, 6)
        assert synthesize_key(p, chan).shape == (1, 4)
        with pytest.raises(DimensionError):
            synthesize_key(p, np.ones((1, 4)))

    def test_identity_single_layer(self):
        p = make(syn_layers=1)
        p["syn_W0"].data = np.eye(4)
        p["syn_b0"].data = np.zeros(4)
        x = np.array([0.3, -2.0, 1.0, 0.0])
        assert np.array_equal(synthesize_key(p, x).data, x)

    def test_output_is_unbounded_below(self):
        p = make(3)
        xs = np.random.default_rng(0).normal(size=(50, 4))
        assert (synthesize_key(p, xs).data < 0).any()

    @pytest.mark.parametrize("seed", range(3))
    def test_two_layer_oracle(self, seed):
        p = make(seed)
        x = np.random.default_rng(seed + 30).normal(size=4)
        assert np.allclose(synthesize_key(p, x).data, oracle_synth(p, x, 2), atol=1e-10, rtol=0)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            ActorConfig(vocab_size=5, window=2).validate()
        with pytest.raises(ConfigError):
            ActorConfig(vocab_size=5, user_mode="id").validate()
