"""Item encoder, user encoder and key synthesizer.

Items: word embeddings -> same-length conv + ReLU -> attentive pooling with a
learned query.  Users: K attentive pooling heads over the item
representations of their history, concatenated and mapped back to ``dim``
with ReLU.  The synthesizer is a feed-forward stack whose last layer is
linear, so keys may take any real value.
"""
import copy
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, DimensionError, DomainError
from .params import ParamSet, fan_in_uniform, uniform

USER_MODES = ("attentive", "id")
AUX_MODES = ("none", "intent")


@dataclass(frozen=True)
class ActorConfig:
    vocab_size: int
    d_word: int = 64
    dim: int = 64
    window: int = 3
    heads: int = 4
    syn_layers: int = 2
    user_mode: str = "attentive"
    aux_mode: str = "none"
    n_users: int = 0
    n_intents: int = 0
    d_aux: int = 16

    def validate(self):
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be positive")
        if min(self.d_word, self.dim, self.heads, self.syn_layers) < 1:
            raise ConfigError("d_word, dim, heads and syn_layers must be >= 1")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"conv window must be a positive odd number, got {self.window}")
        if self.user_mode not in USER_MODES:
            raise ConfigError(f"user_mode must be one of {USER_MODES}")
        if self.aux_mode not in AUX_MODES:
            raise ConfigError(f"aux_mode must be one of {AUX_MODES}")
        if self.user_mode == "id" and self.n_users < 1:
            raise ConfigError("id user mode needs n_users")
        if self.aux_mode == "intent" and (self.n_intents < 1 or self.d_aux < 1):
            raise ConfigError("intent aux mode needs n_intents and d_aux")

    @property
    def user_input_dim(self):
        return self.dim + (self.d_aux if self.aux_mode == "intent" else 0)


ITEM_ENCODER = ("word_emb", "conv_kernel", "conv_bias", "item_query")
USER_ENCODER = ("user_heads", "user_W", "user_b", "user_emb")


class ActorParams(ParamSet):
    def __init__(self, config, rng):
        config.validate()
        self.config = config
        d, dw, w, K = config.dim, config.d_word, config.window, config.heads
        arrays = {
            "word_emb": uniform(rng, (config.vocab_size, dw), 0.05),
            "conv_kernel": fan_in_uniform(rng, (w, dw, d), w * dw),
            "conv_bias": np.zeros(d),
            "item_query": fan_in_uniform(rng, (d,), d),
        }
        if config.user_mode == "attentive":
            arrays["user_heads"] = fan_in_uniform(rng, (K, d), d)
            arrays["user_W"] = fan_in_uniform(rng, (d, K * d), K * d)
            arrays["user_b"] = np.zeros(d)
        else:
            arrays["user_emb"] = uniform(rng, (config.n_users, d), 0.05)
        if config.aux_mode == "intent":
            arrays["intent_emb"] = uniform(rng, (config.n_intents + 1, config.d_aux), 0.05)
        fan = config.user_input_dim
        for i in range(config.syn_layers):
            arrays[f"syn_W{i}"] = fan_in_uniform(rng, (d, fan), fan)
            arrays[f"syn_b{i}"] = np.zeros(d)
            fan = d
        super().__init__(arrays)

    def encoder_names(self):
        return [k for k in ITEM_ENCODER + USER_ENCODER + ("intent_emb",) if k in self.tensors]

    def synthesizer_names(self):
        return [f"syn_{p}{i}" for i in range(self.config.syn_layers) for p in ("W", "b")]

    def clone(self):
        other = copy.copy(self)
        other.tensors = {k: nc.parameter(t.data) for k, t in self.tensors.items()}
        return other


# ------------------------------------------------------------------ items

def encode_items(params, tokens, lengths):
    """Batched item encoder: tokens (B, L) zero-padded, lengths (B,) -> (B, dim)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    lengths = np.asarray(lengths)
    if tokens.ndim != 2 or tokens.shape[1] == 0 or np.any(lengths < 1):
        raise DomainError("items need at least one token")
    mask = np.arange(tokens.shape[1])[None, :] < lengths[:, None]
    emb = nc.lookup(params["word_emb"], tokens)
    # zeroed padding reproduces the conv's zero padding at each item's true end
    emb = nc.mul(emb, nc.Tensor(mask[..., None].astype(np.float64)))
    hidden = nc.relu(nc.conv1d(emb, params["conv_kernel"], params["conv_bias"]))
    _, pooled = nc.softmax_attention(hidden, params["item_query"], mask)
    return pooled


def encode_item(params, tokens):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise DomainError("an item needs a non-empty token sequence")
    out = encode_items(params, tokens[None, :], np.array([tokens.size]))
    return nc.reshape(out, (params.config.dim,))


def item_attention(params, tokens):
    """Attention weights over the token positions of one item."""
    tokens = np.asarray(tokens, dtype=np.int64)
    emb = nc.lookup(params["word_emb"], tokens)
    hidden = nc.relu(nc.conv1d(emb, params["conv_kernel"], params["conv_bias"]))
    weights, _ = nc.softmax_attention(hidden, params["item_query"])
    return weights.data


# ------------------------------------------------------------------ users

def encode_users(params, history_reps, mask=None):
    """Multi-head attentive user encoder: (B, H, dim) histories -> (B, dim)."""
    if params.config.user_mode != "attentive":
        raise ConfigError("actor is configured with id-embedding users")
    history_reps = nc.as_tensor(history_reps)
    if history_reps.ndim != 3 or history_reps.shape[1] == 0:
        raise DomainError("user encoder needs a non-empty history")
    if mask is not None and not np.all(np.asarray(mask).any(axis=1)):
        raise DomainError("user encoder needs a non-empty history")
    B = history_reps.shape[0]
    K, d = params.config.heads, params.config.dim
    pooled, _ = nc.attention_pool(history_reps, params["user_heads"], mask)
    flat = nc.reshape(pooled, (B, K * d))
    return nc.relu(nc.affine(flat, params["user_W"], params["user_b"]))


def encode_user(params, history_reps):
    if isinstance(history_reps, (list, tuple)):
        if not history_reps:
            raise DomainError("user encoder needs a non-empty history")
        history_reps = np.stack([nc.as_tensor(r).data for r in history_reps])
    reps = nc.as_tensor(history_reps)
    if reps.ndim != 2 or reps.shape[0] == 0:
        raise DomainError("user encoder needs a non-empty history")
    out = encode_users(params, nc.reshape(reps, (1,) + reps.shape))
    return nc.reshape(out, (params.config.dim,))


def encode_user_ids(params, user_idx):
    if params.config.user_mode != "id":
        raise ConfigError("actor is configured with attentive users")
    user_idx = np.asarray(user_idx, dtype=np.int64)
    if user_idx.size and (user_idx.min() < 0 or user_idx.max() >= params.config.n_users):
        raise KeyError("user id not seen in training")
    return nc.lookup(params["user_emb"], user_idx)


def encode_user_id(params, user_idx):
    return nc.reshape(encode_user_ids(params, np.array([user_idx])), (params.config.dim,))


def encode_aux(params, intent_ids):
    """Intent embedding rows; ids outside the table map to the unknown row 0."""
    if params.config.aux_mode != "intent":
        raise ConfigError("auxiliary input is disabled for this actor")
    ids = np.asarray(intent_ids, dtype=np.int64)
    ids = np.where((ids < 0) | (ids > params.config.n_intents), 0, ids)
    return nc.lookup(params["intent_emb"], ids)


def user_channel(params, user_rep, intent_ids=None):
    """User representation, widened with the intent embedding in aux mode."""
    if params.config.aux_mode == "intent":
        if intent_ids is None:
            raise ConfigError("aux mode needs intent ids")
        return nc.concat([user_rep, encode_aux(params, intent_ids)], axis=-1)
    return user_rep


# ------------------------------------------------------------ synthesizer

def synthesize_key(params, user_vec):
    """M-1 ReLU layers followed by one linear layer."""
    user_vec = nc.as_tensor(user_vec)
    if user_vec.shape[-1] != params.config.user_input_dim:
        raise DimensionError(
            f"synthesizer expects width {params.config.user_input_dim}, got {user_vec.shape[-1]}")
    h = user_vec
    M = params.config.syn_layers
    for i in range(M):
        h = nc.affine(h, params[f"syn_W{i}"], params[f"syn_b{i}"])
        if i < M - 1:
            h = nc.relu(h)
    return h


# ---------------------------------------------------------- batch helpers

def item_table(params, corpus, batch=1024):
    """Representations of every item in ``corpus`` as a plain (n_items, dim) array."""
    out = np.empty((corpus.n_items, params.config.dim))
    for s in range(0, corpus.n_items, batch):
        sl = slice(s, s + batch)
        L = int(corpus.lengths[sl].max())
        out[sl] = encode_items(params, corpus.tokens[sl, :L], corpus.lengths[sl]).data
    return out


class BatchEncoder:
    """Encodes the distinct items a batch touches once, then gathers by index."""

    def __init__(self, params, corpus, item_ids):
        self.params = params
        uniq = np.unique(np.concatenate([np.ravel(a) for a in item_ids]))
        self.uniq = uniq
        L = int(corpus.lengths[uniq].max())
        self.reps = encode_items(params, corpus.tokens[uniq, :L], corpus.lengths[uniq])

    def gather(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        local = np.searchsorted(self.uniq, idx)
        return nc.lookup(self.reps, local)


def user_reps(params, encoder, users, hist_idx, hist_mask):
    """User representations for a batch: attentive over history or id lookup."""
    if params.config.user_mode == "id":
        return encode_user_ids(params, users)
    return encode_users(params, encoder.gather(hist_idx), hist_mask)
