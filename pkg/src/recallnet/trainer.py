"""Three-phase training: recommender pre-training, validator initialization,
and actor training with a validator refresh after every epoch.  The DSSM and
CML two-tower baselines share the ranking loop.
"""
import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .actor import (
    ActorConfig, ActorParams, BatchEncoder, encode_user_ids, encode_users, item_table,
    synthesize_key, user_channel, user_reps,
)
from .critic import (
    CriticParams, EvaluatorParams, ValidatorParams, compound_reward, evaluator_logit,
    validator_logit,
)
from .data import MAX_HISTORY, NegativeSampler, history_window, pad_histories
from .errors import ConfigError, ContractError, FormatError, TrainingDiverged
from .numcore.serialize import read_str, read_u64, write_str

log = logging.getLogger(__name__)

OBJECTIVES = ("standard-bce", "paper-literal")
SYNTH_STARTS = ("identity", "random")
PHASES = ("init", "pretrain", "validator", "actor")
METRIC_FIELDS = ("epoch", "phase", "phi", "omega", "gamma", "total", "heldout_loss")
CKPT_MAGIC = b"RCLNET01"

# independent random streams per phase, all derived from the one seed
_STREAMS = {"init": 1, "pretrain": 2, "validator": 3, "actor": 4, "dssm": 5, "cml": 6}


@dataclass(frozen=True)
class TrainConfig:
    lr_pretrain: float = 1e-3
    lr_validator: float = 1e-3
    lr_actor: float = 1e-3
    lr_actor_encoder: float = 0.0
    lr_baseline: float = 1e-3
    n_neg: int = 32
    epochs_warmup: int = 10
    epochs_pretrain: int = 5
    epochs_validator: int = 5
    epochs_refresh: int = 1
    epochs_actor: int = 30
    epochs_baseline: int = 10
    batch_size: int = 64
    refresh_every: int = 1
    patience: int = 3
    heldout_frac: float = 0.1
    objective: str = "standard-bce"
    validator_objective: str = "standard-bce"
    weights: tuple = (1.0, 1.0, 1.0)
    measure: str = "cosine"
    evaluator: str = "BI"
    temperature: float = 10.0
    optimizer: str = "adam"
    popularity_negatives: bool = False
    synth_start: str = "identity"
    max_history: int = MAX_HISTORY
    seed: int = 0

    def validate(self):
        for k in ("lr_pretrain", "lr_validator", "lr_actor", "lr_actor_encoder", "lr_baseline"):
            v = getattr(self, k)
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigError(f"{k} must be a finite non-negative number, got {v}")
        for k in ("n_neg", "batch_size", "refresh_every", "patience", "max_history"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be >= 1")
        for k in ("epochs_warmup", "epochs_pretrain", "epochs_validator", "epochs_refresh", "epochs_actor", "epochs_baseline"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be >= 0")
        if not 0.0 <= self.heldout_frac < 1.0:
            raise ConfigError("heldout_frac must lie in [0, 1)")
        if self.objective not in OBJECTIVES or self.validator_objective not in OBJECTIVES:
            raise ConfigError(f"objectives must be one of {OBJECTIVES}")
        if len(self.weights) != 3 or any(w < 0 for w in self.weights):
            raise ConfigError("weights are three non-negative numbers (eval, val, ref)")
        if self.measure not in ("cosine", "euclidean"):
            raise ConfigError(f"unknown measure {self.measure!r}")
        if self.evaluator not in ("BI", "FC"):
            raise ConfigError(f"unknown evaluator form {self.evaluator!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.synth_start not in SYNTH_STARTS:
            raise ConfigError(f"synth_start must be one of {SYNTH_STARTS}")


def phase_rng(config, phase):
    return np.random.default_rng([config.seed, _STREAMS[phase]])


# ---------------------------------------------------------------- batches

@dataclass
class Batch:
    users: np.ndarray
    hist: np.ndarray
    mask: np.ndarray
    intents: np.ndarray
    targets: np.ndarray = None

    def __len__(self):
        return len(self.users)


def interaction_batch(split, pairs, max_history=MAX_HISTORY):
    """Batch for (user, position) pairs: history strictly before the target."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    windows = [history_window(split.train[u], t, max_history) for u, t in pairs]
    hist, mask = pad_histories(windows)
    targets = np.array([split.train[u][t] for u, t in pairs], dtype=np.int64)
    if split.train_intents is not None:
        intents = np.array([split.train_intents[u][t] for u, t in pairs], dtype=np.int64)
    else:
        intents = np.zeros(len(pairs), dtype=np.int64)
    return Batch(pairs[:, 0].copy(), hist, mask, intents, targets)


def query_batch(split, users, intents=None, max_history=MAX_HISTORY):
    """Batch for retrieval requests made after each user's full training history."""
    users = np.asarray(users, dtype=np.int64)
    hist, mask = pad_histories([split.train[u][-max_history:] for u in users])
    if intents is None:
        intents = np.zeros(len(users), dtype=np.int64)
    return Batch(users, hist, mask, np.asarray(intents, dtype=np.int64))


def request_batch(split, requests, max_history=MAX_HISTORY):
    """Batch for held-out requests (user, j): the history is the user's training
    items plus the first ``j`` held-out ones, the intent that of held-out item ``j``."""
    requests = np.asarray(requests, dtype=np.int64).reshape(-1, 2)
    windows, intents = [], []
    for u, j in requests:
        full = np.concatenate([split.train[u], split.test[u][:j]])
        windows.append(full[-max_history:])
        intents.append(split.test_intents[u][j] if split.test_intents is not None else 0)
    hist, mask = pad_histories(windows)
    targets = np.array([split.test[u][j] for u, j in requests], dtype=np.int64)
    return Batch(requests[:, 0].copy(), hist, mask, np.array(intents, dtype=np.int64), targets)


def _encode(params, corpus, batch, items=None, with_aux=True):
    """Item encoder over whatever the batch touches, plus the user channel."""
    ids = []
    if params.config.user_mode == "attentive":
        ids.append(batch.hist[batch.mask])
    if items is not None:
        ids.append(np.ravel(items))
    enc = BatchEncoder(params, corpus, ids) if ids else None
    theta_u = user_reps(params, enc, batch.users, batch.hist, batch.mask)
    if not with_aux:
        return enc, theta_u
    return enc, user_channel(params, theta_u, batch.intents)


def _partition(pairs, frac, rng):
    n = len(pairs)
    n_held = 0 if frac <= 0 or n < 2 else max(1, int(round(frac * n)))
    perm = rng.permutation(n)
    held = np.sort(perm[:n_held])
    rest = np.sort(perm[n_held:])
    return pairs[rest], pairs[held]


def _sampler(split, config):
    pop = None
    if config.popularity_negatives:
        pop = np.bincount(np.concatenate(split.train), minlength=split.corpus.n_items)
    return NegativeSampler(split.corpus.n_items, split.train, pop)


def _chunks(n, size):
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


def _check_finite(value, phase, epoch, detail=""):
    if not np.all(np.isfinite(value)):
        raise TrainingDiverged(f"{phase} diverged at epoch {epoch}: non-finite loss {detail}".rstrip())


def _row(epoch, phase, heldout_loss, phi=None, omega=None, gamma=None, total=None):
    return {"epoch": epoch, "phase": phase, "phi": phi, "omega": omega,
            "gamma": gamma, "total": total, "heldout_loss": heldout_loss}


# ------------------------------------------------------- ranking training

def _bce_loss(z, objective):
    """Pre-training loss over logits (B, 1+n) with the positive in column 0."""
    sign = -np.ones((1, z.shape[1]))
    sign[0, 0] = 1.0
    B = z.shape[0]
    if objective == "standard-bce":
        # -log s(z+) - sum log(1 - s(z-)), using 1 - s(z) = s(-z)
        return nc.scale(nc.sum(nc.log_sigmoid(nc.mul(z, nc.Tensor(sign)))), -1.0 / B)
    # ascend phi(pos) - sum phi(neg)
    return nc.scale(nc.sum(nc.mul(nc.log_sigmoid(z), nc.Tensor(sign))), -1.0 / B)


def _softmax_loss(z):
    """Sampled-softmax cross-entropy with the positive in column 0."""
    onehot = np.zeros((1, z.shape[1]))
    onehot[0, 0] = 1.0
    return nc.scale(nc.sum(nc.mul(nc.log_softmax(z), nc.Tensor(onehot))), -1.0 / z.shape[0])


def _fit_ranking(split, trainable, logits_fn, loss_fn, config, lr, epochs, rng, phase):
    """Shared mini-batch loop with held-out early stopping; restores the best epoch."""
    pairs = split.training_interactions()
    train_pairs, held_pairs = _partition(pairs, config.heldout_frac, rng)
    sampler = _sampler(split, config)
    held = None
    if len(held_pairs):
        hb = interaction_batch(split, held_pairs, config.max_history)
        hn = sampler.sample(hb.users, config.n_neg, rng)
        held = (held_pairs, np.concatenate([hb.targets[:, None], hn], axis=1))
    opt = nc.make_optimizer(config.optimizer, trainable, lr)
    rows = []
    best_loss, best_state, bad = math.inf, None, 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train_pairs))
        for sl in _chunks(len(order), config.batch_size):
            batch = interaction_batch(split, train_pairs[order[sl]], config.max_history)
            negs = sampler.sample(batch.users, config.n_neg, rng)
            cands = np.concatenate([batch.targets[:, None], negs], axis=1)
            opt.zero_grad()
            loss = loss_fn(logits_fn(batch, cands))
            _check_finite(loss.data, phase, epoch)
            nc.backward(loss)
            opt.step()
        opt.zero_grad()
        held_loss = math.nan
        if held is not None:
            held_loss = _heldout_loss(split, held, logits_fn, loss_fn, config)
            _check_finite(held_loss, phase, epoch, "(held-out)")
        rows.append(_row(epoch, phase, held_loss))
        log.info("%s epoch %d held-out loss %.5f", phase, epoch, held_loss)
        if held is None:
            continue
        if held_loss < best_loss:
            best_loss, bad = held_loss, 0
            best_state = {k: t.data.copy() for k, t in trainable.items()}
        else:
            bad += 1
            if bad >= config.patience:
                log.info("%s: early stop after epoch %d", phase, epoch)
                break
    if best_state is not None:
        for k, t in trainable.items():
            t.data = best_state[k]
    return rows


def _heldout_loss(split, held, logits_fn, loss_fn, config):
    pairs, cands = held
    total = 0.0
    for sl in _chunks(len(pairs), 256):
        batch = interaction_batch(split, pairs[sl], config.max_history)
        total += loss_fn(logits_fn(batch, cands[sl])).item() * len(batch)
    return total / len(pairs)


# ------------------------------------------------------------------ model

@dataclass
class RecallnetModel:
    """Everything the three phases produce.

    ``recommender`` holds the encoders the evaluator was pre-trained with and
    stays frozen afterwards; ``actor`` starts as a copy of them plus a fresh
    synthesizer.
    """

    actor_config: ActorConfig
    train_config: TrainConfig
    recommender: ActorParams
    evaluator: EvaluatorParams
    validator: ValidatorParams
    actor: ActorParams
    phase: str = "init"
    log: list = field(default_factory=list)
    validator_accuracy: float = math.nan

    def critic(self):
        return CriticParams(self.evaluator, self.validator, self.train_config.measure)


def new_model(actor_config, train_config):
    actor_config.validate()
    train_config.validate()
    rng = phase_rng(train_config, "init")
    recommender = ActorParams(actor_config, rng)
    evaluator = EvaluatorParams(train_config.evaluator, actor_config.dim, actor_config.user_input_dim, rng)
    actor = ActorParams(actor_config, rng)
    validator = ValidatorParams(actor_config.dim, rng)
    return RecallnetModel(actor_config, train_config, recommender, evaluator, validator, actor)


def _rescale_rows(x, scale):
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.where(norms > 0, x / np.where(norms > 0, norms, 1.0) * scale, x)


def critic_table(model, table):
    """Item representations as the critic sees them.

    Under cosine retrieval only directions matter, so every item vector (and
    every key, see :func:`_key_scale`) is shown at the mean item norm; raw
    norms would let the evaluator rank by length, which retrieval ignores.
    """
    if model.train_config.measure != "cosine":
        return table
    scale = float(np.mean(np.linalg.norm(table, axis=1)))
    return _rescale_rows(table, scale) if scale > 0 else table


def recommender_logits(model, corpus, batch, cands):
    """Evaluator logits of the recommender for candidate items (B, C), through
    live encoders; under cosine the items are shown at their mean norm."""
    enc, u = _encode(model.recommender, corpus, batch, cands)
    v = enc.gather(cands)
    if model.train_config.measure == "cosine":
        v = nc.mul(nc.normalize(v), nc.mean(nc.euclidean_norm(v)))
    return evaluator_logit(model.evaluator, v, u)


def _table_logits(model, table, batch, cands, view=None):
    """Evaluator logits from precomputed item representations (frozen encoders).

    ``table`` feeds the user encoder, ``view`` (default ``table``) the evaluator.
    """
    rec = model.recommender
    if rec.config.user_mode == "attentive":
        theta_u = encode_users(rec, nc.Tensor(table[batch.hist]), batch.mask)
    else:
        theta_u = encode_user_ids(rec, batch.users)
    chan = user_channel(rec, theta_u, batch.intents)
    view = table if view is None else view
    return evaluator_logit(model.evaluator, nc.Tensor(view[cands]), chan)


def _inner_product_start(model, split, table, view, rng, n_pairs=512):
    """Reset the BI towers to identity maps so the evaluator starts as a scaled
    inner product, with the scale set for unit-variance logits on training pairs.

    ReLU towers over non-negative representations pass them through unchanged,
    so the starting ranking is the warmed-up encoders' own geometry.
    """
    ev = model.evaluator
    for tower, width in (("ffn1", ev.item_dim), ("ffn2", ev.user_dim)):
        ev[tower + "_W0"].data = np.eye(ev.hidden, width)
        ev[tower + "_b0"].data = np.zeros(ev.hidden)
        ev[tower + "_W1"].data = np.eye(ev.hidden)
        ev[tower + "_b1"].data = np.zeros(ev.hidden)
    ev["W_e"].data = np.ones((1, ev.hidden))
    cfg = model.train_config
    pairs = split.training_interactions()
    if not len(pairs):
        return
    pick = pairs[np.sort(rng.permutation(len(pairs))[:n_pairs])]
    batch = interaction_batch(split, pick, cfg.max_history)
    negs = _sampler(split, cfg).sample(batch.users, cfg.n_neg, rng)
    cands = np.concatenate([batch.targets[:, None], negs], axis=1)
    sd = float(np.std(_table_logits(model, table, batch, cands, view).data))
    if sd > 0 and math.isfinite(sd):
        gain = math.sqrt(1.0 / sd)
        ev["ffn1_W0"].data = ev["ffn1_W0"].data * gain
        ev["ffn2_W0"].data = ev["ffn2_W0"].data * gain


def pretrain_recommender(split, model):
    """Phase 1: fit encoders, then the evaluator, on next-item prediction.

    A BI evaluator trained jointly with random encoders stays at chance level,
    so the encoders are first fitted as a two-tower model under the configured
    similarity.  The evaluator (and the intent embedding, if any) is then
    trained on the fixed encoder outputs; a BI evaluator starts as their inner
    product.  With a zero learning rate the phase leaves every tensor untouched.
    """
    cfg = model.train_config
    rec = model.recommender
    corpus = split.corpus
    rng = phase_rng(cfg, "pretrain")
    encoders = {"rec." + k: rec[k] for k in rec.encoder_names() if k != "intent_emb"}
    if cfg.lr_pretrain > 0 and cfg.epochs_warmup:
        model.log.extend(_fit_ranking(
            split, encoders,
            lambda b, c: two_tower_logits(rec, corpus, b, c, cfg.measure, cfg.temperature),
            _softmax_loss, cfg, cfg.lr_pretrain, cfg.epochs_warmup, rng, "warmup",
        ))
    table = item_table(rec, corpus)
    view = critic_table(model, table)
    if cfg.lr_pretrain > 0 and model.evaluator.mode == "BI":
        _inner_product_start(model, split, table, view, rng)
    trainable = {"eva." + k: t for k, t in model.evaluator.tensors.items()}
    if "intent_emb" in rec.tensors:
        trainable["rec.intent_emb"] = rec["intent_emb"]
    model.log.extend(_fit_ranking(
        split, trainable,
        lambda b, c: _table_logits(model, table, b, c, view),
        lambda z: _bce_loss(z, cfg.objective),
        cfg, cfg.lr_pretrain, cfg.epochs_pretrain, rng, "pretrain",
    ))
    model.phase = "pretrain"
    return model


def ranking_auc(pos, neg):
    """Fraction of (positive, negative) pairs ranked correctly, ties counting half."""
    pos, neg = np.ravel(pos), np.ravel(neg)
    if not len(pos) or not len(neg):
        raise ContractError("AUC needs at least one positive and one negative score")
    neg = np.sort(neg)
    below = np.searchsorted(neg, pos, side="left")
    tied = np.searchsorted(neg, pos, side="right") - below
    return float((below.sum() + 0.5 * tied.sum()) / (len(pos) * len(neg)))


def heldout_auc(model, split, n_neg=None, rng=None):
    """Evaluator AUC of held-out targets against sampled unconsumed items."""
    cfg = model.train_config
    n_neg = cfg.n_neg if n_neg is None else n_neg
    rng = np.random.default_rng([cfg.seed, 99]) if rng is None else rng
    reqs = np.array([(u, j) for u in split.eval_users for j in range(len(split.test[u]))],
                    dtype=np.int64).reshape(-1, 2)
    table = item_table(model.recommender, split.corpus)
    view = critic_table(model, table)
    # negatives avoid held-out items too, so no target is scored against itself
    sampler = NegativeSampler(split.corpus.n_items,
                              [np.concatenate([a, b]) for a, b in zip(split.train, split.test)])
    pos, neg = [], []
    for sl in _chunks(len(reqs), 512):
        batch = request_batch(split, reqs[sl], cfg.max_history)
        negs = sampler.sample(batch.users, n_neg, rng)
        z = _table_logits(model, table, batch, np.concatenate([batch.targets[:, None], negs], axis=1), view).data
        pos.append(z[:, 0])
        neg.append(z[:, 1:].ravel())
    return ranking_auc(np.concatenate(pos), np.concatenate(neg))


# -------------------------------------------------------------- validator

def fit_validator(params, real, fake, lr, epochs, batch_size, rng, objective="standard-bce",
                  heldout_frac=0.1):
    """Train the real-vs-synthesized classifier; returns held-out accuracy."""
    X = np.vstack([real, fake])
    y = np.concatenate([np.ones(len(real)), np.zeros(len(fake))])
    perm = rng.permutation(len(X))
    n_held = int(round(heldout_frac * len(X)))
    held, train = perm[:n_held], perm[n_held:]
    opt = nc.make_optimizer("adam", params.tensors, lr)
    for _ in range(epochs):
        order = train[rng.permutation(len(train))]
        for sl in _chunks(len(order), batch_size):
            idx = order[sl]
            sign = nc.Tensor(2.0 * y[idx] - 1.0)
            z = validator_logit(params, X[idx])
            if objective == "standard-bce":
                loss = nc.scale(nc.sum(nc.log_sigmoid(nc.mul(z, sign))), -1.0 / len(idx))
            else:
                # log VAL(real) - log VAL(fake)
                loss = nc.scale(nc.sum(nc.mul(nc.log_sigmoid(z), sign)), -1.0 / len(idx))
            _check_finite(loss.data, "validator", 0)
            opt.zero_grad()
            nc.backward(loss)
            opt.step()
    opt.zero_grad()
    ev = held if n_held else train
    if not len(ev):
        return math.nan
    z = validator_logit(params, X[ev]).data
    return float(np.mean((z > 0) == (y[ev] > 0.5)))


def sample_keys(actor, split, n, rng, max_history=MAX_HISTORY):
    """Keys synthesized from ``n`` randomly sampled pieces of user history."""
    pairs = split.training_interactions()
    if not len(pairs):
        raise ContractError("no training interactions to synthesize keys from")
    pick = pairs[rng.integers(len(pairs), size=n)]
    out = np.empty((n, actor.config.dim))
    for sl in _chunks(n, 512):
        batch = interaction_batch(split, pick[sl], max_history)
        _, chan = _encode(actor, split.corpus, batch)
        out[sl] = synthesize_key(actor, chan).data
    return out


def _refit_validator(model, split, rng, epochs, scale=None):
    cfg = model.train_config
    real = item_table(model.actor, split.corpus)
    fake = sample_keys(model.actor, split, len(real), rng, cfg.max_history)
    if scale is None:
        scale = _key_scale(model, split)
    if scale is not None:
        # the validator judges items and keys as the critic will see them
        real = _rescale_rows(real, scale)
        fake = _rescale_rows(fake, scale)
    acc = fit_validator(model.validator, real, fake, cfg.lr_validator, epochs,
                        cfg.batch_size, rng, cfg.validator_objective)
    model.validator_accuracy = acc
    return acc


def _identity_synthesizer(actor):
    """Make every synthesizer layer pass the user representation through.

    The attentive user encoder ends in a ReLU, so its output survives the hidden ReLUs and
    the first key is the pre-trained user vector; intent columns start at zero.
    """
    for name in actor.synthesizer_names():
        t = actor[name]
        t.data = np.eye(*t.shape) if t.data.ndim == 2 else np.zeros(t.shape)


def init_validator(split, model):
    """Phase 2: seed the actor from the pre-trained encoders and fit the validator."""
    if model.phase != "pretrain":
        raise ContractError(f"validator initialization needs a pre-trained recommender (phase is {model.phase!r})")
    rec_state = model.recommender.state()
    state = model.actor.state()
    state.update({k: rec_state[k] for k in model.recommender.encoder_names()})
    model.actor.load_state(state)
    if model.train_config.synth_start == "identity":
        _identity_synthesizer(model.actor)
    acc = _refit_validator(model, split, phase_rng(model.train_config, "validator"),
                           model.train_config.epochs_validator)
    if acc < 0.6:
        log.warning("validator held-out accuracy %.3f: its reward will carry little signal", acc)
    log.info("validator initialized, held-out accuracy %.3f", acc)
    model.log.append(_row(0, "validator", 1.0 - acc))
    model.phase = "validator"
    return model


# ------------------------------------------------------------------ actor

def _frozen_user_channel(model, corpus, batch):
    _, u = _encode(model.recommender, corpus, batch)
    return u.data


def _static_inputs(model, split, pairs):
    """Synthesizer inputs, evaluator user channel and consumed-item reps for fixed encoders."""
    actor, cfg = model.actor, model.train_config
    n = len(pairs)
    chan = np.empty((n, actor.config.user_input_dim))
    cand = np.empty((n, actor.config.dim))
    table = item_table(actor, split.corpus)
    for sl in _chunks(n, 512):
        batch = interaction_batch(split, pairs[sl], cfg.max_history)
        _, c = _encode(actor, split.corpus, batch)
        chan[sl] = c.data
        cand[sl] = table[batch.targets]
    # with frozen encoders the actor's user channel is the evaluator's
    return chan, chan, cand


def _key_scale(model, split):
    """Mean norm of the actor's item representations.

    Under cosine retrieval only a key's direction matters, so the critic sees
    the key at the typical item norm; otherwise the evaluator and validator
    can be satisfied by inflating the norm, which does nothing for retrieval.
    """
    if model.train_config.measure != "cosine":
        return None
    norms = np.linalg.norm(item_table(model.actor, split.corpus), axis=1)
    scale = float(np.mean(norms))
    return scale if scale > 0 else None


def _critic_view(key, scale):
    return key if scale is None else nc.scale(nc.normalize(key), scale)


def _reward_batch(model, split, batch, static=None, scale=None):
    cfg = model.train_config
    if static is not None:
        chan, eval_user, cand = static
        key = synthesize_key(model.actor, nc.Tensor(chan))
        cand = nc.Tensor(cand)
    else:
        enc, chan = _encode(model.actor, split.corpus, batch, batch.targets)
        key = synthesize_key(model.actor, chan)
        cand = enc.gather(batch.targets)
        eval_user = _frozen_user_channel(model, split.corpus, batch)
    return compound_reward(model.critic(), _critic_view(key, scale), eval_user, cand, cfg.weights)


def train_actor(split, model):
    """Phase 3: ascend the compound reward; refresh the validator after epochs."""
    if model.phase not in ("validator", "actor"):
        raise ContractError(
            "actor training needs a pre-trained evaluator and an initialized validator "
            f"(phase is {model.phase!r})")
    cfg = model.train_config
    rng = phase_rng(cfg, "actor")
    actor = model.actor
    syn = {k: actor[k] for k in actor.synthesizer_names()}
    opts = [nc.make_optimizer(cfg.optimizer, syn, cfg.lr_actor, maximize=True)]
    frozen_encoders = cfg.lr_actor_encoder == 0.0
    if not frozen_encoders:
        enc = {k: actor[k] for k in actor.encoder_names()}
        opts.append(nc.make_optimizer(cfg.optimizer, enc, cfg.lr_actor_encoder, maximize=True))

    pairs = split.training_interactions()
    train_pairs, held_pairs = _partition(pairs, cfg.heldout_frac, rng)
    static = _static_inputs(model, split, train_pairs) if frozen_encoders else None
    held_static = _static_inputs(model, split, held_pairs) if frozen_encoders and len(held_pairs) else None
    we, wv, wr = cfg.weights
    scale = _key_scale(model, split)

    for epoch in range(1, cfg.epochs_actor + 1):
        if not frozen_encoders:
            scale = _key_scale(model, split)
        sums = np.zeros(4)
        order = rng.permutation(len(train_pairs))
        for sl in _chunks(len(order), cfg.batch_size):
            idx = order[sl]
            batch = interaction_batch(split, train_pairs[idx], cfg.max_history)
            st = tuple(a[idx] for a in static) if static is not None else None
            rb = _reward_batch(model, split, batch, st, scale)
            objective = nc.mean(rb.total)
            if not np.isfinite(objective.data).all():
                m = rb.means()
                raise TrainingDiverged(
                    f"actor reward non-finite at epoch {epoch}: phi={m['phi']} omega={m['omega']} gamma={m['gamma']}")
            for o in opts:
                o.zero_grad()
            model.evaluator.zero_grad()
            model.validator.zero_grad()
            nc.backward(objective)
            for o in opts:
                o.step()
            n = len(idx)
            sums += n * np.array([rb.phi.data.mean(), rb.omega.data.mean(), rb.gamma.data.mean(), rb.total.data.mean()])
        for o in opts:
            o.zero_grad()
        model.evaluator.zero_grad()
        model.validator.zero_grad()
        phi, omega, gamma, _ = sums / max(len(order), 1)
        total = we * phi + wv * omega + wr * gamma
        held_loss = math.nan
        if len(held_pairs):
            held_loss = -_mean_reward(model, split, held_pairs, held_static, scale)
        model.log.append(_row(epoch, "actor", held_loss, phi, omega, gamma, total))
        log.info("actor epoch %d phi %.4f omega %.4f gamma %.4f total %.4f", epoch, phi, omega, gamma, total)
        if epoch % cfg.refresh_every == 0 and cfg.epochs_refresh > 0:
            _refit_validator(model, split, rng, cfg.epochs_refresh, scale)
    model.phase = "actor"
    return model


def _mean_reward(model, split, pairs, static=None, scale=None):
    total = 0.0
    for sl in _chunks(len(pairs), 512):
        batch = interaction_batch(split, pairs[sl], model.train_config.max_history)
        st = tuple(a[sl] for a in static) if static is not None else None
        total += float(np.sum(_reward_batch(model, split, batch, st, scale).total.data))
    return total / len(pairs)


def reward_means(model, split, pairs=None):
    """Mean (phi, omega, gamma, total) of the current actor over training interactions."""
    if pairs is None:
        pairs = split.training_interactions()
    scale = _key_scale(model, split)
    sums = np.zeros(4)
    for sl in _chunks(len(pairs), 512):
        batch = interaction_batch(split, pairs[sl], model.train_config.max_history)
        rb = _reward_batch(model, split, batch, scale=scale)
        sums += [rb.phi.data.sum(), rb.omega.data.sum(), rb.gamma.data.sum(), rb.total.data.sum()]
    return dict(zip(("phi", "omega", "gamma", "total"), sums / len(pairs)))


def retrieval_keys(model, split, users, intents=None):
    """Keys for requests issued after each user's training history."""
    cfg = model.train_config
    users = np.asarray(users, dtype=np.int64)
    out = np.empty((len(users), model.actor_config.dim))
    for sl in _chunks(len(users), 512):
        batch = query_batch(split, users[sl], None if intents is None else np.asarray(intents)[sl], cfg.max_history)
        _, chan = _encode(model.actor, split.corpus, batch)
        out[sl] = synthesize_key(model.actor, chan).data
    return out


def batch_keys(model, corpus, batch):
    """Retrieval keys for a request batch: synthesized for Recallnet, the user
    tower's output for two-tower models."""
    if isinstance(model, RecallnetModel):
        _, chan = _encode(model.actor, corpus, batch)
        return synthesize_key(model.actor, chan).data
    _, u = _encode(model.params, corpus, batch, with_aux=False)
    return u.data


def train_recallnet(split, actor_config, train_config):
    model = new_model(actor_config, train_config)
    pretrain_recommender(split, model)
    init_validator(split, model)
    train_actor(split, model)
    return model


# -------------------------------------------------------------- baselines

@dataclass
class TwoTowerModel:
    kind: str
    params: ActorParams
    measure: str
    train_config: TrainConfig
    log: list = field(default_factory=list)
    seen_users: np.ndarray = None

    @property
    def unseen_count(self):
        return 0 if self.seen_users is None else int((~self.seen_users).sum())


def two_tower_logits(params, corpus, batch, cands, measure, temperature):
    enc, u = _encode(params, corpus, batch, cands, with_aux=False)
    v = enc.gather(cands)
    u = nc.reshape(u, (u.shape[0], 1, u.shape[1]))
    if measure == "cosine":
        # ReLU towers can emit exact zeros; eps keeps the cosine defined
        return nc.scale(nc.cosine(u, v, eps=1e-12), temperature)
    return nc.neg(nc.euclidean_norm(nc.sub(v, u)))


def _train_two_tower(split, actor_config, config, kind):
    config.validate()
    rng = phase_rng(config, kind.lower())
    params = ActorParams(actor_config, rng)
    trainable = {k: params[k] for k in params.encoder_names()}
    corpus = split.corpus
    rows = _fit_ranking(
        split, trainable,
        lambda b, c: two_tower_logits(params, corpus, b, c, config.measure, config.temperature),
        _softmax_loss, config, config.lr_baseline, config.epochs_baseline, rng, kind.lower(),
    )
    return TwoTowerModel(kind, params, config.measure, config, rows)


def train_dssm(split, actor_config, config):
    """Two towers with the actor's encoder structures; the user vector is the key."""
    cfg = ActorConfig(**{**asdict(actor_config), "user_mode": "attentive", "aux_mode": "none"})
    return _train_two_tower(split, cfg, config, "DSSM")


def train_cml(split, actor_config, config):
    """Id-embedding users against encoded items."""
    cfg = ActorConfig(**{**asdict(actor_config), "user_mode": "id", "aux_mode": "none",
                         "n_users": split.corpus.n_users})
    model = _train_two_tower(split, cfg, config, "CML")
    seen = np.zeros(split.corpus.n_users, dtype=bool)
    pairs = split.training_interactions()
    seen[np.unique(pairs[:, 0])] = True
    model.seen_users = seen
    unseen_eval = int((~seen[split.eval_users]).sum()) if len(split.eval_users) else 0
    if unseen_eval:
        log.warning("CML: %d evaluation users have no training interactions and are excluded", unseen_eval)
    return model


def two_tower_keys(model, split, users):
    users = np.asarray(users, dtype=np.int64)
    out = np.empty((len(users), model.params.config.dim))
    for sl in _chunks(len(users), 512):
        batch = query_batch(split, users[sl], None, model.train_config.max_history)
        _, u = _encode(model.params, split.corpus, batch)
        out[sl] = u.data
    return out


# ------------------------------------------------------------ persistence

@dataclass
class Checkpoint:
    phase: str
    config: dict
    metrics: dict
    sections: dict


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def encode_checkpoint(phase, sections, config=None, metrics=None):
    header = json.dumps(_jsonable({"phase": phase, "config": config or {}, "metrics": metrics or {}}),
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<Q", len(header))
    buf += header
    buf += struct.pack("<Q", len(sections))
    for name in sorted(sections):
        write_str(buf, name)
        state = sections[name]
        buf += nc.encode_tensors({k: state[k] for k in sorted(state)})
    return bytes(buf)


def decode_checkpoint(raw):
    view = memoryview(raw)
    if bytes(view[:8]) != CKPT_MAGIC:
        raise FormatError("not a recallnet checkpoint (bad magic)")
    n, pos = read_u64(view, 8)
    if pos + n > len(view):
        raise FormatError("truncated checkpoint header")
    header = json.loads(bytes(view[pos:pos + n]).decode("utf-8"))
    pos += n
    count, pos = read_u64(view, pos)
    sections = {}
    for _ in range(count):
        name, pos = read_str(view, pos)
        sections[name], pos = nc.decode_tensors(view, pos)
    if pos != len(view):
        raise FormatError("trailing bytes after checkpoint sections")
    return Checkpoint(header["phase"], header["config"], header["metrics"], sections)


def save_checkpoint(path, phase, sections, config=None, metrics=None):
    raw = encode_checkpoint(phase, sections, config, metrics)
    with open(path, "wb") as fh:
        fh.write(raw)
    return raw


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def model_sections(model):
    sections = {"evaluator": model.evaluator.state(), "validator": model.validator.state(),
                "actor": model.actor.state()}
    rec = model.recommender.state()
    sections["recommender"] = {k: rec[k] for k in model.recommender.encoder_names()}
    return sections


def model_config(model):
    return {"actor": asdict(model.actor_config), "train": asdict(model.train_config)}


def save_model(path, model):
    metrics = {"log": model.log, "validator_accuracy": model.validator_accuracy}
    return save_checkpoint(path, model.phase, model_sections(model), model_config(model), metrics)


def load_model(path):
    ck = load_checkpoint(path)
    if ck.phase not in PHASES:
        raise FormatError(f"unknown phase marker {ck.phase!r}")
    try:
        actor_config = ActorConfig(**ck.config["actor"])
        tc = dict(ck.config["train"])
        tc["weights"] = tuple(tc["weights"])
        train_config = TrainConfig(**tc)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"checkpoint config unreadable: {exc}") from None
    model = new_model(actor_config, train_config)
    model.evaluator.load_state(ck.sections["evaluator"])
    model.validator.load_state(ck.sections["validator"])
    model.actor.load_state(ck.sections["actor"])
    rec = model.recommender.state()
    rec.update(ck.sections["recommender"])
    model.recommender.load_state(rec)
    model.phase = ck.phase
    model.log = [{k: (math.nan if v is None and k == "heldout_loss" else v) for k, v in r.items()}
                 for r in ck.metrics.get("log", [])]
    acc = ck.metrics.get("validator_accuracy")
    model.validator_accuracy = math.nan if acc is None else acc
    return model


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([_fmt(r.get(k)) for k in METRIC_FIELDS])
