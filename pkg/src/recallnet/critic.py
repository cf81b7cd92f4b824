"""Evaluator, validator, referencer and the compound reward.

Every reward is a log-probability-like quantity in (-inf, 0]; the actor
ascends their weighted sum.
"""
import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, DimensionError, DomainError
from .params import ParamSet, fan_in_uniform

EVALUATOR_MODES = ("BI", "FC")
MEASURES = ("cosine", "euclidean")
SIM_FLOOR = 1e-7
LOG_SIM_FLOOR = math.log(SIM_FLOOR)


class EvaluatorParams(ParamSet):
    """BI: two 2-layer towers and a weighting vector; FC: a 2-layer net on the concatenation."""

    def __init__(self, mode, item_dim, user_dim, rng, hidden=None):
        if mode not in EVALUATOR_MODES:
            raise ConfigError(f"evaluator mode must be one of {EVALUATOR_MODES}")
        self.mode = mode
        self.item_dim = item_dim
        self.user_dim = user_dim
        h = hidden or item_dim
        self.hidden = h
        if mode == "BI":
            arrays = {
                "ffn1_W0": fan_in_uniform(rng, (h, item_dim), item_dim), "ffn1_b0": np.zeros(h),
                "ffn1_W1": fan_in_uniform(rng, (h, h), h), "ffn1_b1": np.zeros(h),
                "ffn2_W0": fan_in_uniform(rng, (h, user_dim), user_dim), "ffn2_b0": np.zeros(h),
                "ffn2_W1": fan_in_uniform(rng, (h, h), h), "ffn2_b1": np.zeros(h),
                "W_e": fan_in_uniform(rng, (1, h), h),
            }
        else:
            fan = item_dim + user_dim
            arrays = {
                "fc_W0": fan_in_uniform(rng, (h, fan), fan), "fc_b0": np.zeros(h),
                "fc_W1": fan_in_uniform(rng, (1, h), h), "fc_b1": np.zeros(1),
            }
        super().__init__(arrays)


def _ffn(x, p, prefix):
    h = nc.relu(nc.affine(x, p[prefix + "_W0"], p[prefix + "_b0"]))
    return nc.affine(h, p[prefix + "_W1"], p[prefix + "_b1"])


def _expand(t, shape):
    """Broadcast ``t`` to ``shape`` as a graph node (gradient sums back)."""
    if t.shape == tuple(shape):
        return t
    return nc.add(t, nc.Tensor(np.zeros(shape)))


def _align_user(item_rep, user_rep):
    # (B, d_u) against (B, n, d) -> (B, 1, d_u)
    if user_rep.ndim == item_rep.ndim - 1 and item_rep.ndim >= 2:
        return nc.reshape(user_rep, user_rep.shape[:-1] + (1, user_rep.shape[-1]))
    return user_rep


def evaluator_logit(params, item_rep, user_rep):
    item_rep, user_rep = nc.as_tensor(item_rep), nc.as_tensor(user_rep)
    if item_rep.shape[-1] != params.item_dim or user_rep.shape[-1] != params.user_dim:
        raise DimensionError(
            f"evaluator expects item width {params.item_dim} and user width {params.user_dim}, "
            f"got {item_rep.shape[-1]} and {user_rep.shape[-1]}")
    user_rep = _align_user(item_rep, user_rep)
    if params.mode == "BI":
        a = _ffn(item_rep, params, "ffn1")
        b = _ffn(user_rep, params, "ffn2")
        z = nc.affine(nc.mul(a, b), params["W_e"])
    else:
        lead = np.broadcast_shapes(item_rep.shape[:-1], user_rep.shape[:-1])
        x = nc.concat([_expand(item_rep, lead + (item_rep.shape[-1],)),
                       _expand(user_rep, lead + (user_rep.shape[-1],))], axis=-1)
        z = _ffn(x, params, "fc")
    return nc.reshape(z, z.shape[:-1])


def evaluate(params, item_rep, user_rep):
    """log sigma of the evaluator logit.  A retrieval key is scored exactly like an item."""
    return nc.log_sigmoid(evaluator_logit(params, item_rep, user_rep))


class ValidatorParams(ParamSet):
    def __init__(self, dim, rng, hidden=64):
        self.dim = dim
        super().__init__({
            "W0": fan_in_uniform(rng, (hidden, dim), dim), "b0": np.zeros(hidden),
            "W1": fan_in_uniform(rng, (hidden, hidden), hidden), "b1": np.zeros(hidden),
            "W2": fan_in_uniform(rng, (1, hidden), hidden), "b2": np.zeros(1),
        })


def validator_logit(params, vec):
    vec = nc.as_tensor(vec)
    if vec.shape[-1] != params.dim:
        raise DimensionError(f"validator expects width {params.dim}, got {vec.shape[-1]}")
    h = nc.relu(nc.affine(vec, params["W0"], params["b0"]))
    h = nc.relu(nc.affine(h, params["W1"], params["b1"]))
    z = nc.affine(h, params["W2"], params["b2"])
    return nc.reshape(z, z.shape[:-1])


def validator_score(params, vec):
    """Log-likelihood that ``vec`` is a real item representation."""
    return nc.log_sigmoid(validator_logit(params, vec))


def similarity(key, item_rep, measure):
    """Similarity mapped into [SIM_FLOOR, 1] (as a graph node)."""
    if measure == "cosine":
        return nc.clamp(nc.scale(nc.add(nc.cosine(key, item_rep), 1.0), 0.5), SIM_FLOOR, 1.0)
    if measure == "euclidean":
        raise DomainError("use referencer() for the euclidean log-similarity")
    raise ConfigError(f"unknown measure {measure!r}")


def referencer(key, item_rep, measure="cosine"):
    """Log-similarity between a key and a consumed item's representation."""
    key, item_rep = nc.as_tensor(key), nc.as_tensor(item_rep)
    if key.shape[-1] != item_rep.shape[-1]:
        raise DimensionError(f"referencer: {key.shape} vs {item_rep.shape}")
    if measure == "cosine":
        return nc.log(similarity(key, item_rep, measure))
    if measure == "euclidean":
        # log(1 / (1 + ||k - v||)), floored like the cosine branch
        dist = nc.euclidean_norm(nc.sub(key, item_rep))
        return nc.clamp(nc.neg(nc.log(nc.add(dist, 1.0))), LOG_SIM_FLOOR, 0.0)
    raise ConfigError(f"unknown measure {measure!r}")


@dataclass
class CriticParams:
    evaluator: EvaluatorParams
    validator: ValidatorParams
    measure: str = "cosine"


@dataclass
class RewardBreakdown:
    phi: nc.Tensor
    omega: nc.Tensor
    gamma: nc.Tensor
    weights: tuple
    total: nc.Tensor

    def means(self):
        return {
            "phi": float(np.mean(self.phi.data)),
            "omega": float(np.mean(self.omega.data)),
            "gamma": float(np.mean(self.gamma.data)),
            "total": float(np.mean(self.total.data)),
        }


def compound_reward(critic, key, user_rep, candidate_rep, weights=(1.0, 1.0, 1.0)):
    """Weighted evaluation + validation + reference reward for a batch of keys.

    ``user_rep`` is the evaluator's user-channel input; ``candidate_rep`` is
    the representation of the item the user actually consumed.
    """
    we, wv, wr = (float(w) for w in weights)
    phi = evaluate(critic.evaluator, key, user_rep)
    omega = validator_score(critic.validator, key)
    gamma = referencer(key, candidate_rep, critic.measure)
    total = nc.add(nc.add(nc.scale(phi, we), nc.scale(omega, wv)), nc.scale(gamma, wr))
    return RewardBreakdown(phi, omega, gamma, (we, wv, wr), total)
