"""Ranking metrics, the interest/similarity alignment rate and the experiment matrix."""
from .experiment import (
    AUX_INPUTS, CRITICS, EVALUATORS, METHODS, N_TRIPLES, SIMILARITIES, USER_ENCODERS, AvgModel,
    ExperimentData, ExperimentSpec, MetricsReport, RowKey, critic_weights, evaluate_model,
    metric_names, model_alignment, prepare_data, run_baseline_avg, run_experiment,
)
from .metrics import (
    alignment_rate, mrr, ndcg_at_k, nll_at_k, pair_similarity, recall_at_k, sample_triples,
)

__all__ = [
    "recall_at_k", "mrr", "ndcg_at_k", "nll_at_k", "alignment_rate", "pair_similarity",
    "sample_triples", "ExperimentSpec", "ExperimentData", "MetricsReport", "RowKey", "AvgModel",
    "run_baseline_avg", "run_experiment", "evaluate_model", "model_alignment", "prepare_data",
    "critic_weights", "metric_names", "METHODS", "SIMILARITIES", "EVALUATORS", "USER_ENCODERS",
    "AUX_INPUTS", "CRITICS", "N_TRIPLES",
]
