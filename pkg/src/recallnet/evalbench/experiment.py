"""Experiment matrix: train each method, index all items, retrieve per held-out
request and aggregate the ranking metrics over seeds."""
import copy
import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import retrieval, trainer
from ..actor import ActorConfig, item_table
from ..critic import evaluator_logit
from ..data import build_vocab, index_corpus, split_leave_last
from ..errors import ConfigError, DomainError, RecallnetError
from .metrics import alignment_rate, mrr, ndcg_at_k, nll_at_k, recall_at_k, sample_triples

log = logging.getLogger(__name__)

METHODS = ("SYN", "DSSM", "CML", "AVG")
SIMILARITIES = {"COS": "cosine", "EUC": "euclidean"}
EVALUATORS = ("BI", "FC")
USER_ENCODERS = ("default", "id-embedding")
AUX_INPUTS = ("none", "intent")
CRITICS = ("EVA", "EVA+VAL", "EVA+REF", "COMPOUND")
RECALL_KS = (10, 50, 100)
NDCG_KS = (10, 50)
NLL_KS = (10, 50)
N_TRIPLES = 10_000
CSV_FIELDS = ("method", "similarity", "evaluator", "user_encoder", "aux", "critic", "seed", "metric", "value")
NA = "-"


def metric_names():
    return ([f"recall@{k}" for k in RECALL_KS] + ["mrr"] + [f"ndcg@{k}" for k in NDCG_KS]
            + [f"nll@{k}" for k in NLL_KS] + ["alignment_rate"])


@dataclass(frozen=True)
class RowKey:
    method: str
    similarity: str
    evaluator: str = NA
    user_encoder: str = NA
    aux: str = NA
    critic: str = NA

    def label(self):
        parts = [self.method, self.similarity]
        parts += [p for p in (self.evaluator, self.user_encoder, self.aux, self.critic) if p != NA]
        return "/".join(parts)


@dataclass(frozen=True)
class ExperimentSpec:
    methods: tuple = ("SYN", "DSSM", "AVG")
    similarity: tuple = ("COS",)
    evaluator: tuple = ("BI",)
    user_encoder: tuple = ("default",)
    aux: tuple = ("none",)
    critic: tuple = ("COMPOUND",)
    seeds: tuple = (0,)

    def validate(self):
        axes = {
            "methods": (self.methods, METHODS), "similarity": (self.similarity, tuple(SIMILARITIES)),
            "evaluator": (self.evaluator, EVALUATORS), "user_encoder": (self.user_encoder, USER_ENCODERS),
            "aux": (self.aux, AUX_INPUTS), "critic": (self.critic, CRITICS),
        }
        for name, (vals, allowed) in axes.items():
            if not vals:
                raise ConfigError(f"experiment axis {name} is empty")
            bad = [v for v in vals if v not in allowed]
            if bad:
                raise ConfigError(f"experiment axis {name}: unknown {bad}, allowed {allowed}")
            if len(set(vals)) != len(vals):
                raise ConfigError(f"experiment axis {name} repeats a value")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be a non-empty list without repeats")

    def rows(self):
        """Configurations in a fixed order; the critic/evaluator/encoder/aux axes apply to SYN only."""
        out = []
        for method in self.methods:
            for sim in self.similarity:
                if method == "SYN":
                    for ev in self.evaluator:
                        for ue in self.user_encoder:
                            for aux in self.aux:
                                for cr in self.critic:
                                    out.append(RowKey(method, sim, ev, ue, aux, cr))
                elif method == "AVG":
                    out.append(RowKey(method, sim))
                else:
                    ue = "id-embedding" if method == "CML" else "default"
                    out.append(RowKey(method, sim, user_encoder=ue))
        return out


@dataclass
class ExperimentData:
    """A split corpus plus what the learning-free baseline needs."""
    split: object
    vocab_size: int
    item_words: list
    word_vectors: dict = None


def prepare_data(corpus, word_vectors=None, n_test=1, min_freq=1):
    vocab = build_vocab(corpus, min_freq)
    split = split_leave_last(index_corpus(corpus, vocab), n_test)
    return ExperimentData(split, len(vocab), [it.words for it in corpus.items], word_vectors)


@dataclass
class MetricsReport:
    rows: list
    seeds: tuple
    values: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    # wall-clock seconds per (row, seed); ("setup", seed) is the shared reference model
    seconds: dict = field(default_factory=dict)

    def metric(self, row, name):
        """Per-seed values of one metric for one row (failed seeds omitted)."""
        return [self.values[(row, s)][name] for s in self.seeds
                if (row, s) in self.values and name in self.values[(row, s)]]

    def mean(self, row, name):
        v = self.metric(row, name)
        return float(np.mean(v)) if v else math.nan

    def std(self, row, name):
        v = self.metric(row, name)
        return float(np.std(v)) if v else math.nan

    def find(self, **fields):
        """The unique row whose fields match ``fields``."""
        hits = [r for r in self.rows if all(getattr(r, k) == v for k, v in fields.items())]
        if len(hits) != 1:
            raise DomainError(f"{len(hits)} report rows match {fields}")
        return hits[0]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        names = metric_names()
        for row in self.rows:
            head = [row.method, row.similarity, row.evaluator, row.user_encoder, row.aux, row.critic]
            for s in self.seeds:
                if (row, s) in self.failures:
                    w.writerow(head + [s, "failed", self.failures[(row, s)]])
                for name in names:
                    vals = self.values.get((row, s), {})
                    if name in vals:
                        w.writerow(head + [s, name, repr(float(vals[name]))])
            for agg, fn in (("mean", self.mean), ("std", self.std)):
                for name in names:
                    if self.metric(row, name):
                        w.writerow(head + [agg, name, repr(fn(row, name))])
        return buf.getvalue()

    def to_table(self):
        names = [n for n in metric_names() if any(self.metric(r, n) for r in self.rows)]
        width = max([len(r.label()) for r in self.rows] + [6])
        lines = [f"seeds: {', '.join(str(s) for s in self.seeds)}",
                 " ".join(["config".ljust(width)] + [n.rjust(17) for n in names])]
        for row in self.rows:
            cells = [f"{self.mean(row, n):.4f}±{self.std(row, n):.4f}".rjust(17) for n in names]
            lines.append(" ".join([row.label().ljust(width)] + cells))
            for s in self.seeds:
                if (row, s) in self.failures:
                    lines.append(f"  seed {s} failed: {self.failures[(row, s)]}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem="report"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, txt_path = out / f"{stem}.csv", out / f"{stem}.txt"
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        txt_path.write_text(self.to_table(), encoding="utf-8")
        return csv_path, txt_path


# ------------------------------------------------------------- baselines

@dataclass
class AvgModel:
    """Learning-free baseline: items are mean word vectors, keys are mean item vectors."""
    item_reps: np.ndarray
    empty: np.ndarray

    def keys(self, split, batch):
        out = np.zeros((len(batch), self.item_reps.shape[1]))
        for r in range(len(batch)):
            hist = batch.hist[r][batch.mask[r]]
            if len(hist):
                out[r] = self.item_reps[hist].mean(axis=0)
        return out


def run_baseline_avg(corpus, word_vectors):
    """Average-word-vector items; ``corpus`` is a Corpus or per-item word lists."""
    words = [it.words for it in corpus.items] if hasattr(corpus, "items") else list(corpus)
    if not word_vectors:
        raise DomainError("the averaging baseline needs a word-vector table")
    dim = len(next(iter(word_vectors.values())))
    reps = np.zeros((len(words), dim))
    empty = np.zeros(len(words), dtype=bool)
    for i, ws in enumerate(words):
        vecs = [word_vectors[w] for w in ws if w in word_vectors]
        if vecs:
            reps[i] = np.mean(vecs, axis=0)
        else:
            empty[i] = True
    if empty.any():
        log.warning("%d items have no known words; they get zero vectors", int(empty.sum()))
    return AvgModel(reps, empty)


# ------------------------------------------------------------- the matrix

def critic_weights(critic, base):
    we, wv, wr = base
    return {"EVA": (we, 0.0, 0.0), "EVA+VAL": (we, wv, 0.0),
            "EVA+REF": (we, 0.0, wr), "COMPOUND": (we, wv, wr)}[critic]


def actor_config_for(data, base, user_encoder="default", aux="none"):
    cfg = replace(base, vocab_size=data.vocab_size, user_mode="attentive", aux_mode="none")
    if user_encoder == "id-embedding":
        cfg = replace(cfg, user_mode="id", n_users=data.split.corpus.n_users)
    if aux == "intent":
        names = data.split.corpus.intent_names
        if not names:
            raise ConfigError("the intent input needs per-interaction intent labels in the corpus")
        cfg = replace(cfg, aux_mode="intent", n_intents=len(names))
    return cfg


class _Trained:
    """Per-seed cache so critic ablations share one pre-trained recommender."""

    def __init__(self, data, actor_base, train_base, seed):
        self.data = data
        self.actor_base = actor_base
        self.train_base = replace(train_base, seed=seed)
        self.seed = seed
        self._pre = {}

    def pretrained(self, sim, ev, ue, aux):
        key = (sim, ev, ue, aux)
        if key not in self._pre:
            ac = actor_config_for(self.data, self.actor_base, ue, aux)
            tc = replace(self.train_base, measure=SIMILARITIES[sim], evaluator=ev)
            model = trainer.new_model(ac, tc)
            trainer.pretrain_recommender(self.data.split, model)
            trainer.init_validator(self.data.split, model)
            self._pre[key] = model
        return self._pre[key]

    def reference(self):
        """The BI recommender pre-trained under cosine: the shared interest model."""
        return self.pretrained("COS", "BI", "default", "none")

    def model(self, row):
        split = self.data.split
        if row.method == "AVG":
            return run_baseline_avg(self.data.item_words, self.data.word_vectors)
        tc = replace(self.train_base, measure=SIMILARITIES[row.similarity])
        if row.method == "DSSM":
            return trainer.train_dssm(split, actor_config_for(self.data, self.actor_base), tc)
        if row.method == "CML":
            return trainer.train_cml(split, actor_config_for(self.data, self.actor_base), tc)
        base = self.pretrained(row.similarity, row.evaluator, row.user_encoder, row.aux)
        model = copy.deepcopy(base)
        model.train_config = replace(base.train_config, weights=critic_weights(row.critic, self.train_base.weights))
        return trainer.train_actor(split, model)


def _item_reps(model, corpus):
    if isinstance(model, AvgModel):
        return model.item_reps
    params = model.actor if isinstance(model, trainer.RecallnetModel) else model.params
    return item_table(params, corpus)


def _keys(model, split, batch):
    if isinstance(model, AvgModel):
        return model.keys(split, batch)
    return trainer.batch_keys(model, split.corpus, batch)


def _interest(model, corpus, batch, cands):
    """Evaluator logits of ``model``'s recommender for candidate rows (B, C)."""
    table = trainer.critic_table(model, item_table(model.recommender, corpus))
    _, chan = trainer._encode(model.recommender, corpus, batch)
    out = np.empty(cands.shape)
    for r in range(len(batch)):
        out[r] = evaluator_logit(model.evaluator, table[cands[r]], chan.data[r]).data
    return out


def requests(split):
    return np.array([(u, j) for u in split.eval_users for j in range(len(split.test[u]))],
                    dtype=np.int64).reshape(-1, 2)


def retrieve_all(index, keys, K):
    return [retrieval.query(index, k, K) for k in keys]


def evaluate_model(model, measure, data, reference=None, seed=0, n_triples=N_TRIPLES):
    """All metrics for one trained model: index every item, retrieve per request."""
    split = data.split
    corpus = split.corpus
    reqs = requests(split)
    if not len(reqs):
        raise DomainError("no held-out requests to evaluate")
    cfg = getattr(model, "train_config", None)
    max_history = cfg.max_history if cfg is not None else trainer.MAX_HISTORY
    batch = trainer.request_batch(split, reqs, max_history)
    reps = _item_reps(model, corpus)
    index = retrieval.build_index(zip(range(corpus.n_items), reps), measure)
    keys = _keys(model, split, batch)
    depth = max(RECALL_KS + NDCG_KS + NLL_KS)
    results = retrieve_all(index, keys, depth)
    ranked = [[int(i) for i in res.ids] for res in results]
    out = {}
    rel = [{int(t)} for t in batch.targets]
    for k in RECALL_KS:
        out[f"recall@{k}"] = float(np.mean([recall_at_k(r, g, k) for r, g in zip(ranked, rel)]))
    out["mrr"] = float(np.mean([mrr(r, g) for r, g in zip(ranked, rel)]))
    for k in NDCG_KS:
        out[f"ndcg@{k}"] = float(np.mean([ndcg_at_k(r, g, k) for r, g in zip(ranked, rel)]))
    if reference is not None:
        width = max(NLL_KS)
        cands = np.array([(r + [r[-1]] * width)[:width] for r in ranked], dtype=np.int64)
        probs = 1.0 / (1.0 + np.exp(-_interest(reference, corpus, batch, cands)))
        for k in NLL_KS:
            out[f"nll@{k}"] = float(np.mean([nll_at_k(p[:min(k, len(r))]) for p, r in zip(probs, ranked)]))
        judge = model if isinstance(model, trainer.RecallnetModel) else reference
        out["alignment_rate"] = model_alignment(model, judge, split, batch, reps, measure, seed, n_triples)
    return out


def model_alignment(model, judge, split, batch, reps, measure, seed=0, n_triples=N_TRIPLES):
    """Interest/similarity agreement over random (request, a, b) triples.

    ``judge`` supplies the interest scores; ``model`` the keys and item
    representations being judged.
    """
    rng = np.random.default_rng([seed, 0xA1])
    triples = sample_triples(np.arange(len(batch)), split.corpus.n_items, n_triples, rng)
    rows = triples[:, 0]
    sub = trainer.Batch(batch.users[rows], batch.hist[rows], batch.mask[rows], batch.intents[rows])
    keys = _keys(model, split, sub)
    interest = _interest(judge, split.corpus, sub, triples[:, 1:])
    return alignment_rate(keys, reps[triples[:, 1]], reps[triples[:, 2]],
                          interest[:, 0], interest[:, 1], measure)


def run_experiment(spec, data, actor_config, train_config, n_triples=N_TRIPLES, references=None):
    """Train, index, retrieve and score every configuration of ``spec`` per seed.

    If ``references`` is a dict, the per-seed reference model is stored in it.
    """
    spec.validate()
    rows = spec.rows()
    report = MetricsReport(rows, tuple(spec.seeds))
    needs_reference = any(r.method != "AVG" for r in rows)
    for seed in spec.seeds:
        cache = _Trained(data, actor_config, train_config, seed)
        reference = None
        start = time.perf_counter()
        if needs_reference:
            try:
                reference = cache.reference()
            except RecallnetError as exc:
                log.error("seed %s: reference recommender failed: %s", seed, exc)
        report.seconds[("setup", seed)] = time.perf_counter() - start
        if references is not None:
            references[seed] = reference
        for row in rows:
            start = time.perf_counter()
            try:
                model = cache.model(row)
                report.values[(row, seed)] = evaluate_model(
                    model, SIMILARITIES[row.similarity], data, reference, seed, n_triples)
            except RecallnetError as exc:
                report.failures[(row, seed)] = f"{type(exc).__name__}: {exc}"
                log.error("%s seed %s failed: %s", row.label(), seed, exc)
            else:
                log.info("%s seed %s recall@50 %.4f", row.label(), seed,
                         report.values[(row, seed)]["recall@50"])
            report.seconds[(row, seed)] = time.perf_counter() - start
    return report
