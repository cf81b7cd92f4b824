"""Command-line front end: synth-data, train, index, retrieve, eval.

Configuration is an INI file whose sections mirror the config dataclasses:

  [run]         seed, out
  [data]        dir (holding items.jsonl/users.jsonl/words.tsv) or items, users, words;
                min_freq, n_test, max_tokens
  [synth]       every SynthConfig field
  [actor]       ActorConfig fields except the corpus-derived vocab_size, n_users, n_intents
  [train]       every TrainConfig field except seed; weights as "eval, val, ref"
  [experiment]  methods, similarity, evaluator, user_encoder, aux, critic (comma lists),
                seeds, n_triples

Unknown sections or keys are rejected.  ``--set section.key=value`` overrides
any key; ``--seed`` and ``--out`` override [run].  Artifacts go to
``<out>/<UTC timestamp>-seed<seed>/`` unless ``--run-dir`` names one.

Exit codes: 0 success, 2 bad configuration or arguments, 3 unreadable or
invalid input files, 4 a training phase failed, 5 unknown user.
"""
import argparse
import configparser
import dataclasses
import datetime
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import retrieval, trainer
from .actor import ActorConfig, item_table
from .data import (
    MAX_TOKENS, SynthConfig, build_vocab, generate_synthetic, index_corpus, load_corpus,
    read_word_vectors, split_leave_last, write_synthetic,
)
from .errors import ConfigError, ContractError, FormatError, ParseError, RecallnetError
from .evalbench import ExperimentData, ExperimentSpec, N_TRIPLES, run_experiment

log = logging.getLogger("recallnet")

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_PHASE, EXIT_USER = 0, 2, 3, 4, 5
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
PHASE_FILES = {"pretrain": "ckpt_pretrain.bin", "validator": "ckpt_validator.bin", "actor": "ckpt_actor.bin"}
DERIVED_ACTOR_KEYS = ("vocab_size", "n_users", "n_intents")


class PhaseFailed(RecallnetError):
    def __init__(self, phase, exc):
        super().__init__(f"phase {phase} failed: {type(exc).__name__}: {exc}")
        self.phase = phase


class UnknownUser(RecallnetError):
    pass


# ---------------------------------------------------------------- config

def _dc_fields(cls, skip=()):
    return {f.name: f for f in dataclasses.fields(cls) if f.name not in skip}


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(text, like):
    """Parse ``text`` into the type of the default value ``like``."""
    if isinstance(like, bool):
        return _parse_bool(text)
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        return tuple(p.strip() for p in text.split(",") if p.strip())
    return text.strip()


_EXPERIMENT_DEFAULTS = {f.name: f.default for f in dataclasses.fields(ExperimentSpec)}
SCHEMA = {
    "run": {"seed": 0, "out": "runs"},
    "data": {"dir": "", "items": "", "users": "", "words": "", "min_freq": 1, "n_test": 1,
             "max_tokens": MAX_TOKENS},
    "synth": {k: f.default for k, f in _dc_fields(SynthConfig).items()},
    "actor": {k: f.default for k, f in _dc_fields(ActorConfig, DERIVED_ACTOR_KEYS).items()},
    "train": {k: f.default for k, f in _dc_fields(trainer.TrainConfig, ("seed",)).items()},
    "experiment": {**_EXPERIMENT_DEFAULTS, "n_triples": N_TRIPLES},
}


@dataclasses.dataclass
class RunConfig:
    seed: int
    out: str
    data: dict
    synth: SynthConfig
    actor: dict
    train: trainer.TrainConfig
    experiment: ExperimentSpec
    n_triples: int

    def paths(self):
        """Resolved (items, users, words) paths; words may be None."""
        d = self.data
        base = Path(d["dir"]) if d["dir"] else None
        items = Path(d["items"]) if d["items"] else (base / "items.jsonl" if base else None)
        users = Path(d["users"]) if d["users"] else (base / "users.jsonl" if base else None)
        words = Path(d["words"]) if d["words"] else (base / "words.tsv" if base else None)
        if words is not None and not words.exists() and not d["words"]:
            words = None
        return items, users, words


def _read_raw(path, overrides):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except configparser.Error as exc:
            raise ConfigError(f"config {path}: {exc}") from None
    raw = {s: dict(parser[s]) for s in parser.sections()}
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        raw.setdefault(section.strip(), {})[name.strip()] = value
    return raw


def load_config(path=None, overrides=(), seed=None, out=None):
    """Parse and fully validate a run configuration; nothing is touched on disk."""
    raw = _read_raw(path, overrides)
    values = {}
    for section, entries in raw.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, text in entries.items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                values[(section, key)] = _coerce(text, SCHEMA[section][key])
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from None

    def section(name):
        return {k: values.get((name, k), d) for k, d in SCHEMA[name].items()}

    run = section("run")
    if seed is not None:
        run["seed"] = seed
    if out is not None:
        run["out"] = out
    if run["seed"] < 0:
        raise ConfigError("seed must be non-negative")

    synth = SynthConfig(**section("synth"))
    try:
        synth.validate()
    except RecallnetError as exc:
        raise ConfigError(f"[synth] {exc}") from None

    actor = section("actor")
    probe = ActorConfig(vocab_size=1, n_users=1, n_intents=1, **actor)
    probe.validate()

    tr = section("train")
    try:
        tr["weights"] = tuple(float(w) for w in tr["weights"])
    except ValueError:
        raise ConfigError("[train] weights must be three numbers") from None
    train = trainer.TrainConfig(seed=run["seed"], **tr)
    train.validate()

    ex = section("experiment")
    n_triples = ex.pop("n_triples")
    try:
        ex["seeds"] = tuple(int(s) for s in ex["seeds"])
    except ValueError:
        raise ConfigError("[experiment] seeds must be integers") from None
    spec = ExperimentSpec(**ex)
    spec.validate()
    if n_triples < 1:
        raise ConfigError("[experiment] n_triples must be positive")

    data = section("data")
    if data["min_freq"] < 1 or data["n_test"] < 1 or data["max_tokens"] < 1:
        raise ConfigError("[data] min_freq, n_test and max_tokens must be positive")
    return RunConfig(run["seed"], run["out"], data, synth, actor, train, spec, n_triples)


# ------------------------------------------------------------- run state

def make_run_dir(config, run_dir=None):
    if run_dir is None:
        stamp = datetime.datetime.now(datetime.timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        run_dir = Path(config.out) / f"{stamp}-seed{config.seed}"
    run_dir = Path(run_dir)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create run directory {run_dir}: {exc.strerror}") from None
    return run_dir


def load_inputs(config):
    items, users, words = config.paths()
    if items is None or users is None:
        raise ConfigError("[data] needs dir, or both items and users")
    for p in (items, users):
        if not p.exists():
            raise FileNotFoundError(f"input file not found: {p}")
    corpus = load_corpus(items, users, config.data["max_tokens"])
    vocab = build_vocab(corpus, config.data["min_freq"])
    indexed = index_corpus(corpus, vocab)
    split = split_leave_last(indexed, config.data["n_test"])
    vectors = read_word_vectors(words) if words is not None else None
    return corpus, vocab, split, vectors


def actor_config(config, indexed):
    extra = {"vocab_size": indexed.vocab_size, "n_users": indexed.n_users,
             "n_intents": len(indexed.intent_names or ())}
    cfg = ActorConfig(**config.actor, **extra)
    if cfg.aux_mode == "intent" and not indexed.has_intents:
        raise ConfigError("aux_mode intent needs per-interaction intents in the user file")
    cfg.validate()
    return cfg


def _check_model_fits(model, indexed):
    ac = model.actor_config
    if ac.vocab_size != indexed.vocab_size:
        raise ConfigError(f"checkpoint vocabulary has {ac.vocab_size} entries, the corpus gives "
                          f"{indexed.vocab_size}; use the corpus and min_freq it was trained on")
    if ac.user_mode == "id" and ac.n_users != indexed.n_users:
        raise ConfigError("checkpoint user table does not match the corpus")


# -------------------------------------------------------------- commands

def cmd_synth_data(config, run_dir):
    synth = generate_synthetic(config.synth, seed=config.seed)
    out = write_synthetic(synth, run_dir / "data")
    log.info("wrote %d items and %d users to %s", synth.corpus.n_items, synth.corpus.n_users, out)
    print(out)
    return EXIT_OK


def _run_phase(name, fn, *args):
    try:
        return fn(*args)
    except RecallnetError as exc:
        raise PhaseFailed(name, exc) from exc


def cmd_train(config, run_dir, resume=None):
    _, _, split, _ = load_inputs(config)
    if resume is not None:
        model = trainer.load_model(resume)
        _check_model_fits(model, split.corpus)
        log.info("resuming from %s (phase %s)", resume, model.phase)
    else:
        model = trainer.new_model(actor_config(config, split.corpus), config.train)
    steps = [("pretrain", trainer.pretrain_recommender), ("validator", trainer.init_validator),
             ("actor", trainer.train_actor)]
    done = trainer.PHASES.index(model.phase)
    for i, (name, fn) in enumerate(steps, start=1):
        if i <= done:
            log.info("phase %s already complete, skipped", name)
            continue
        _run_phase(name, fn, split, model)
        trainer.save_model(run_dir / PHASE_FILES[name], model)
        trainer.write_metrics_csv(run_dir / "metrics.csv", model.log)
        log.info("phase %s done, checkpoint %s", name, run_dir / PHASE_FILES[name])
    print(run_dir / PHASE_FILES["actor"])
    return EXIT_OK


def _trained_model(path):
    model = trainer.load_model(path)
    if model.phase != "actor":
        raise ContractError(f"checkpoint {path} is at phase {model.phase!r}, not a trained actor")
    return model


def cmd_index(config, run_dir, checkpoint):
    _, _, split, _ = load_inputs(config)
    model = _trained_model(checkpoint)
    _check_model_fits(model, split.corpus)
    reps = item_table(model.actor, split.corpus)
    index = retrieval.build_index(zip(split.corpus.item_ids, reps), model.train_config.measure,
                                  seed=model.train_config.seed)
    path = run_dir / "index.bin"
    retrieval.save_index(index, path)
    log.info("indexed %d items (%s)", index.size, model.train_config.measure)
    print(path)
    return EXIT_OK


def user_key(model, split, user_id, intent=None):
    """Key for a request made after the user's full stored history."""
    corpus = split.corpus
    try:
        u = corpus.user_ids.index(user_id)
    except ValueError:
        raise UnknownUser(f"unknown user {user_id!r}") from None
    hist = corpus.histories[u][-model.train_config.max_history:]
    intent_idx = 0
    if intent is not None:
        names = corpus.intent_names or []
        if intent in names:
            intent_idx = names.index(intent) + 1
        else:
            log.warning("intent %r not seen in the corpus; using the unknown-intent row", intent)
    hist_arr, mask = trainer.pad_histories([hist])
    batch = trainer.Batch(np.array([u]), hist_arr, mask, np.array([intent_idx]))
    return trainer.batch_keys(model, corpus, batch)[0]


def cmd_retrieve(config, checkpoint, index_path, user_id, K, intent=None, approximate=None,
                 budget=retrieval.DEFAULT_BUDGET, stream=None):
    stream = stream or sys.stdout
    _, _, split, _ = load_inputs(config)
    model = _trained_model(checkpoint)
    _check_model_fits(model, split.corpus)
    index = retrieval.load_index(index_path)
    if index.dim != model.actor_config.dim:
        raise ConfigError(f"index dimension {index.dim} does not match the checkpoint's {model.actor_config.dim}")
    key = user_key(model, split, user_id, intent)
    res = retrieval.query(index, key, K, approximate=approximate, search_budget=budget)
    mode = "exact" if res.exact else "approximate"
    stream.write(f"# user={user_id} K={K} search={mode}\n")
    for iid, score in zip(res.ids, res.scores):
        stream.write(f"{iid}\t{float(score)!r}\n")
    return EXIT_OK


def cmd_eval(config, run_dir):
    corpus, vocab, split, vectors = load_inputs(config)
    spec = dataclasses.replace(config.experiment)
    data = ExperimentData(split, len(vocab), [it.words for it in corpus.items], vectors)
    if "AVG" in spec.methods and not vectors:
        raise ConfigError("the AVG baseline needs a word-vector file ([data] words or words.tsv in dir)")
    base = ActorConfig(vocab_size=len(vocab), **config.actor)
    report = run_experiment(spec, data, base, config.train, config.n_triples)
    csv_path, txt_path = report.write(run_dir)
    sys.stdout.write(report.to_table())
    print(csv_path)
    if report.failures:
        for (row, seed), msg in sorted(report.failures.items(), key=lambda kv: (kv[0][0].label(), kv[0][1])):
            log.error("%s seed %s: %s", row.label(), seed, msg)
        return EXIT_PHASE
    return EXIT_OK


# ------------------------------------------------------------------ main

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI configuration file")
    common.add_argument("--seed", type=int, help="overrides [run] seed")
    common.add_argument("--out", help="overrides [run] out (parent of run directories)")
    common.add_argument("--run-dir", type=Path, help="write artifacts here instead of a new timestamped directory")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")

    p = argparse.ArgumentParser(prog="recallnet", description="Retrieval-key training and evaluation.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth-data", parents=[common], help="generate the synthetic corpus")
    t = sub.add_parser("train", parents=[common], help="run the three training phases")
    t.add_argument("--resume", type=Path, help="continue from a phase checkpoint")
    i = sub.add_parser("index", parents=[common], help="index every item with a trained actor")
    i.add_argument("--checkpoint", type=Path, required=True)
    r = sub.add_parser("retrieve", parents=[common], help="top-K candidates for one user")
    r.add_argument("--checkpoint", type=Path, required=True)
    r.add_argument("--index", type=Path, required=True)
    r.add_argument("--user", required=True)
    r.add_argument("-K", type=int, default=10)
    r.add_argument("--intent")
    mode = r.add_mutually_exclusive_group()
    mode.add_argument("--exact", dest="approximate", action="store_false", default=None)
    mode.add_argument("--approx", dest="approximate", action="store_true")
    r.add_argument("--budget", type=int, default=retrieval.DEFAULT_BUDGET)
    sub.add_parser("eval", parents=[common], help="run the experiment matrix")
    return p


def _setup_logging():
    level = os.environ.get("RECALLNET_LOG", "info").strip().lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"RECALLNET_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    root = logging.getLogger("recallnet")
    root.setLevel(LOG_LEVELS[level])
    if not any(getattr(h, "_recallnet", False) for h in root.handlers):
        h = logging.StreamHandler(sys.stderr)
        h.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        h._recallnet = True
        root.addHandler(h)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        config = load_config(args.config, args.set, args.seed, args.out)
        if args.command == "retrieve":
            if args.K < 1:
                raise ConfigError("-K must be positive")
            return cmd_retrieve(config, args.checkpoint, args.index, args.user, args.K,
                                args.intent, args.approximate, args.budget)
        run_dir = make_run_dir(config, args.run_dir)
        if args.command == "synth-data":
            return cmd_synth_data(config, run_dir)
        if args.command == "train":
            return cmd_train(config, run_dir, args.resume)
        if args.command == "index":
            return cmd_index(config, run_dir, args.checkpoint)
        return cmd_eval(config, run_dir)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except PhaseFailed as exc:
        log.error("%s", exc)
        return EXIT_PHASE
    except UnknownUser as exc:
        log.error("%s", exc)
        return EXIT_USER
    except (OSError, ParseError, FormatError, ContractError, RecallnetError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
