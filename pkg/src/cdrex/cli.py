"""Command-line entry point.

    cdrex train      --train T --dev D --model-out M [options]
    cdrex eval       --model-in M --test X --train T [--compare M2] [options]
    cdrex gridsearch --train T --dev D --model-out DIR --report R [options]
    cdrex predict    --model-in M --test X [--train T] [options]
    cdrex gradcheck  [--seed N]

Options may come from a flat key-value config file (`--config`, lines of
`key = value`, `#` comments); explicit flags override file values.  All
randomness flows from the single seed through derived per-component
streams, so identical configurations reproduce byte-identical outputs.

Exit codes: 0 success, 1 corpus/model parse error, 2 configuration error,
3 numeric failure, 4 model/corpus vocabulary mismatch.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from . import corpus, encoders, evaluation, model, optim
from . import tensor as T
from .rng import Rng

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARSE = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_VOCAB = 4


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    command: str
    train: str | None = None
    dev: str | None = None
    test: str | None = None
    emb: str | None = None
    model_in: str | None = None
    model_out: str | None = None
    report: str | None = None
    variant: str = "cnn"
    learning_rate: float = 1e-4
    filters: int = 100
    dropout: float = 0.5
    epochs: int = 50
    batch_size: int = 32
    seed: int = 1
    debug_numerics: bool = False
    compare: str | None = None
    oracle: bool = False
    grid_lambdas: tuple[float, ...] = optim.GRID_LEARNING_RATES
    grid_filters: tuple[int, ...] = optim.GRID_FILTERS
    grid_dropouts: tuple[float, ...] = optim.GRID_DROPOUTS


_PATH_KEYS = ("train", "dev", "test", "emb", "model_in", "compare")

_FILE_KEYS = {
    "train": str, "dev": str, "test": str, "emb": str, "model_in": str,
    "model_out": str, "report": str, "variant": str, "lambda": float,
    "filters": int, "dropout": float, "epochs": int, "batch_size": int,
    "seed": int, "debug_numerics": bool, "compare": str, "oracle": bool,
    "grid_lambdas": "floats", "grid_filters": "ints", "grid_dropouts": "floats",
}


def _parse_bool(raw: str) -> bool:
    if raw.lower() in ("1", "true", "yes", "on"):
        return True
    if raw.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def load_config_file(path: str) -> dict:
    """Flat `key = value` configuration; unknown keys are rejected."""
    values: dict = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key = value")
                key, raw = (part.strip() for part in line.split("=", 1))
                kind = _FILE_KEYS.get(key)
                if kind is None:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                try:
                    if kind is bool:
                        value = _parse_bool(raw)
                    elif kind == "floats":
                        value = tuple(float(v) for v in raw.split(","))
                    elif kind == "ints":
                        value = tuple(int(v) for v in raw.split(","))
                    else:
                        value = kind(raw)
                except ConfigError:
                    raise
                except ValueError:
                    raise ConfigError(f"{path}:{lineno}: bad value {raw!r} for {key}") from None
                values["learning_rate" if key == "lambda" else key] = value
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    return values


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key-value config file; flags override it")
    parser.add_argument("--train", help="training corpus (PubTator format)")
    parser.add_argument("--dev", help="development corpus")
    parser.add_argument("--test", help="test corpus")
    parser.add_argument("--emb", help="pre-trained word vectors (text format)")
    parser.add_argument("--model-in", dest="model_in", help="model file to load")
    parser.add_argument("--model-out", dest="model_out", help="model file or directory to write")
    parser.add_argument("--report", help="report file to write")
    parser.add_argument("--variant", choices=model.VARIANTS, help="model variant")
    parser.add_argument("--lambda", dest="learning_rate", type=float, help="Nadam learning rate")
    parser.add_argument("--filters", type=int, help="number of convolution filters")
    parser.add_argument("--dropout", type=float, help="dropout probability on the feature vector")
    parser.add_argument("--epochs", type=int, help="training epochs")
    parser.add_argument("--batch-size", dest="batch_size", type=int, help="minibatch size")
    parser.add_argument("--seed", type=int, help="master random seed")
    parser.add_argument("--debug-numerics", dest="debug_numerics", action="store_const",
                        const=True, help="assert finiteness of every tensor operation")
    parser.add_argument("--compare", help="second model file for a bootstrap comparison")
    parser.add_argument("--oracle", action="store_const", const=True,
                        help="score gold pairs against themselves (test only)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cdrex",
        description="CNN chemical-disease relation extraction",
        epilog="environment: CDREX_THREADS caps grid-search worker parallelism; "
               "CDREX_LOGLEVEL sets the logging level")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("train", "train a model and keep the best dev-F1 epoch"),
        ("eval", "score a model on a labelled corpus"),
        ("gridsearch", "train the hyperparameter grid and keep the winner"),
        ("predict", "emit document-level pairs for an unlabelled corpus"),
        ("gradcheck", "finite-difference check of every gradient"),
    ):
        _add_common(sub.add_parser(name, help=help_text))
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file {args.config!r} does not exist")
        values.update(load_config_file(args.config))
    for key in vars(args):
        if key in ("command", "config"):
            continue
        flag_value = getattr(args, key)
        if flag_value is not None:
            values[key] = flag_value
    cfg = RunConfig(command=args.command)
    for key, value in values.items():
        setattr(cfg, key, value)
    for key in _PATH_KEYS:
        path = getattr(cfg, key)
        if path is not None and not os.path.exists(path):
            raise ConfigError(f"--{key.replace('_', '-')}: path {path!r} does not exist")
    if not 0.0 <= cfg.dropout < 1.0:
        raise ConfigError(f"dropout must be in [0, 1), got {cfg.dropout}")
    if cfg.epochs < 0 or cfg.batch_size < 1 or cfg.filters < 1:
        raise ConfigError("epochs must be >= 0, batch_size and filters >= 1")
    return cfg


# ---------------------------------------------------------------------------
# Shared helpers


def _require(cfg: RunConfig, *keys: str) -> None:
    for key in keys:
        if getattr(cfg, key) is None:
            raise ConfigError(f"--{key.replace('_', '-')} is required for {cfg.command}")


def _load_split(path: str, n_max: int = corpus.DEFAULT_MAX_TOKENS) -> optim.DataSplit:
    with open(path, encoding="utf-8") as fh:
        docs = corpus.parse_pubtator(fh)
    instances = [inst for doc in docs for inst in corpus.build_instances(doc, n_max=n_max)]
    return optim.DataSplit(docs, instances)


def _train_config(cfg: RunConfig) -> optim.TrainConfig:
    return optim.TrainConfig(variant=cfg.variant, learning_rate=cfg.learning_rate,
                             filters=cfg.filters, dropout=cfg.dropout,
                             epochs=cfg.epochs, batch_size=cfg.batch_size, seed=cfg.seed)


def _load_pretrained(cfg: RunConfig, vocab) -> dict[str, np.ndarray] | None:
    if cfg.emb is None:
        return None
    return encoders.load_word_vectors(cfg.emb, vocab=set(vocab.words))


def _check_vocabulary_overlap(params: model.ModelParams, split: optim.DataSplit) -> None:
    # Bare punctuation tokens overlap any two corpora, so only word-like
    # tokens count.  Zero overlap is definitive: every lookup would fall to
    # the UNK row and scores would be meaningless.
    reserved = {encoders.PAD_WORD, encoders.UNK_WORD}
    vocab = set(params.tables.word.index) - reserved
    seen = {tok.lower() for inst in split.instances for tok in inst.tokens
            if any(c.isalnum() for c in tok)}
    if seen and vocab and not (vocab & seen):
        raise VocabularyMismatch(
            "model vocabulary shares no words with the corpus; the model was "
            "trained on different data or the corpus is in the wrong format")


class VocabularyMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# Commands


def cmd_train(cfg: RunConfig) -> int:
    _require(cfg, "train", "dev", "model_out")
    train_data = _load_split(cfg.train)
    dev_data = _load_split(cfg.dev)
    vocab = corpus.build_vocab(train_data.documents, train_data.instances)
    pretrained = _load_pretrained(cfg, vocab)
    log.info("training corpus: %d documents, %d instances, n=%d",
             len(train_data.documents), len(train_data.instances), vocab.n)
    report, _ = optim.train(_train_config(cfg), train_data, dev_data,
                            model_path=cfg.model_out, pretrained=pretrained, vocab=vocab)
    if cfg.report:
        with open(cfg.report, "w", encoding="utf-8") as fh:
            fh.write(optim.render_train_report(report))
    if report.status.startswith("aborted"):
        print(f"cdrex train: {report.status}", file=sys.stderr)
        return EXIT_NUMERIC
    if report.best_f1 is not None:
        print(f"trained {cfg.variant}: best epoch {report.best_epoch} "
              f"dev F1 {report.best_f1:.1f}")
    else:
        print(f"trained {cfg.variant}: {report.status}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    _require(cfg, "model_in", "test", "train")
    params = model.load_model(cfg.model_in)
    test_data = _load_split(cfg.test)
    train_data = _load_split(cfg.train)
    train_rel = optim.training_relations(train_data.documents)
    gold = {doc.pmid: set(doc.gold_cid) for doc in test_data.documents}

    if cfg.oracle:
        predicted = {pmid: set(pairs) for pmid, pairs in gold.items()}
    else:
        _check_vocabulary_overlap(params, test_data)
        predicted = optim.predict_pairs(test_data, params, train_rel)
    report = evaluation.evaluate(gold, predicted)

    if cfg.compare:
        rival = model.load_model(cfg.compare)
        rival_pairs = optim.predict_pairs(test_data, rival, train_rel)
        p_value = evaluation.bootstrap_test(predicted, rival_pairs, gold,
                                            iterations=10_000,
                                            rng=Rng(cfg.seed).derive("bootstrap"))
        report.bootstrap = {"p_value": p_value, "iterations": 10_000, "seed": cfg.seed}

    print(f"{report.precision:.1f} {report.recall:.1f} {report.f1:.1f}")
    if report.bootstrap:
        print(f"bootstrap p={report.bootstrap['p_value']:.4f}")
    if cfg.report:
        with open(cfg.report, "w", encoding="utf-8") as fh:
            fh.write(evaluation.render_report(report))
    return EXIT_OK


def cmd_gridsearch(cfg: RunConfig) -> int:
    _require(cfg, "train", "dev", "model_out", "report")
    train_data = _load_split(cfg.train)
    dev_data = _load_split(cfg.dev)
    vocab = corpus.build_vocab(train_data.documents, train_data.instances)
    pretrained = _load_pretrained(cfg, vocab)
    base = _train_config(cfg)
    grid = [dataclasses.replace(base, learning_rate=lr, filters=m, dropout=rho)
            for lr in cfg.grid_lambdas for m in cfg.grid_filters for rho in cfg.grid_dropouts]
    os.makedirs(cfg.model_out, exist_ok=True)
    result = optim.grid_search(grid, train_data, dev_data, base_seed=cfg.seed,
                               model_dir=cfg.model_out, pretrained=pretrained)
    with open(cfg.report, "w", encoding="utf-8") as fh:
        best = result.best_config
        fh.write(f"winner lambda={best.learning_rate!r} filters={best.filters} "
                 f"dropout={best.dropout!r} f1={result.best_report.best_f1!r}\n")
        for report in result.reports:
            fh.write("\n" + optim.render_train_report(report))
        for failed_cfg, message in result.failures:
            fh.write(f"\nfailed lambda={failed_cfg.learning_rate!r} "
                     f"filters={failed_cfg.filters} dropout={failed_cfg.dropout!r}: {message}\n")
    print(f"grid winner: lambda={best.learning_rate} filters={best.filters} "
          f"dropout={best.dropout} dev F1 {result.best_report.best_f1:.1f}")
    return EXIT_OK


def cmd_predict(cfg: RunConfig) -> int:
    _require(cfg, "model_in", "test")
    params = model.load_model(cfg.model_in)
    test_data = _load_split(cfg.test)
    train_rel = set()
    if cfg.train:
        train_rel = optim.training_relations(_load_split(cfg.train).documents)
    _check_vocabulary_overlap(params, test_data)
    predicted = optim.predict_pairs(test_data, params, train_rel)
    lines = [f"{pmid}\t{chem}\t{dis}"
             for pmid in sorted(predicted) for chem, dis in sorted(predicted[pmid])]
    output = "\n".join(lines) + ("\n" if lines else "")
    if cfg.report:
        with open(cfg.report, "w", encoding="utf-8") as fh:
            fh.write(output)
    else:
        sys.stdout.write(output)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Gradient-check suite


def _op_checks(rng: Rng) -> float:
    """Finite-difference check of each primitive in isolation."""
    worst = 0.0

    def check(f, inputs):
        nonlocal worst
        worst = max(worst, T.grad_check(f, inputs, eps=1e-4))

    a = T.Tensor(rng.fill_uniform((4, 3), -1, 1), requires_grad=True)
    b = T.Tensor(rng.fill_uniform((4, 3), -1, 1), requires_grad=True)
    check(lambda: T.sum_all(T.add(a, b)), [a, b])
    check(lambda: T.sum_all(T.mul(a, b)), [a, b])
    check(lambda: T.sum_all(T.scale(a, -1.7)), [a])
    check(lambda: T.sum_all(T.relu(a)), [a])
    check(lambda: T.sum_all(T.tanh(a)), [a])
    check(lambda: T.sum_all(T.sigmoid(a)), [a])
    check(lambda: T.sum_all(T.concat([a, b])), [a, b])
    check(lambda: T.sum_all(T.row(a, 2)), [a])
    check(lambda: T.sum_all(T.slice_last(a, 1, 3)), [a])
    check(lambda: T.sum_all(T.gather(a, [0, 2, 2, 1])), [a])
    check(lambda: T.sum_all(T.max_over_time(a)), [a])

    w = T.Tensor(rng.fill_uniform((3, 5), -1, 1), requires_grad=True)
    x = T.Tensor(rng.fill_uniform((5,), -1, 1), requires_grad=True)
    w2 = T.Tensor(rng.fill_uniform((5, 2), -1, 1), requires_grad=True)
    check(lambda: T.sum_all(T.matmul(a, w)), [a, w])
    check(lambda: T.sum_all(T.matmul(w, x)), [w, x])
    check(lambda: T.sum_all(T.matmul(x, w2)), [x, w2])
    rows = [T.Tensor(rng.fill_uniform((3,), -1, 1), requires_grad=True) for _ in range(3)]
    check(lambda: T.sum_all(T.stack_rows(rows)), rows)

    inp = T.Tensor(rng.fill_uniform((6, 3), -1, 1), requires_grad=True)
    filt = T.Tensor(rng.fill_uniform((4, 2, 3), -1, 1), requires_grad=True)
    bias = T.Tensor(rng.fill_uniform((4,), -1, 1), requires_grad=True)
    check(lambda: T.sum_all(T.conv1d_valid(inp, filt, bias)), [inp, filt, bias])

    logits = T.Tensor(rng.fill_uniform((3,), -1, 1), requires_grad=True)
    check(lambda: T.nll_loss(T.softmax(logits), 1), [logits])
    check(lambda: T.nll_loss(T.softmax(logits), 0, weights=[w], l2=0.001), [logits, w])
    return worst


def _model_loss_check(variant: str, seed: int) -> float:
    rng = Rng(seed)
    words = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta"]
    vocab = corpus.Vocab(words=words, counts={w: 1 for w in words},
                         chars=sorted(set("".join(words) + "PAD")), n=5)
    params = model.init_model(vocab, variant, rng.derive("init"), m=4, rho=0.0, l2=0.001,
                              k=2, word_dim=6, pos_dim=3, char_dim=4,
                              char_filters=3, char_window=2, lstm_units=3)
    # Unit-scale random parameters keep ReLU kinks and pooling argmax
    # switches far from the eps ball; the training-time +/-0.05 init puts
    # activations at the same magnitude as eps and breaks central
    # differences at non-differentiable points.
    fill = rng.derive("fill")
    for _, t in params.named_tensors():
        t.data[:] = fill.fill_uniform(t.shape, -0.5, 0.5)
    token_rng = rng.derive("tokens")
    def random_instance(uid):
        tokens = [words[token_rng.randbelow(len(words))] for _ in range(5)]
        i1 = token_rng.randbelow(5)
        i2 = (i1 + 1 + token_rng.randbelow(4)) % 5
        return corpus.RelationInstance(uid, "0", tokens, i1, i2, "C", "D",
                                       token_rng.randbelow(2))
    batch = [random_instance("0#0"), random_instance("0#1")]
    inputs = [t for _, t in params.named_tensors()]
    return T.grad_check(lambda: model.loss(batch, params, Rng(0)), inputs, eps=1e-4)


def gradcheck_suite(seeds=(0, 1, 2)) -> float:
    """Maximum relative error across per-operation checks and composed
    model losses for both character variants."""
    worst = 0.0
    for seed in seeds:
        worst = max(worst, _op_checks(Rng(seed ^ 0x5EED)))
        for variant in ("cnn+cnnchar", "cnn+lstmchar"):
            worst = max(worst, _model_loss_check(variant, seed))
    return worst


def cmd_gradcheck(cfg: RunConfig) -> int:
    worst = gradcheck_suite()
    print(f"maximum relative error {worst:.3e}")
    if worst >= 1e-4:
        print("cdrex gradcheck: analytic and numeric gradients disagree", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gridsearch": cmd_gridsearch,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CDREX_LOGLEVEL", "WARNING"),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"cdrex: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    T.set_debug_numerics(cfg.debug_numerics)
    try:
        return _COMMANDS[cfg.command](cfg)
    except ConfigError as exc:
        print(f"cdrex: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VocabularyMismatch as exc:
        print(f"cdrex: vocabulary mismatch: {exc}", file=sys.stderr)
        return EXIT_VOCAB
    except (corpus.ParseError, model.ModelFormatError) as exc:
        print(f"cdrex: parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except T.NumericsError as exc:
        print(f"cdrex: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
