"""The relation classifier: convolution over the encoded token matrix,
max-over-time pooling, dropout, and a fully connected softmax output.

Three variants share the pipeline and differ only in the character
component of the input rows:

    cnn           word + positions only
    cnn+cnnchar   adds the convolutional character encoder
    cnn+lstmchar  adds the bidirectional LSTM character encoder

Class order is fixed as [no-relation, CID] so label 1 is always the
positive class, in memory and on disk.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass

import numpy as np

from . import encoders
from . import tensor as T
from .encoders import CharEncoderParams, EmbeddingSet, EmbeddingTable, LstmParams
from .rng import Rng
from .tensor import Tensor

log = logging.getLogger(__name__)

VARIANTS = ("cnn", "cnn+cnnchar", "cnn+lstmchar")
CLASS_ORDER = ("no-relation", "CID")

MAGIC = b"CDREXM1\x00"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Model file failures, with a distinct machine-readable code."""

    BAD_MAGIC = "bad_magic"
    TRUNCATED = "truncated"
    SHAPE_MISMATCH = "shape_mismatch"

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class Hyper:
    n: int
    k: int = 5
    m: int = 100
    rho: float = 0.5
    l2: float = 0.001
    t: int = 2
    learning_rate: float = 1e-4


@dataclass
class Prediction:
    uid: str
    probabilities: np.ndarray
    label: int


@dataclass
class ModelParams:
    variant: str
    tables: EmbeddingSet
    conv_filters: Tensor          # (m, k, d)
    conv_bias: Tensor             # (m,)
    w1: Tensor                    # (t, m)
    b1: Tensor                    # (t,)
    hyper: Hyper
    char_params: CharEncoderParams | None = None

    @property
    def input_dim(self) -> int:
        d = self.tables.word.dim + self.tables.pos1.dim + self.tables.pos2.dim
        if self.char_params is not None:
            d += self.char_params.out_dim
        return d

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        """Every learnable tensor, in a fixed serialization order."""
        out = [
            ("tables.word", self.tables.word.weights),
            ("tables.pos1", self.tables.pos1.weights),
            ("tables.pos2", self.tables.pos2.weights),
        ]
        if self.tables.char is not None:
            out.append(("tables.char", self.tables.char.weights))
        if self.char_params is not None:
            out.extend(self.char_params.all_tensors())
        out += [
            ("conv.filters", self.conv_filters),
            ("conv.bias", self.conv_bias),
            ("out.w1", self.w1),
            ("out.b1", self.b1),
        ]
        return out

    def regularizable(self) -> list[Tensor]:
        """Weight matrices under the L2 penalty: convolution filters, LSTM
        gate matrices and W1 — never embedding tables or biases."""
        weights = [self.conv_filters, self.w1]
        if self.char_params is not None:
            weights += self.char_params.weight_matrices()
        return weights

    def parameter_count(self) -> int:
        return sum(t.data.size for _, t in self.named_tensors())


def init_model(vocab, variant: str, rng: Rng, *, m: int = 100, rho: float = 0.5,
               l2: float = 0.001, learning_rate: float = 1e-4, k: int = 5,
               word_dim: int = encoders.WORD_DIM, pos_dim: int = encoders.POS_DIM,
               char_dim: int = encoders.CHAR_DIM,
               char_filters: int = encoders.CHAR_CNN_FILTERS,
               char_window: int = encoders.CHAR_CNN_WINDOW,
               lstm_units: int = encoders.LSTM_UNITS,
               pretrained: dict[str, np.ndarray] | None = None) -> ModelParams:
    """Fresh parameters for a vocabulary (a corpus.Vocab: words, chars, n)."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    n = vocab.n
    word = encoders.word_table(vocab.words, rng.derive("word"), dim=word_dim, pretrained=pretrained)
    pos1 = encoders.position_table("pos1", n, rng.derive("pos1"), dim=pos_dim)
    pos2 = encoders.position_table("pos2", n, rng.derive("pos2"), dim=pos_dim)

    char_params = None
    chartab = None
    if variant == "cnn+cnnchar":
        chartab = encoders.char_table(vocab.chars, rng.derive("char"), dim=char_dim)
        char_params = encoders.char_cnn_params(rng.derive("charcnn"), char_dim=char_dim,
                                               num_filters=char_filters, window=char_window)
    elif variant == "cnn+lstmchar":
        chartab = encoders.char_table(vocab.chars, rng.derive("char"), dim=char_dim)
        char_params = encoders.char_bilstm_params(rng.derive("charlstm"), char_dim=char_dim,
                                                  units=lstm_units)

    tables = EmbeddingSet(word, pos1, pos2, chartab, n)
    d = word_dim + 2 * pos_dim + (char_params.out_dim if char_params else 0)
    t = len(CLASS_ORDER)
    conv_filters = Tensor(rng.derive("conv").fill_uniform((m, k, d), -encoders.INIT_RANGE,
                                                          encoders.INIT_RANGE), requires_grad=True)
    conv_bias = Tensor(np.zeros(m), requires_grad=True)
    w1 = Tensor(rng.derive("w1").fill_uniform((t, m), -encoders.INIT_RANGE, encoders.INIT_RANGE),
                requires_grad=True)
    b1 = Tensor(np.zeros(t), requires_grad=True)
    hyper = Hyper(n=n, k=k, m=m, rho=rho, l2=l2, t=t, learning_rate=learning_rate)
    params = ModelParams(variant, tables, conv_filters, conv_bias, w1, b1, hyper, char_params)
    log.info("initialized %s: d=%d, n=%d, %d parameters",
             variant, d, n, params.parameter_count())
    return params


# ---------------------------------------------------------------------------
# Forward pass and loss


def class_probabilities(instance, params: ModelParams, rng: Rng, training: bool,
                        word_tokens: list[str] | None = None) -> Tensor:
    """Probability vector over CLASS_ORDER, with the graph attached."""
    mat = encoders.build_input_matrix(instance, params.tables, params.char_params,
                                      word_tokens=word_tokens)
    fm = T.relu(T.conv1d_valid(mat, params.conv_filters, params.conv_bias))
    z = T.max_over_time(fm)
    z = T.dropout(z, params.hyper.rho, rng, training)
    return T.softmax(T.add(T.matmul(params.w1, z), params.b1))


def forward(instance, params: ModelParams, rng: Rng, training: bool = False) -> Prediction:
    p = class_probabilities(instance, params, rng, training)
    return Prediction(uid=getattr(instance, "uid", ""),
                      probabilities=p.data.copy(),
                      label=int(np.argmax(p.data)))


def loss(batch, params: ModelParams, rng: Rng,
         lookup_tokens: dict[str, list[str]] | None = None) -> Tensor:
    """Mean per-instance negative log likelihood over the batch, plus the
    L2 penalty added once (not per instance)."""
    if not batch:
        raise ValueError("loss needs a nonempty batch")
    total = None
    for inst in batch:
        if getattr(inst, "label", None) is None:
            raise ValueError(f"instance {getattr(inst, 'uid', '?')} has no gold label")
        word_tokens = lookup_tokens.get(inst.uid) if lookup_tokens else None
        p = class_probabilities(inst, params, rng, training=True, word_tokens=word_tokens)
        nll = T.nll_loss(p, inst.label)
        total = nll if total is None else T.add(total, nll)
    mean = T.scale(total, 1.0 / len(batch))
    if params.hyper.l2 != 0.0:
        penalty = None
        for w in params.regularizable():
            term = T.sum_all(T.mul(w, w))
            penalty = term if penalty is None else T.add(penalty, term)
        mean = T.add(mean, T.scale(penalty, params.hyper.l2))
    return mean


# ---------------------------------------------------------------------------
# Serialization


def _metadata(params: ModelParams) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "variant": params.variant,
        "class_order": list(CLASS_ORDER),
        "hyper": {
            "n": params.hyper.n, "k": params.hyper.k, "m": params.hyper.m,
            "rho": params.hyper.rho, "l2": params.hyper.l2, "t": params.hyper.t,
            "learning_rate": params.hyper.learning_rate,
        },
        "dims": {
            "word": params.tables.word.dim,
            "pos": params.tables.pos1.dim,
            "char": params.tables.char.dim if params.tables.char else None,
        },
        "word_index": params.tables.word.index,
        "char_index": params.tables.char.index if params.tables.char else None,
        "pos_index": {str(rel): i for rel, i in params.tables.pos1.index.items()},
    }


def save_model(params: ModelParams, path) -> None:
    """Binary model file: magic, length-prefixed JSON metadata, then each
    tensor as name, rank, dims and float64 payload, all little-endian."""
    meta = json.dumps(_metadata(params), separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)
        named = params.named_tensors()
        fh.write(struct.pack("<Q", len(named)))
        for name, tensor in named:
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<Q", tensor.data.ndim))
            for dim in tensor.data.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def _read_exact(fh, count: int, what: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise ModelFormatError(ModelFormatError.TRUNCATED,
                               f"truncated payload while reading {what}")
    return buf


def load_model(path) -> ModelParams:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ModelFormatError(ModelFormatError.BAD_MAGIC,
                                   f"bad magic {magic!r}, not a model file")
        (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8, "metadata length"))
        meta = json.loads(_read_exact(fh, meta_len, "metadata").decode("utf-8"))
        (count,) = struct.unpack("<Q", _read_exact(fh, 8, "tensor count"))
        tensors: dict[str, Tensor] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<Q", _read_exact(fh, 8, "tensor name length"))
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<Q", _read_exact(fh, 8, f"{name} rank"))
            dims = [struct.unpack("<Q", _read_exact(fh, 8, f"{name} dims"))[0]
                    for _ in range(rank)]
            size = int(np.prod(dims)) if dims else 1
            payload = _read_exact(fh, 8 * size, f"{name} payload")
            data = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
            tensors[name] = Tensor(data, requires_grad=True)
    return _assemble(meta, tensors)


def _table_from(name: str, weights: Tensor, index: dict) -> EmbeddingTable:
    return EmbeddingTable(name, weights.shape[1], weights, index)


def _assemble(meta: dict, tensors: dict[str, Tensor]) -> ModelParams:
    def need(name: str, shape: tuple | None = None) -> Tensor:
        t = tensors.get(name)
        if t is None:
            raise ModelFormatError(ModelFormatError.SHAPE_MISMATCH, f"missing tensor {name}")
        if shape is not None and t.shape != shape:
            raise ModelFormatError(ModelFormatError.SHAPE_MISMATCH,
                                   f"tensor {name} has shape {t.shape}, metadata implies {shape}")
        return t

    variant = meta["variant"]
    if variant not in VARIANTS:
        raise ModelFormatError(ModelFormatError.SHAPE_MISMATCH, f"unknown variant {variant!r}")
    h = meta["hyper"]
    hyper = Hyper(n=h["n"], k=h["k"], m=h["m"], rho=h["rho"], l2=h["l2"], t=h["t"],
                  learning_rate=h["learning_rate"])
    n = hyper.n
    word = _table_from("word", need("tables.word"), dict(meta["word_index"]))
    pos_rows = 2 * n - 1
    pos_dim = meta["dims"]["pos"]
    pos_index = {rel: rel + n - 1 for rel in range(-(n - 1), n)}
    pos1 = _table_from("pos1", need("tables.pos1", (pos_rows, pos_dim)), dict(pos_index))
    pos2 = _table_from("pos2", need("tables.pos2", (pos_rows, pos_dim)), dict(pos_index))

    chartab = None
    char_params = None
    if variant != "cnn":
        chartab = _table_from("char", need("tables.char"), dict(meta["char_index"]))
        if variant == "cnn+cnnchar":
            char_params = CharEncoderParams(
                "cnn", filters=need("char_cnn.filters"), bias=need("char_cnn.bias"))
        else:
            char_params = CharEncoderParams(
                "bilstm",
                fwd=LstmParams(need("char_lstm.fwd.wx"), need("char_lstm.fwd.wh"),
                               need("char_lstm.fwd.b")),
                bwd=LstmParams(need("char_lstm.bwd.wx"), need("char_lstm.bwd.wh"),
                               need("char_lstm.bwd.b")))

    tables = EmbeddingSet(word, pos1, pos2, chartab, n)
    d = word.dim + 2 * pos_dim + (char_params.out_dim if char_params else 0)
    params = ModelParams(
        variant, tables,
        conv_filters=need("conv.filters", (hyper.m, hyper.k, d)),
        conv_bias=need("conv.bias", (hyper.m,)),
        w1=need("out.w1", (hyper.t, hyper.m)),
        b1=need("out.b1", (hyper.t,)),
        hyper=hyper,
        char_params=char_params,
    )
    return params
