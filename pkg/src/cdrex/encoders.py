"""Per-token input vectors: word, position and character-level embeddings.

Each token i of a relation mention is encoded as the concatenation

    word(d1=200) . pos1(d2=50) . pos2(d2=50) . char(d3=50)

where the two position components are indexed by the signed distances to
the entity tokens, and the character component comes from either a small
convolutional encoder or a bidirectional LSTM over the token's characters.

Word-embedding lookup is lowercased; character input keeps its case, so
capitalization signal survives in the character features.  Padding rows
use the literal "PAD" word token, whose characters are fed to the
character encoder like any other word's.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng
from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)

WORD_DIM = 200
POS_DIM = 50
CHAR_DIM = 25
CHAR_OUT_DIM = 50
CHAR_CNN_WINDOW = 5
CHAR_CNN_FILTERS = 50
LSTM_UNITS = 25

PAD_WORD = "PAD"
UNK_WORD = "UNK"
PAD_CHAR = "PADCHAR"
UNK_CHAR = "UNKCHAR"

INIT_RANGE = 0.05


@dataclass
class EmbeddingTable:
    """A learnable lookup table with reserved fallback rows."""

    name: str
    dim: int
    weights: Tensor                 # rows x dim
    index: dict = field(repr=False)  # word / char / relative-distance -> row

    @property
    def rows(self) -> int:
        return self.weights.shape[0]


def word_table(vocab: list[str], rng: Rng, dim: int = WORD_DIM,
               pretrained: dict[str, np.ndarray] | None = None) -> EmbeddingTable:
    """Word table over a lowercased vocabulary, rows PAD, UNK, then the
    words in sorted order.  Rows found in `pretrained` are copied in;
    everything else stays randomly initialized."""
    words = sorted(set(vocab))
    index = {PAD_WORD: 0, UNK_WORD: 1}
    for w in words:
        index[w] = len(index)
    data = rng.fill_uniform((len(index), dim), -INIT_RANGE, INIT_RANGE)
    if pretrained:
        found = 0
        for w, i in index.items():
            vec = pretrained.get(w)
            if vec is not None:
                if vec.shape != (dim,):
                    raise ValueError(f"pretrained vector for {w!r} has dim {vec.shape}, table needs ({dim},)")
                data[i] = vec
                found += 1
        log.info("word table: %d/%d rows from pre-trained vectors", found, len(index))
    return EmbeddingTable("word", dim, Tensor(data, requires_grad=True), index)


def char_table(chars, rng: Rng, dim: int = CHAR_DIM) -> EmbeddingTable:
    index = {PAD_CHAR: 0, UNK_CHAR: 1}
    for c in sorted(set(chars)):
        index[c] = len(index)
    data = rng.fill_uniform((len(index), dim), -INIT_RANGE, INIT_RANGE)
    return EmbeddingTable("char", dim, Tensor(data, requires_grad=True), index)


def position_table(name: str, n: int, rng: Rng, dim: int = POS_DIM) -> EmbeddingTable:
    """Rows for every signed distance -(n-1) .. (n-1)."""
    if n < 1:
        raise ValueError("position_table: n must be >= 1")
    index = {rel: rel + n - 1 for rel in range(-(n - 1), n)}
    data = rng.fill_uniform((2 * n - 1, dim), -INIT_RANGE, INIT_RANGE)
    return EmbeddingTable(name, dim, Tensor(data, requires_grad=True), index)


@dataclass
class EmbeddingSet:
    """The embedding tables of one model plus its fixed sequence length."""

    word: EmbeddingTable
    pos1: EmbeddingTable
    pos2: EmbeddingTable
    char: EmbeddingTable | None
    n: int

    def __post_init__(self):
        if self.pos1.rows != 2 * self.n - 1 or self.pos2.rows != 2 * self.n - 1:
            raise ValueError("position tables must have 2n-1 rows")


def _word_row(token: str, table: EmbeddingTable) -> int:
    # Reserved tokens hit their own rows directly; everything else is
    # lowercased first, falling back to UNK.
    if token in (PAD_WORD, UNK_WORD):
        return table.index[token]
    return table.index.get(token.lower(), table.index[UNK_WORD])


def embed_word(token: str, table: EmbeddingTable) -> Tensor:
    """Row for the lowercased token, or the UNK row."""
    return T.row(table.weights, _word_row(token, table))


def embed_position(rel_dist: int, table: EmbeddingTable) -> Tensor:
    row_i = table.index.get(rel_dist)
    if row_i is None:
        raise ValueError(f"relative distance {rel_dist} outside the table range")
    return T.row(table.weights, row_i)


# ---------------------------------------------------------------------------
# Character-level encoders


@dataclass
class LstmParams:
    """One LSTM direction.  Gates are packed [input, forget, output,
    candidate] along the last axis of every matrix."""

    wx: Tensor  # (input_dim, 4*units)
    wh: Tensor  # (units, 4*units)
    b: Tensor   # (4*units,)

    @property
    def units(self) -> int:
        return self.wh.shape[0]


@dataclass
class CharEncoderParams:
    """Parameters of one character encoder variant, output width d3."""

    variant: str  # "cnn" | "bilstm"
    filters: Tensor | None = None   # cnn: (num_filters, window, char_dim)
    bias: Tensor | None = None      # cnn: (num_filters,)
    fwd: LstmParams | None = None   # bilstm
    bwd: LstmParams | None = None

    @property
    def out_dim(self) -> int:
        if self.variant == "cnn":
            return self.filters.shape[0]
        return 2 * self.fwd.units

    def weight_matrices(self) -> list[Tensor]:
        if self.variant == "cnn":
            return [self.filters]
        return [self.fwd.wx, self.fwd.wh, self.bwd.wx, self.bwd.wh]

    def all_tensors(self) -> list[tuple[str, Tensor]]:
        if self.variant == "cnn":
            return [("char_cnn.filters", self.filters), ("char_cnn.bias", self.bias)]
        out = []
        for tag, p in (("fwd", self.fwd), ("bwd", self.bwd)):
            out += [(f"char_lstm.{tag}.wx", p.wx), (f"char_lstm.{tag}.wh", p.wh),
                    (f"char_lstm.{tag}.b", p.b)]
        return out


def char_cnn_params(rng: Rng, char_dim: int = CHAR_DIM, num_filters: int = CHAR_CNN_FILTERS,
                    window: int = CHAR_CNN_WINDOW) -> CharEncoderParams:
    filters = Tensor(rng.fill_uniform((num_filters, window, char_dim), -INIT_RANGE, INIT_RANGE),
                     requires_grad=True)
    bias = Tensor(np.zeros(num_filters), requires_grad=True)
    return CharEncoderParams("cnn", filters=filters, bias=bias)


def _lstm_params(rng: Rng, input_dim: int, units: int) -> LstmParams:
    wx = Tensor(rng.fill_uniform((input_dim, 4 * units), -INIT_RANGE, INIT_RANGE), requires_grad=True)
    wh = Tensor(rng.fill_uniform((units, 4 * units), -INIT_RANGE, INIT_RANGE), requires_grad=True)
    b = np.zeros(4 * units)
    b[units:2 * units] = 1.0  # forget gate bias starts open
    return LstmParams(wx, wh, Tensor(b, requires_grad=True))


def char_bilstm_params(rng: Rng, char_dim: int = CHAR_DIM, units: int = LSTM_UNITS) -> CharEncoderParams:
    return CharEncoderParams("bilstm",
                             fwd=_lstm_params(rng.derive("lstm-fwd"), char_dim, units),
                             bwd=_lstm_params(rng.derive("lstm-bwd"), char_dim, units))


def _char_ids(word: str, table: EmbeddingTable, min_len: int = 1) -> list[int]:
    if not word:
        raise ValueError("cannot encode an empty word")
    unk = table.index[UNK_CHAR]
    ids = [table.index.get(c, unk) for c in word]
    if len(ids) < min_len:
        ids += [table.index[PAD_CHAR]] * (min_len - len(ids))
    return ids


def char_cnn_encode(word: str, chartable: EmbeddingTable, params: CharEncoderParams) -> Tensor:
    """Convolution over the character matrix, ReLU, then max pooling.
    Words shorter than the window are right-padded with PADCHAR."""
    window = params.filters.shape[1]
    mat = T.gather(chartable.weights, _char_ids(word, chartable, min_len=window))
    fm = T.relu(T.conv1d_valid(mat, params.filters, params.bias))
    return T.max_over_time(fm)


def _lstm_final_state(xproj: Tensor, steps: range, p: LstmParams) -> Tensor:
    units = p.units
    h = Tensor(np.zeros(units))
    c = Tensor(np.zeros(units))
    for t in steps:
        gates = T.add(T.add(T.row(xproj, t), T.matmul(h, p.wh)), p.b)
        i = T.sigmoid(T.slice_last(gates, 0, units))
        f = T.sigmoid(T.slice_last(gates, units, 2 * units))
        o = T.sigmoid(T.slice_last(gates, 2 * units, 3 * units))
        g = T.tanh(T.slice_last(gates, 3 * units, 4 * units))
        c = T.add(T.mul(f, c), T.mul(i, g))
        h = T.mul(o, T.tanh(c))
    return h


def char_bilstm_encode(word: str, chartable: EmbeddingTable, params: CharEncoderParams) -> Tensor:
    """Final hidden state of a forward LSTM over the characters,
    concatenated with the final state of a reverse LSTM."""
    mat = T.gather(chartable.weights, _char_ids(word, chartable))
    l = mat.shape[0]
    fwd_proj = T.matmul(mat, params.fwd.wx)
    bwd_proj = T.matmul(mat, params.bwd.wx)
    h_fwd = _lstm_final_state(fwd_proj, range(l), params.fwd)
    h_bwd = _lstm_final_state(bwd_proj, range(l - 1, -1, -1), params.bwd)
    return T.concat([h_fwd, h_bwd])


def encode_chars(word: str, chartable: EmbeddingTable, params: CharEncoderParams) -> Tensor:
    if params.variant == "cnn":
        return char_cnn_encode(word, chartable, params)
    if params.variant == "bilstm":
        return char_bilstm_encode(word, chartable, params)
    raise ValueError(f"unknown character encoder variant {params.variant!r}")


# ---------------------------------------------------------------------------
# Input matrix construction


def build_input_matrix(instance, tables: EmbeddingSet,
                       char_params: CharEncoderParams | None = None,
                       word_tokens: list[str] | None = None) -> Tensor:
    """The n x d model input for one relation instance.

    Rows beyond the real tokens use the PAD word token (its characters are
    the literal string "PAD") with positions computed from the padded row
    index as usual.  `word_tokens`, when given, replaces the word-lookup
    path only (UNK replacement); the character encoder always sees the
    original tokens.
    """
    n = tables.n
    real = list(instance.tokens)
    if not 0 < len(real) <= n:
        raise ValueError(f"instance has {len(real)} tokens, expected 1..{n}")
    i1, i2 = instance.i1, instance.i2
    if not (0 <= i1 < len(real) and 0 <= i2 < len(real)):
        raise ValueError(f"entity indices ({i1}, {i2}) out of range for {len(real)} tokens")
    lookup = list(word_tokens) if word_tokens is not None else real
    if len(lookup) != len(real):
        raise ValueError("word-lookup tokens must align with the instance tokens")

    padded = real + [PAD_WORD] * (n - len(real))
    lookup = lookup + [PAD_WORD] * (n - len(lookup))

    word_part = T.gather(tables.word.weights, [_word_row(tok, tables.word) for tok in lookup])

    pos1_ids = [tables.pos1.index[i - i1] for i in range(n)]
    pos2_ids = [tables.pos2.index[i - i2] for i in range(n)]
    pos1_part = T.gather(tables.pos1.weights, pos1_ids)
    pos2_part = T.gather(tables.pos2.weights, pos2_ids)

    parts = [word_part, pos1_part, pos2_part]
    if char_params is not None:
        if tables.char is None:
            raise ValueError("character encoder given but no character table")
        # Encode each distinct surface form once; gradient flows through the
        # shared subgraph into every row that reuses it.
        uniq: dict[str, int] = {}
        for tok in padded:
            if tok not in uniq:
                uniq[tok] = len(uniq)
        encoded = [None] * len(uniq)
        for tok, j in uniq.items():
            encoded[j] = encode_chars(tok, tables.char, char_params)
        char_part = T.gather(T.stack_rows(encoded), [uniq[tok] for tok in padded])
        parts.append(char_part)

    out = T.concat(parts)
    expected = tables.word.dim + tables.pos1.dim + tables.pos2.dim + (
        char_params.out_dim if char_params is not None else 0)
    if out.shape != (n, expected):
        raise AssertionError(f"input matrix shape {out.shape} != ({n}, {expected})")
    return out


def unk_replace(tokens: list[str], counts: dict[str, int], rng: Rng) -> list[str]:
    """Independently replace each token by UNK for the word-lookup path,
    with probability 0.25 / (0.25 + n_w) given its training count n_w.
    Character-level input is never touched (callers keep the originals)."""
    out = []
    for tok in tokens:
        n_w = counts.get(tok.lower(), 0)
        p = 0.25 / (0.25 + n_w)
        out.append(UNK_WORD if rng.random() < p else tok)
    return out


def load_word_vectors(path, dim: int | None = None,
                      vocab: set[str] | None = None) -> dict[str, np.ndarray]:
    """Read pre-trained vectors: one `word v1 .. vD` entry per line, with
    an optional `ROWS DIM` header auto-detected on the first line.  When
    `vocab` is given only those (lowercased) words are kept."""
    vectors: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue  # header
            word, values = parts[0], parts[1:]
            if dim is None:
                dim = len(values)
            if len(values) != dim:
                raise ValueError(f"line {lineno}: expected {dim} values, got {len(values)}")
            key = word.lower()
            if vocab is not None and key not in vocab:
                continue
            try:
                vectors[key] = np.array([float(v) for v in values])
            except ValueError as exc:
                raise ValueError(f"line {lineno}: non-numeric component ({exc})") from None
    return vectors
