import math

import numpy as np
import pytest

from cdrex import tensor as T
from cdrex.corpus import RelationInstance, Vocab
from cdrex.model import (
    CLASS_ORDER,
    MAGIC,
    ModelFormatError,
    Prediction,
    VARIANTS,
    class_probabilities,
    forward,
    init_model,
    load_model,
    loss,
    save_model,
)
from cdrex.rng import Rng
from cdrex.tensor import grad_check


WORDS = ["aspirin", "causes", "headache", "mice", "padding", "tumors"]


def tiny_vocab(n=6):
    counts = {w: i + 1 for i, w in enumerate(WORDS)}
    chars = sorted(set("".join(WORDS) + "PAD"))
    return Vocab(words=sorted(WORDS), counts=counts, chars=chars, n=n)


def tiny_model(variant="cnn+cnnchar", seed=7, rho=0.5, l2=0.001, n=6, m=5):
    return init_model(tiny_vocab(n), variant, Rng(seed), m=m, rho=rho, l2=l2, k=2,
                      word_dim=8, pos_dim=3, char_dim=4, char_filters=3, char_window=2,
                      lstm_units=3)


def make_instance(tokens=("aspirin", "causes", "headache"), i1=0, i2=2, label=1, uid="doc1#0"):
    return RelationInstance(uid=uid, pmid="doc1", tokens=list(tokens), i1=i1, i2=i2,
                            chem_id="C1", dis_id="D1", label=label)


class TestForward:
    def test_inference_is_deterministic(self):
        params = tiny_model()
        inst = make_instance()
        a = forward(inst, params, Rng(1), training=False)
        b = forward(inst, params, Rng(999), training=False)
        np.testing.assert_array_equal(a.probabilities, b.probabilities)

    def test_zero_output_layer_gives_uniform(self):
        params = tiny_model()
        params.w1.data[:] = 0.0
        params.b1.data[:] = 0.0
        pred = forward(make_instance(), params, Rng(1))
        np.testing.assert_allclose(pred.probabilities, [0.5, 0.5])

    def test_shapes(self):
        params = tiny_model(m=5)
        p = class_probabilities(make_instance(), params, Rng(1), training=False)
        assert p.shape == (2,)
        assert abs(float(p.data.sum()) - 1.0) < 1e-12
        # The pooled feature vector has one entry per filter.
        assert params.conv_filters.shape[0] == 5

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_all_variants_run(self, variant):
        params = tiny_model(variant=variant)
        pred = forward(make_instance(), params, Rng(1))
        assert pred.label in (0, 1)
        assert pred.uid == "doc1#0"

    def test_cnn_variant_has_no_char_component(self):
        params = tiny_model(variant="cnn")
        assert params.char_params is None
        assert params.input_dim == 8 + 3 + 3


class TestLoss:
    def test_near_certain_correct_prediction_is_near_zero(self):
        params = tiny_model(l2=0.0, rho=0.0)
        params.w1.data[:] = 0.0
        params.b1.data[:] = [-25.0, 25.0]  # label 1 with p ~ 1
        out = loss([make_instance(label=1)], params, Rng(1))
        assert 0.0 <= out.item() < 1e-12

    def test_uniform_predictor_gives_ln2(self):
        params = tiny_model(l2=0.0)
        params.w1.data[:] = 0.0
        params.b1.data[:] = 0.0
        batch = [make_instance(label=0), make_instance(label=1, uid="doc1#1")]
        out = loss(batch, params, Rng(1))
        assert abs(out.item() - math.log(2.0)) < 1e-12

    def test_rejects_empty_batch_and_missing_label(self):
        params = tiny_model()
        with pytest.raises(ValueError):
            loss([], params, Rng(1))
        with pytest.raises(ValueError):
            loss([make_instance(label=None)], params, Rng(1))

    @pytest.mark.parametrize("variant", ["cnn+cnnchar", "cnn+lstmchar"])
    def test_full_gradient_check(self, variant):
        params = tiny_model(variant=variant, rho=0.0)  # rho=0 keeps f deterministic
        batch = [make_instance(label=1),
                 make_instance(tokens=("mice", "tumors"), i1=0, i2=1, label=0, uid="doc1#1")]
        inputs = [t for _, t in params.named_tensors()]
        err = grad_check(lambda: loss(batch, params, Rng(1)), inputs, eps=1e-4)
        assert err < 1e-4


class TestSerialization:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_round_trip_bitwise(self, tmp_path, variant):
        params = tiny_model(variant=variant)
        path = tmp_path / "model.bin"
        save_model(params, path)
        loaded = load_model(path)
        assert loaded.variant == variant
        assert loaded.hyper == params.hyper
        saved = dict(params.named_tensors())
        for name, tensor in loaded.named_tensors():
            np.testing.assert_array_equal(tensor.data, saved[name].data)
        assert loaded.tables.word.index == params.tables.word.index
        pred_a = forward(make_instance(), params, Rng(1))
        pred_b = forward(make_instance(), loaded, Rng(1))
        np.testing.assert_array_equal(pred_a.probabilities, pred_b.probabilities)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "model.bin"
        path.write_bytes(b"NOTAMODEL" + b"\x00" * 64)
        with pytest.raises(ModelFormatError) as exc:
            load_model(path)
        assert exc.value.code == ModelFormatError.BAD_MAGIC

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "model.bin"
        save_model(tiny_model(), path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(ModelFormatError) as exc:
            load_model(path)
        assert exc.value.code == ModelFormatError.TRUNCATED

    def test_shape_mismatch(self, tmp_path):
        path = tmp_path / "model.bin"
        save_model(tiny_model(m=5), path)
        blob = path.read_bytes()
        # Same-length metadata edit: claim m=6 while the tensors carry m=5.
        assert blob.count(b'"m":5') == 1
        path.write_bytes(blob.replace(b'"m":5', b'"m":6'))
        with pytest.raises(ModelFormatError) as exc:
            load_model(path)
        assert exc.value.code == ModelFormatError.SHAPE_MISMATCH

    def test_magic_bytes(self, tmp_path):
        path = tmp_path / "model.bin"
        save_model(tiny_model(), path)
        assert path.read_bytes()[:8] == MAGIC == b"CDREXM1\x00"


class TestParameterCounts:
    def test_closed_form(self):
        params = tiny_model(variant="cnn", n=6, m=5)
        word_rows = len(WORDS) + 2
        pos_rows = 2 * 6 - 1
        d = 8 + 3 + 3
        expected = word_rows * 8 + 2 * pos_rows * 3 + 5 * 2 * d + 5 + 2 * 5 + 2
        assert params.parameter_count() == expected

    def test_plain_cnn_is_strictly_smaller(self):
        base = tiny_model(variant="cnn").parameter_count()
        assert base < tiny_model(variant="cnn+cnnchar").parameter_count()
        assert base < tiny_model(variant="cnn+lstmchar").parameter_count()


def test_identical_seeds_give_bitwise_identical_initialization():
    a = tiny_model(variant="cnn+lstmchar", seed=123)
    b = tiny_model(variant="cnn+lstmchar", seed=123)
    for (name, ta), (_, tb) in zip(a.named_tensors(), b.named_tensors()):
        np.testing.assert_array_equal(ta.data, tb.data, err_msg=name)


def test_pretrained_vectors_reach_the_word_table():
    vocab = tiny_vocab()
    vec = np.linspace(-1.0, 1.0, 8)
    params = init_model(vocab, "cnn", Rng(7), m=4, k=2, word_dim=8, pos_dim=3,
                        pretrained={"aspirin": vec})
    row = params.tables.word.index["aspirin"]
    np.testing.assert_array_equal(params.tables.word.weights.data[row], vec)


def test_class_order_is_stable():
    assert CLASS_ORDER == ("no-relation", "CID")


def test_prediction_probabilities_sum_to_one():
    pred = forward(make_instance(), tiny_model(), Rng(1))
    assert isinstance(pred, Prediction)
    assert abs(pred.probabilities.sum() - 1.0) <= 1e-12
