import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from calmargin.tensor_store import (
    LabelField,
    LogitField,
    ProbField,
    SoftLabelField,
    TensorFormatError,
    ValidationError,
    decode_array,
    encode_array,
    load_tensor,
    logit_distances,
    logsumexp,
    save_tensor,
    softmax,
)
from oracles import softmax_row

finite = st.floats(-50, 50, allow_nan=False)


def test_softmax_uniform():
    s = softmax(np.zeros((1, 1, 3)))
    np.testing.assert_allclose(s, 1 / 3, rtol=0, atol=1e-15)


def test_softmax_no_overflow():
    s = softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(s))
    assert s[0] == pytest.approx(1.0)
    assert s[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_two_class_value():
    e = math.e
    s = softmax(np.array([1.0, 0.0]))
    np.testing.assert_allclose(s, [e / (e + 1), 1 / (e + 1)], rtol=1e-15)


def test_softmax_field_types():
    out = softmax(LogitField(np.zeros((2, 2, 3))))
    assert isinstance(out, ProbField)


def test_nonfinite_logits_rejected():
    bad = np.zeros((1, 1, 2))
    bad[0, 0, 1] = np.nan
    with pytest.raises(ValidationError):
        LogitField(bad)
    with pytest.raises(ValidationError):
        LogitField(np.array([[[np.inf, 0.0]]]))


@given(arrays(np.float64, (3, 4), elements=finite))
def test_softmax_matches_scalar_oracle(l):
    s = softmax(l)
    for row, srow in zip(l, s):
        np.testing.assert_allclose(srow, softmax_row(list(row)), rtol=1e-12, atol=1e-300)
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-12)


@pytest.mark.parametrize(
    "l, d",
    [([2, 1, 0], [0, 1, 2]), ([4.5, 4.5, 4.5], [0, 0, 0]), ([-1, 3, 0.5], [4, 0, 2.5])],
)
def test_logit_distances_examples(l, d):
    np.testing.assert_allclose(logit_distances(np.array(l, float)), d)


@given(arrays(np.float64, (5, 4), elements=finite))
def test_distance_invariants(l):
    d = logit_distances(l)
    assert np.all(d >= 0)
    np.testing.assert_array_equal(d[np.arange(5), l.argmax(-1)], 0.0)


@given(arrays(np.float64, (6, 5), elements=finite))
def test_logsumexp_sandwich(l):
    lse = logsumexp(l)
    assert np.all(lse >= l.max(-1) - 1e-12)
    assert np.all(lse <= l.max(-1) + math.log(5) + 1e-12)


def test_field_invariants():
    with pytest.raises(ValidationError):
        LogitField(np.zeros((2, 2, 1)))
    with pytest.raises(ValidationError):
        LabelField(np.array([[0, 3]]), num_classes=3)
    with pytest.raises(ValidationError):
        LabelField(np.array([[0, 1]]), num_classes=2, background_class=2)
    with pytest.raises(ValidationError):
        SoftLabelField(np.array([[[0.5, 0.6]]]))
    with pytest.raises(ValidationError):
        ProbField(np.array([[[1.5, -0.5]]]))
    # saturated softmax rounds to exact 0 and 1 in float64, so the closed interval is allowed
    ProbField(np.array([[[1.0, 0.0]]]))
    SoftLabelField(np.array([[[1.0, 0.0]]]))


def test_fields_are_read_only():
    f = LogitField(np.zeros((1, 1, 2)))
    with pytest.raises(ValueError):
        f.data[0, 0, 0] = 1.0


# ---------------------------------------------------------------- CALT files

def test_roundtrip_bytes(tmp_path):
    rng = np.random.default_rng(0)
    f = LogitField(rng.normal(size=(2, 2, 3)))
    p1, p2 = tmp_path / "a.calt", tmp_path / "b.calt"
    save_tensor(f, p1)
    g = load_tensor(p1)
    assert isinstance(g, LogitField)
    np.testing.assert_array_equal(g.data, f.data)
    save_tensor(g, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_roundtrip_small_values(tmp_path):
    p = tmp_path / "x.calt"
    save_tensor(LogitField(np.array([[[0.5, -0.5]]])), p)
    np.testing.assert_array_equal(load_tensor(p).data, [[[0.5, -0.5]]])


def test_roundtrip_labels(tmp_path):
    p = tmp_path / "y.calt"
    lab = LabelField(np.array([[0, 1], [2, 1]]), num_classes=3)
    save_tensor(lab, p)
    out = load_tensor(p, kind="labels", num_classes=3)
    assert isinstance(out, LabelField)
    np.testing.assert_array_equal(out.data, lab.data)


@settings(max_examples=50)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)), elements=finite))
def test_encode_decode_identity(a):
    np.testing.assert_array_equal(decode_array(encode_array(a)), a)


def _code(buf):
    with pytest.raises(TensorFormatError) as ei:
        decode_array(buf)
    return ei.value.code


def test_error_codes_are_distinct():
    good = encode_array(np.zeros((2, 2, 3)))
    codes = {
        _code(b"XXXX" + good[4:]),
        _code(good[:-1]),
        _code(good + b"\0"),
        _code(b"CALT" + struct.pack("<BBB", 1, 0, 3) + struct.pack("<3I", 2**20, 2**20, 2**20)),
        _code(good[:5] + b"\x07" + good[6:]),
    }
    assert codes == {
        TensorFormatError.ERR_BAD_MAGIC,
        TensorFormatError.ERR_TRUNCATED,
        TensorFormatError.ERR_TRAILING,
        TensorFormatError.ERR_DIM_OVERFLOW,
        TensorFormatError.ERR_DTYPE,
    }


def test_bad_magic_message(tmp_path):
    p = tmp_path / "bad.calt"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(TensorFormatError, match="bad magic"):
        load_tensor(p)


def test_kind_mismatch(tmp_path):
    p = tmp_path / "l.calt"
    save_tensor(LogitField(np.zeros((1, 1, 2))), p)
    with pytest.raises(TensorFormatError) as ei:
        load_tensor(p, kind="labels")
    assert ei.value.code == TensorFormatError.ERR_DTYPE


def test_write_is_atomic(tmp_path):
    p = tmp_path / "z.calt"
    save_tensor(LogitField(np.zeros((1, 1, 2))), p)
    assert not list(tmp_path.glob("*.tmp"))
