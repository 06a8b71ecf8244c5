import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from saq.tensorq import (MAGIC, QuantSpec, QuantizedTensor, dequantize, fake_quantize, fit_qparams_minmax,
                         quantize, read_quantized, read_tensor, tensor_from_bytes, tensor_to_bytes,
                         write_quantized, write_tensor)


def code(x, s, z, b=8):
    return int(quantize(np.array([x]), QuantSpec(s, z, b)).codes[0])


def test_quantize_examples():
    assert code(0.0, 0.1, 0) == 0
    assert code(100.0, 0.1, 0) == 255
    assert code(1.0, 0.1, 10) == 20


def test_dequantize_examples():
    spec = QuantSpec(0.1, 10, 8)
    assert dequantize(QuantizedTensor(np.array([20]), spec))[0] == pytest.approx(1.0, abs=1e-15)
    assert dequantize(QuantizedTensor(np.array([10]), spec))[0] == 0.0


def test_round_half_to_even():
    spec = QuantSpec(1.0, 0, 8)
    codes = quantize(np.array([0.5, 1.5, 2.5, 3.5]), spec).codes
    assert codes.tolist() == [0, 2, 2, 4]


def test_nonfinite_rejected_with_index():
    x = np.zeros((2, 3))
    x[1, 2] = np.nan
    with pytest.raises(ValueError, match=r"\(1, 2\)"):
        quantize(x, QuantSpec(0.1, 0, 8))


@pytest.mark.parametrize("kwargs", [dict(scale=0.0, zero_point=0, bit_width=8),
                                    dict(scale=-1.0, zero_point=0, bit_width=8),
                                    dict(scale=0.1, zero_point=256, bit_width=8),
                                    dict(scale=0.1, zero_point=-1, bit_width=8),
                                    dict(scale=0.1, zero_point=0, bit_width=1),
                                    dict(scale=0.1, zero_point=0, bit_width=9)])
def test_invalid_spec(kwargs):
    with pytest.raises(ValueError):
        QuantSpec(**kwargs)


def test_dense_grid_roundtrip_b4():
    spec = QuantSpec(0.25, 8, 4)
    x = np.linspace(spec.lower, spec.upper, 100001)
    err = np.abs(x - fake_quantize(x, spec))
    assert err.max() <= spec.scale / 2 + 1e-15


def test_minmax_examples():
    s = fit_qparams_minmax(np.linspace(0, 1, 11), 8)
    assert s.scale == pytest.approx(1 / 255) and s.zero_point == 0
    s = fit_qparams_minmax(np.linspace(-1, 1, 11), 8)
    assert s.scale == pytest.approx(2 / 255) and s.zero_point == 128


def test_minmax_constant_tensor():
    x = np.full(5, 3.0)
    spec = fit_qparams_minmax(x, 8)
    assert spec.lower <= 3.0 <= spec.upper
    assert abs(fake_quantize(x, spec)[0] - 3.0) <= spec.scale / 2


def test_minmax_empty_rejected():
    with pytest.raises(ValueError):
        fit_qparams_minmax(np.zeros(0), 8)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 8), st.floats(1e-3, 10.0), st.data())
def test_roundtrip_property(b, s, data):
    z = data.draw(st.integers(0, 2**b - 1))
    spec = QuantSpec(s, z, b)
    x = data.draw(st.lists(st.floats(spec.lower, spec.upper), min_size=1, max_size=50))
    x = np.array(x)
    assert np.all(np.abs(x - fake_quantize(x, spec)) <= s / 2 * (1 + 1e-12))


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 8), st.floats(1e-3, 10.0), st.integers(0, 255),
       st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=50))
def test_code_range_and_monotone(b, s, z, xs):
    spec = QuantSpec(s, min(z, 2**b - 1), b)
    x = np.sort(np.array(xs))
    codes = quantize(x, spec).codes
    assert codes.min() >= 0 and codes.max() <= 2**b - 1
    assert np.all(np.diff(codes) >= 0)


def test_float_container_roundtrip():
    x = np.random.default_rng(0).standard_normal((3, 4, 2))
    buf = io.BytesIO()
    n = write_tensor(buf, x)
    raw = buf.getvalue()
    assert len(raw) == n and raw[:4] == MAGIC
    assert np.array_equal(tensor_from_bytes(raw), x)
    assert np.array_equal(tensor_from_bytes(tensor_to_bytes(np.float64(2.5))), np.float64(2.5))


def test_container_layout_is_little_endian():
    raw = tensor_to_bytes(np.array([1.0, 2.0]))
    assert raw[4:8] == (1).to_bytes(4, "little")
    assert raw[8:12] == (1).to_bytes(4, "little")
    assert raw[12:20] == (2).to_bytes(8, "little")
    assert np.frombuffer(raw[20:], "<f8").tolist() == [1.0, 2.0]


def test_quantized_container_roundtrip():
    spec = QuantSpec(0.03, 7, 4)
    q = quantize(np.random.default_rng(1).standard_normal((5, 6)) * 0.2, spec)
    buf = io.BytesIO()
    write_quantized(buf, q)
    buf.seek(0)
    back = read_quantized(buf)
    assert back.spec == spec
    assert np.array_equal(back.codes, q.codes)


def test_bad_magic():
    with pytest.raises(ValueError, match="magic"):
        read_tensor(io.BytesIO(b"XXXX" + b"\0" * 16))


def test_minmax_zero_tensor_widened():
    spec = fit_qparams_minmax(np.zeros(4), 8)
    assert spec.scale > 0
    assert np.all(fake_quantize(np.zeros(4), spec) == 0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40), st.integers(2, 8))
def test_minmax_covers_data(xs, b):
    x = np.array(xs)
    spec = fit_qparams_minmax(x, b)
    tol = spec.scale / 2 * (1 + 1e-9) + 1e-12
    assert np.all(np.abs(fake_quantize(x, spec) - x) <= tol)
