import math

import numpy as np
import pytest
from helpers import int_gemm_oracle
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fptq.quantizers import (
    MIN_SCALE,
    ActQuant,
    Granularity,
    QuantParams,
    QuantTensor,
    compute_scale,
    compute_scales,
    dequantize,
    fake_quant_matmul,
    quantize,
    quantize_act_per_tensor_static,
    quantize_act_per_token,
    quantize_per_tensor,
    quantize_weight_groupwise,
    quantize_weight_per_channel,
    round_half_away,
)
from fptq.toymodel.model import matmul32


def oracle_q(x: float, scale: float, bits: int) -> int:
    """Scalar reference: float32 division, then half-away rounding and clamp."""
    lim = 2 ** (bits - 1) - 1
    v = float(np.float32(x) / np.float32(scale))
    r = math.floor(abs(v) + 0.5)
    return max(-lim, min(lim, int(math.copysign(r, v)) if r else 0))


def oracle_scale(absmax: float, bits: int) -> float:
    s = float(np.float32(absmax) / np.float32(2 ** (bits - 1) - 1))
    return s if s > 0 else float(MIN_SCALE)


def test_compute_scale_examples():
    assert compute_scale(127, 8) == 1.0
    assert compute_scale(7, 4) == 1.0
    assert compute_scale(0, 8) == pytest.approx(1e-8)
    with pytest.raises(ValueError):
        compute_scale(-1, 8)
    with pytest.raises(ValueError):
        compute_scale(1, 3)


def test_round_half_away():
    v = np.array([0.5, 1.5, 2.5, -0.5, -1.5, 0.49999997, -2.4, 3.0], np.float32)
    assert round_half_away(v).tolist() == [1, 2, 3, -1, -2, 0, -2, 3]


def test_hand_example_per_tensor():
    qt = quantize_per_tensor(np.array([[0.5, -1.0, 2.0]], np.float32), 8)
    assert qt.params.scales[0] == np.float32(2) / np.float32(127)
    assert qt.q.tolist() == [[32, -64, 127]]


@pytest.mark.parametrize("bits", [4, 8])
def test_lattice_points_exact(bits):
    lim = 2 ** (bits - 1) - 1
    k = np.arange(-lim, lim + 1, dtype=np.float32)[None, :]
    s = np.float32(0.25)
    params = QuantParams(bits, Granularity.PER_TENSOR, [s])
    qt = quantize(k * s, params)
    assert qt.q.tolist() == k.astype(int).tolist()
    assert np.array_equal(dequantize(qt), k * s)


def test_groupwise_matches_scalar_oracle(rng):
    w = rng.standard_normal((32, 32)).astype(np.float32)
    qt = quantize_weight_groupwise(w, 4, 8)
    assert qt.params.scales.shape == (32, 4)
    for i in range(32):
        for j in range(32):
            g = i // 8
            s = oracle_scale(max(abs(float(v)) for v in w[g * 8 : g * 8 + 8, j]), 4)
            assert qt.params.scales[j, g] == np.float32(s)
            assert qt.q[i, j] == oracle_q(float(w[i, j]), s, 4)


def test_static_matches_scalar_oracle(rng):
    calib = rng.standard_normal((64, 16)).astype(np.float32)
    x = rng.standard_normal((8, 16)).astype(np.float32) * 1.3
    amax = float(np.abs(calib).max())
    qt = quantize_act_per_tensor_static(x, amax, 8)
    s = oracle_scale(amax, 8)
    assert qt.q.tolist() == [[oracle_q(float(v), s, 8) for v in row] for row in x]


def test_static_saturates():
    qt = quantize_act_per_tensor_static(np.array([[2.0, -2.0, 0.5]], np.float32), 1.0, 8)
    assert qt.q.tolist() == [[127, -127, 64]]


def test_per_token_examples(rng):
    qt = quantize_act_per_token(np.array([[1, -1], [100, 50]], np.float32), 8)
    assert np.allclose(qt.params.scales, [1 / 127, 100 / 127])
    x = rng.standard_normal((1, 9)).astype(np.float32)
    a, b = quantize_act_per_token(x, 8), quantize_per_tensor(x, 8)
    assert np.array_equal(a.q, b.q) and np.array_equal(dequantize(a), dequantize(b))


def test_groupwise_shapes_and_degenerate(rng):
    w = rng.standard_normal((256, 5)).astype(np.float32)
    assert quantize_weight_groupwise(w, 4, 128).params.scales.shape == (5, 2)
    short = quantize_weight_groupwise(w[:200], 4, 128)
    assert short.params.scales.shape == (5, 2)
    big = quantize_weight_groupwise(w, 4, 256)
    pc = quantize_weight_per_channel(w, 4)
    assert np.array_equal(big.q, pc.q)
    assert np.array_equal(dequantize(big), dequantize(pc))
    with pytest.raises(ValueError):
        quantize_weight_groupwise(w, 4, 0)


def test_refinement_mse(rng):
    w = rng.standard_normal((64, 16)).astype(np.float32)
    w[rng.integers(0, 64, 6), rng.integers(0, 16, 6)] *= 8
    mse = lambda qt, ref: float(np.mean((dequantize(qt) - ref) ** 2))
    assert mse(quantize_weight_groupwise(w, 4, 16), w) <= mse(quantize_weight_per_channel(w, 4), w)
    x = rng.standard_normal((32, 64)).astype(np.float32)
    x[:4] *= 60
    assert mse(quantize_act_per_token(x, 8), x) <= mse(quantize_per_tensor(x, 8), x)


def test_scale_ordering(rng):
    x = rng.standard_normal((20, 40)).astype(np.float32)
    per_tensor = quantize_per_tensor(x, 8).params.scales[0]
    assert (quantize_act_per_token(x, 8).params.scales <= per_tensor).all()
    gw = quantize_weight_groupwise(x, 4, 8).params.scales
    pc = quantize_weight_per_channel(x, 4).params.scales
    assert (gw <= pc[:, None]).all()


def test_zero_tensor_floor():
    qt = quantize_weight_groupwise(np.zeros((8, 3), np.float32), 4, 4)
    assert (qt.params.scales == MIN_SCALE).all()
    assert (dequantize(qt) == 0).all()


def test_param_validation():
    with pytest.raises(ValueError):
        QuantParams(8, Granularity.PER_TENSOR, [0.0])
    with pytest.raises(ValueError):
        QuantParams(8, Granularity.PER_TENSOR, [1.0, 2.0])
    with pytest.raises(ValueError):
        QuantParams(16, Granularity.PER_TENSOR, [1.0])
    with pytest.raises(ValueError):
        QuantParams(4, Granularity.GROUP_WISE, np.ones((2, 2)))
    with pytest.raises(ValueError, match="per-token"):
        quantize(np.ones((3, 2), np.float32), QuantParams(8, Granularity.PER_TOKEN, [1.0, 1.0]))
    with pytest.raises(ValueError):
        QuantTensor(np.array([[8]]), QuantParams(4, Granularity.PER_TENSOR, [1.0]))
    with pytest.raises(ValueError):
        ActQuant(8, dynamic=False)


signed = st.floats(-1e3, 1e3, allow_nan=False, width=32)


@settings(max_examples=80, deadline=None)
@given(
    arrays(np.float32, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=signed),
    st.sampled_from([4, 8]),
    st.sampled_from(list(Granularity)),
    st.integers(1, 5),
)
def test_properties(x, bits, gran, group):
    def run(data):
        if gran is Granularity.PER_TENSOR:
            return quantize_per_tensor(data, bits)
        if gran is Granularity.PER_TOKEN:
            return quantize_act_per_token(data, bits)
        if gran is Granularity.PER_CHANNEL:
            return quantize_weight_per_channel(data, bits)
        return quantize_weight_groupwise(data, bits, group)

    qt = run(x)
    lim = 2 ** (bits - 1) - 1
    assert qt.q.min() >= -lim and qt.q.max() <= lim
    assert (qt.params.scales > 0).all()
    # sign symmetry
    assert np.array_equal(run(-x).q, -qt.q)
    # round-trip bound (relative slack covers float32 rounding of large values)
    smap = qt.params.scale_map(*x.shape).astype(np.float64)
    err = np.abs(x.astype(np.float64) - dequantize(qt).astype(np.float64))
    assert (err <= smap / 2 + 1e-6 + 2.5e-7 * np.abs(x)).all()
    # determinism
    assert np.array_equal(run(x.copy()).q, qt.q)


@pytest.mark.parametrize("dynamic", [False, True])
@pytest.mark.parametrize("group", [0, 4])
def test_fake_quant_matmul_integer_oracle(rng, dynamic, group):
    for _ in range(10):
        x = rng.standard_normal((8, 8)).astype(np.float32)
        w = rng.standard_normal((8, 8)).astype(np.float32)
        act = ActQuant(8, dynamic=dynamic, calibrated_absmax=None if dynamic else float(np.abs(x).max()))
        qw = quantize_weight_groupwise(w, 4, group) if group else quantize_weight_per_channel(w, 4)
        got = fake_quant_matmul(x, act, qw)
        ref = int_gemm_oracle(act.quantize(x), qw)
        assert np.abs(got - ref).max() <= 1e-4 * np.abs(ref).max()


def test_fake_quant_pass_through_and_identity(rng):
    x = rng.standard_normal((5, 6)).astype(np.float32)
    w = rng.standard_normal((6, 3)).astype(np.float32)
    assert np.array_equal(fake_quant_matmul(x, None, w), matmul32(x, w))
    lattice = np.round(rng.uniform(-100, 100, (4, 6))).astype(np.float32)
    eye = quantize_weight_per_channel(np.eye(6, dtype=np.float32), 8)
    act = ActQuant(8, calibrated_absmax=127.0)
    assert np.array_equal(fake_quant_matmul(lattice, act, eye), lattice)
    with pytest.raises(ValueError, match="shape mismatch"):
        fake_quant_matmul(x, None, w.T)


def test_compute_scales_vectorised():
    s = compute_scales([0.0, 7.0, 14.0], 4)
    assert s.dtype == np.float32 and s.tolist() == [np.float32(1e-8), 1.0, 2.0]
