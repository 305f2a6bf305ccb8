import numpy as np
import pytest
from hypothesis import given, strategies as st

from covmoe.backbone import DEFAULT_LEVELS, QuantileForecast, backbone_forward, build_frozen_backbone
from covmoe.numkit import GradTape, Rng, const

TAPE = GradTape(enabled=False)


def test_fingerprint_is_seed_determined():
    assert build_frozen_backbone(42, 8, 4).fingerprint == build_frozen_backbone(42, 8, 4).fingerprint
    assert build_frozen_backbone(42, 8, 4).fingerprint != build_frozen_backbone(43, 8, 4).fingerprint


def test_parameter_count():
    bb = build_frozen_backbone(42, 8, 4, DEFAULT_LEVELS)
    assert len(DEFAULT_LEVELS) == 9
    assert bb.n_params() == 8 * 8 + 8 * 36 + 36 == 388


def test_weights_are_read_only():
    bb = build_frozen_backbone(0, 4, 2)
    with pytest.raises(ValueError):
        bb.W_pool.value[0, 0] = 1.0
    assert bb.verify()


def test_zero_tokens_zero_bias_give_zero_forecast():
    bb = build_frozen_backbone(0, 4, 3)
    bb.b_out.value = np.zeros_like(bb.b_out.value)
    out = backbone_forward(bb, const(np.zeros((6, 4))), 2, TAPE).value
    assert out.shape == (2, 3, 9) and np.all(out == 0)


def test_single_token_pooling_is_identity():
    bb = build_frozen_backbone(1, 4, 2)
    tok = Rng(0).normal(size=(1, 4))
    flat = np.tanh(tok @ bb.W_pool.value) @ bb.W_out.value + bb.b_out.value
    ref = np.sort(flat.reshape(1, 2, 9), axis=-1)
    assert np.allclose(backbone_forward(bb, const(tok), 1, TAPE).value, ref, atol=1e-14)


@given(st.integers(0, 10**6), st.integers(1, 4), st.integers(1, 6))
def test_quantiles_monotone(seed, n, L):
    bb = build_frozen_backbone(seed % 7, 5, 3)
    out = backbone_forward(bb, const(Rng(seed).normal(0, 3, (n * L, 5))), n, TAPE).value
    assert np.all(np.diff(out, axis=-1) >= 0)


def test_median_point_forecast():
    fc = QuantileForecast(np.array([0.1, 0.5, 0.9]), np.array([[1.0, 2.0, 3.0]]))
    assert fc.point.tolist() == [2.0]


def test_bad_levels_rejected():
    with pytest.raises(ValueError):
        build_frozen_backbone(0, 4, 2, (0.5, 0.1))
