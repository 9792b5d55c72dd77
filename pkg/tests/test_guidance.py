import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capguide.errors import ValidationError
from capguide.guidance import (
    CfgGuidance,
    LmGuidance,
    cfg_fuse,
    lm_fuse,
    transfer_newline_to_eos,
)

NEG_INF = float("-inf")
POS_INF = float("inf")


def logsumexp(vec):
    return float(np.logaddexp.reduce(np.asarray(vec, dtype=np.float64)))


def test_cfg_gamma_one_is_bitwise_identity():
    cond = np.array([-1.0, -2.0])
    uncond = np.array([-3.0, -0.5])
    assert np.array_equal(cfg_fuse(cond, uncond, 1.0), cond)


def test_cfg_gamma_two_direct_evaluation():
    out = cfg_fuse(np.array([-1.0, -2.0]), np.array([-3.0, -0.5]), 2.0)
    assert out.tolist() == [1.0, -3.5]


def test_cfg_gamma_zero_returns_unconditional():
    uncond = np.array([-3.0, -0.5])
    out = cfg_fuse(np.array([-1.0, -2.0]), uncond, 0.0)
    assert np.array_equal(out, uncond)


def test_lm_fuse_reduces_to_cfg():
    uncond = np.array([-3.0, -0.5])
    cond = np.array([-1.0, -2.0])
    out = lm_fuse(uncond, cond, uncond, 2.0, 2.0)
    assert out.tolist() == [1.0, -3.5]
    assert np.array_equal(out, cfg_fuse(cond, uncond, 2.0))


def test_lm_fuse_direct_evaluation():
    out = lm_fuse(np.array([-0.1, -2.4]), np.array([-1.0, -2.0]),
                  np.array([0.0, 0.0]), 1.0, 0.0)
    assert out.tolist() == [-1.1, -4.4]


def test_lm_fuse_alpha_beta_zero_returns_lm():
    lm = np.array([-0.25, -1.5, NEG_INF])
    out = lm_fuse(lm, np.array([-1.0, NEG_INF, -2.0]), np.array([NEG_INF, -0.5, -2.0]),
                  0.0, 0.0)
    assert np.array_equal(out, lm)


def test_infinity_policy():
    c = np.array([NEG_INF, -1.0, NEG_INF, -1.0])
    u = np.array([NEG_INF, NEG_INF, -0.5, -0.5])
    # both heads -inf -> -inf regardless of gamma
    assert cfg_fuse(c, u, 2.0)[0] == NEG_INF
    assert cfg_fuse(c, u, 0.5)[0] == NEG_INF
    # cond finite, uncond -inf: sign follows (1 - gamma)
    assert cfg_fuse(c, u, 2.0)[1] == POS_INF  # flagged, permitted
    assert cfg_fuse(c, u, 0.5)[1] == NEG_INF
    assert cfg_fuse(c, u, 1.0)[1] == -1.0
    # cond -inf, uncond finite
    assert cfg_fuse(c, u, 2.0)[2] == NEG_INF
    assert cfg_fuse(c, u, 0.0)[2] == -0.5
    with pytest.raises(ValidationError):
        cfg_fuse(np.array([np.nan]), np.array([0.0]), 1.0)
    with pytest.raises(ValidationError):
        cfg_fuse(np.array([0.0]), np.array([0.0]), float("inf"))
    with pytest.raises(ValidationError):
        lm_fuse(np.array([0.0]), np.array([0.0]), np.array([0.0]), float("nan"), 1.0)


def test_guidance_spec_validation():
    with pytest.raises(ValidationError):
        CfgGuidance(gamma=float("inf"))
    with pytest.raises(ValidationError):
        LmGuidance(alpha=float("nan"), beta=0.0)
    # negative beta is a legitimate operating point
    assert LmGuidance(alpha=5.0, beta=-2.5).beta == -2.5


def _random_logprobs(rng, n):
    probs = rng.dirichlet(np.ones(n))
    return np.log(probs)


def test_argmax_shift_invariance_random_trials():
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = rng.integers(3, 9)
        cond = _random_logprobs(rng, n)
        uncond = _random_logprobs(rng, n)
        gamma = float(rng.uniform(-1.0, 4.0))
        a = float(rng.normal()) * 3
        b = float(rng.normal()) * 3
        base = cfg_fuse(cond, uncond, gamma)
        shifted = cfg_fuse(cond + a, uncond + b, gamma)
        assert int(np.argmax(base)) == int(np.argmax(shifted))
        # every fused entry moves by the same constant b + gamma (a - b)
        delta = shifted - base
        assert np.allclose(delta, b + gamma * (a - b), atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.one_of(st.just(NEG_INF), st.floats(-30, 0)),
            st.one_of(st.just(NEG_INF), st.floats(-30, 0)),
        ),
        min_size=1,
        max_size=8,
    ),
    st.floats(-2, 5),
)
def test_reduction_property_exact(pairs, gamma):
    cond = np.array([p[0] for p in pairs])
    uncond = np.array([p[1] for p in pairs])
    left = lm_fuse(uncond, cond, uncond, gamma, gamma)
    right = cfg_fuse(cond, uncond, gamma)
    assert np.array_equal(left, right)


def test_fusion_purity():
    rng = np.random.default_rng(3)
    cond = _random_logprobs(rng, 6)
    uncond = _random_logprobs(rng, 6)
    assert np.array_equal(cfg_fuse(cond, uncond, 2.5), cfg_fuse(cond, uncond, 2.5))
    lm = _random_logprobs(rng, 6)
    assert np.array_equal(lm_fuse(lm, cond, uncond, 3.0, 1.5),
                          lm_fuse(lm, cond, uncond, 3.0, 1.5))


def test_transfer_logsumexp_identity():
    scores = np.log(np.array([0.1, 0.2, 0.7]))
    out = transfer_newline_to_eos(scores, eos_id=0, newline_id=1)
    assert out[0] == pytest.approx(math.log(0.3), abs=1e-12)
    assert out[1] == NEG_INF
    assert out[2] == scores[2]


def test_transfer_noop_when_newline_empty():
    scores = np.array([-0.5, NEG_INF, -1.0])
    out = transfer_newline_to_eos(scores, eos_id=0, newline_id=1)
    assert np.array_equal(out, scores)


def test_transfer_conserves_normalized_mass():
    rng = np.random.default_rng(11)
    for _ in range(50):
        n = int(rng.integers(3, 12))
        scores = np.log(rng.dirichlet(np.ones(n)))
        out = transfer_newline_to_eos(scores, eos_id=1, newline_id=2)
        assert abs(logsumexp(out)) <= 1e-12
        assert out[2] == NEG_INF


def test_transfer_validation():
    scores = np.zeros(4)
    with pytest.raises(ValidationError):
        transfer_newline_to_eos(scores, eos_id=2, newline_id=2)
    with pytest.raises(ValidationError):
        transfer_newline_to_eos(scores, eos_id=9, newline_id=2)
