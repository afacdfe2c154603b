import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coppo import autodiff as ad
from coppo.advantage import make_bundle
from coppo.objectives import (
    VARIANTS,
    ClipConfig,
    ConfigError,
    agent_objective,
    batch_objectives,
    check_variant,
    fast_objectives,
    inner_clip_weight,
    per_sample,
)
from coppo.policy import AgentPolicy, PolicySnapshot, gradient

CLIP = ClipConfig(0.2, 0.1, 8)


def _value(variant, x_or_logp, adv, others=0.0, joint=None, others_clipped=0.0):
    """Per-sample value for a single sample given its own log-ratio and the others' log-ratio sum."""
    out = per_sample(variant, np.array([x_or_logp]), np.array([0.0]), np.array([others]), np.array([adv]),
                     np.array([adv if joint is None else joint]), CLIP, np.array([others_clipped]))
    return float(out.value[0])


def test_inner_clip_examples():
    assert inner_clip_weight([1.0, 1.0, 1.0], 0, 0.1) == 1.0
    assert inner_clip_weight([9.0, 1.25, 1.0], 0, 0.10) == pytest.approx(1.10)
    assert inner_clip_weight([0.5, 0.8, 1.0], 0, 0.15) == pytest.approx(0.85)
    assert inner_clip_weight([3.0], 0, 0.1) == 1.0


def test_clip_config_validation():
    with pytest.raises(ConfigError):
        ClipConfig(0.1, 0.2)
    with pytest.raises(ConfigError):
        ClipConfig(0.2, 0.1, 0)
    with pytest.raises(ConfigError):
        check_variant("trpo")
    lo, hi = CLIP.ratio_headroom()
    assert lo < 1.0 < hi


def test_coppo_clip_arithmetic():
    log15 = np.log(1.5)
    assert _value("coppo", log15, 1.0) == pytest.approx(1.2)
    assert _value("coppo", log15, -1.0) == pytest.approx(-1.5)
    # other agents push the product to 1.25, inner clip caps their weight at 1.1
    assert _value("coppo", 0.0, 1.0, others=np.log(1.25)) == pytest.approx(1.1)


def test_values_at_snapshot_equal_mean_advantage():
    rng = np.random.default_rng(0)
    adv = rng.normal(size=(7, 3))
    zeros = np.zeros((7, 3))
    for variant in VARIANTS:
        if variant == "vanilla-pg":
            continue
        values, _ = fast_objectives(variant, zeros, zeros, adv, adv.sum(1), CLIP)
        expected = adv.sum(1).mean() * np.ones(3) if variant == "joint-clip" else adv.mean(0)
        assert np.allclose(values, expected, atol=1e-10)
    two = np.array([[2.0], [-1.0]])
    assert fast_objectives("coppo", np.zeros((2, 1)), np.zeros((2, 1)), two, two[:, 0], CLIP)[0][0] == pytest.approx(0.5)


def test_clip_separately_matches_per_agent_inside_band():
    rng = np.random.default_rng(1)
    logp_old = rng.normal(size=(10, 3))
    logp = logp_old + rng.uniform(-0.05, 0.05, size=(10, 3))
    adv = rng.normal(size=(10, 3))
    sep, _ = fast_objectives("clip-separately", logp, logp_old, adv, adv.sum(1), CLIP)
    plain, _ = fast_objectives("no-inner-clip", logp, logp_old, adv, adv.sum(1), CLIP)
    assert np.allclose(sep, plain, atol=1e-14)


def test_joint_objective_splits_into_weighted_agent_objectives():
    rng = np.random.default_rng(2)
    logp_old = rng.normal(size=(12, 4))
    logp = logp_old + rng.uniform(-0.04, 0.04, size=(12, 4))
    adv = rng.normal(size=(12, 4))
    joint, _ = fast_objectives("joint-clip", logp, logp_old, adv, adv.sum(1), CLIP)
    parts, _ = fast_objectives("no-inner-clip", logp, logp_old, adv, adv.sum(1), CLIP)
    assert abs(joint[0] - parts.sum()) < 1e-12


@given(st.integers(0, 2**31), st.sampled_from(VARIANTS))
@settings(max_examples=60, deadline=None)
def test_fast_path_matches_autodiff(seed, variant):
    rng = np.random.default_rng(seed)
    B, N = int(rng.integers(1, 10)), int(rng.integers(1, 5))
    logp_old = rng.normal(size=(B, N))
    logp = logp_old + rng.normal(0, 0.2, size=(B, N))
    adv = rng.normal(0, 3, size=(B, N))
    v1, d1 = batch_objectives(variant, logp, logp_old, adv, adv.sum(1), CLIP)
    v2, d2 = fast_objectives(variant, logp, logp_old, adv, adv.sum(1), CLIP)
    assert np.allclose(v1, v2, atol=1e-12)
    assert np.allclose(d1, d2, atol=1e-12)


@given(st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_coppo_pessimism_and_band(seed):
    rng = np.random.default_rng(seed)
    B, N = 16, 4
    log_r = rng.normal(0, 0.3, size=(B, N))
    adv = rng.normal(0, 3, size=(B, N))
    others = log_r.sum(1, keepdims=True) - log_r
    g = np.clip(np.exp(others), 1 - CLIP.eps2, 1 + CLIP.eps2)
    r = np.exp(log_r)
    assert np.all((g >= 1 - CLIP.eps2) & (g <= 1 + CLIP.eps2))
    terms = per_sample("coppo", log_r, np.zeros_like(log_r), others, adv, adv.sum(1)[:, None], CLIP).value
    assert np.all(terms <= g * r * adv + 1e-12)
    # before the outer clip the magnitude is bounded by the inner band
    assert np.all(np.abs(g * r * adv) <= (1 + CLIP.eps2) * r * np.abs(adv) + 1e-12)


def test_single_agent_coppo_equals_ppo():
    rng = np.random.default_rng(3)
    logp_old = rng.normal(size=(20, 1))
    logp = logp_old + rng.normal(0, 0.3, size=(20, 1))
    adv = rng.normal(size=(20, 1))
    r = np.exp(logp - logp_old)[:, 0]
    ppo = np.minimum(r * adv[:, 0], np.clip(r, 0.8, 1.2) * adv[:, 0]).mean()
    for variant in ("coppo", "independent-ratio", "no-inner-clip", "clip-separately"):
        assert fast_objectives(variant, logp, logp_old, adv, adv[:, 0], CLIP)[0][0] == pytest.approx(ppo, abs=1e-14)


def test_vanilla_pg_is_log_prob_times_advantage():
    rng = np.random.default_rng(4)
    logp = rng.normal(size=(5, 2))
    adv = rng.normal(size=(5, 2))
    values, d = fast_objectives("vanilla-pg", logp, logp, adv, adv.sum(1), CLIP)
    assert np.allclose(values, (logp * adv).mean(0))
    assert np.allclose(d, adv / 5)


def test_clipped_side_has_zero_gradient():
    _, d = fast_objectives("independent-ratio", np.array([[np.log(1.5)]]), np.zeros((1, 1)),
                           np.array([[1.0]]), np.array([1.0]), CLIP)
    assert d[0, 0] == 0.0
    _, d = fast_objectives("independent-ratio", np.array([[np.log(1.5)]]), np.zeros((1, 1)),
                           np.array([[-1.0]]), np.array([-1.0]), CLIP)
    assert d[0, 0] == pytest.approx(-1.5)


def test_derivative_is_own_column_with_others_held_fixed():
    rng = np.random.default_rng(5)
    B, N = 6, 3
    logp_old = rng.normal(size=(B, N))
    logp = logp_old + rng.normal(0, 0.05, size=(B, N))
    adv = rng.normal(size=(B, N))
    _, d = fast_objectives("coppo", logp, logp_old, adv, adv.sum(1), CLIP)
    h = 1e-7
    for i in range(N):
        for b in range(B):
            up, down = logp.copy(), logp.copy()
            up[b, i] += h
            down[b, i] -= h
            fu = fast_objectives("coppo", up, logp_old, adv, adv.sum(1), CLIP)[0][i]
            fd = fast_objectives("coppo", down, logp_old, adv, adv.sum(1), CLIP)[0][i]
            assert (fu - fd) / (2 * h) == pytest.approx(d[b, i], abs=1e-7)


def test_agent_objective_gradient_shape():
    rng = np.random.default_rng(6)
    old = [AgentPolicy.init("mlp", 1, 3, rng, hidden=4, scale=0.5) for _ in range(3)]
    snap = PolicySnapshot.take(old)
    obs, acts = np.zeros((6, 3), int), rng.integers(3, size=(6, 3))
    bundle = make_bundle(rng.normal(size=(6, 3)))
    obj = agent_objective("coppo", old, snap, obs, acts, bundle, CLIP, 1)
    assert gradient(obj, old[1]).shape == (old[1].n_params,)
    assert float(obj(ad.Tensor(old[1].params)).value) == pytest.approx(
        bundle.per_agent[:, 1].mean(), abs=1e-12)
