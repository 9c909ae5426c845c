"""Scene-generator contracts: height statistics, WCM values, decay
mapping, coherence-estimator bias against an independent Monte-Carlo
oracle, speckle moments, pair combinatorics, and byte-identical reruns."""

import filecmp
import math
import os

import numpy as np
import pytest

from foresight.coherence import decay_model, fit_decay_map, median_aggregate
from foresight.errors import ConfigurationError, DataError, UsageError
from foresight.simulate import (
    DecayMapping,
    SceneConfig,
    WcmParams,
    apply_speckle,
    generate_height_field,
    height_to_decay,
    sample_coherence,
    simulate_stack,
    wcm_backscatter,
)


def small_config(**kw):
    kw.setdefault("size", 48)
    kw.setdefault("seed", 5)
    kw.setdefault("corr_length_px", 5.0)
    kw.setdefault("n_clearings", 3)
    kw.setdefault("clearing_radius_px", (2.0, 5.0))
    kw.setdefault("dem_corr_px", 8.0)
    return SceneConfig(**kw)


# -- height field ----------------------------------------------------------


def test_height_field_hits_target_mean_exactly():
    cfg = small_config()
    h = generate_height_field(cfg)
    np.testing.assert_allclose(h.mean(), 7.8, rtol=1e-10)
    assert h.min() >= 0.0
    assert h.max() <= cfg.max_height + 1e-9


def test_height_field_deterministic():
    cfg = small_config()
    np.testing.assert_array_equal(generate_height_field(cfg),
                                  generate_height_field(cfg))


def test_height_field_contains_clearings():
    h = generate_height_field(small_config(n_clearings=4))
    assert (h == 0.0).sum() > 10


# -- point models ----------------------------------------------------------


def test_wcm_endpoints_and_hand_value():
    p = WcmParams(sigma_ground=10 ** -1.6, sigma_veg=10 ** -1.1, beta=0.12)
    assert wcm_backscatter(np.array(0.0), p) == p.sigma_ground
    assert abs(wcm_backscatter(np.array(1e6), p) - p.sigma_veg) < 1e-12
    expected = 10 ** -1.6 * math.exp(-1.2) + 10 ** -1.1 * (1 - math.exp(-1.2))
    np.testing.assert_allclose(wcm_backscatter(np.array(10.0), p), expected,
                               rtol=1e-12)


def test_wcm_monotone_when_veg_brighter():
    p = WcmParams(sigma_ground=0.02, sigma_veg=0.1, beta=0.1)
    h = np.linspace(0, 40, 200)
    s = wcm_backscatter(h, p)
    assert np.all(np.diff(s) > 0)


def test_decay_mapping_endpoints_and_hand_value():
    m = DecayMapping()
    tau0, rho0 = height_to_decay(np.array(0.0), m)
    assert tau0 == 45.0 and rho0 == 0.7
    tau_inf, rho_inf = height_to_decay(np.array(1e9), m)
    np.testing.assert_allclose([tau_inf, rho_inf], [2.0, 0.2], atol=1e-12)
    tau8, _ = height_to_decay(np.array(8.0), m)
    np.testing.assert_allclose(tau8, 2.0 + 43.0 * math.exp(-1.0), rtol=1e-12)


def test_decay_mapping_strictly_decreasing():
    h = np.linspace(0, 35, 100)
    tau, rho = height_to_decay(h, DecayMapping())
    assert np.all(np.diff(tau) < 0)
    assert np.all(np.diff(rho) < 0)


def test_mapping_validation():
    with pytest.raises(ConfigurationError):
        DecayMapping(tau_min=0.1)
    with pytest.raises(ConfigurationError):
        DecayMapping(rho_min=0.8, rho_max=0.7)
    with pytest.raises(ConfigurationError):
        WcmParams(sigma_ground=-1.0, sigma_veg=0.1, beta=0.1)


# -- coherence estimator ---------------------------------------------------


def _oracle_coherence_draws(gamma, looks, n_draws, seed):
    """Independent Monte-Carlo reference for the magnitude estimator,
    written loop-style on purpose as a second code path."""
    rng = np.random.default_rng(seed)
    out = np.empty(n_draws)
    for d in range(n_draws):
        z1 = (rng.standard_normal(looks) + 1j * rng.standard_normal(looks))
        w = (rng.standard_normal(looks) + 1j * rng.standard_normal(looks))
        z2 = gamma * z1 + math.sqrt(1 - gamma ** 2) * w
        num = np.abs(np.sum(z1 * np.conj(z2)))
        den = math.sqrt(np.sum(np.abs(z1) ** 2) * np.sum(np.abs(z2) ** 2))
        out[d] = num / den
    return out


def _impl_coherence_draws(gamma, looks, n_draws, seed):
    field = np.full((n_draws, 1), gamma)
    est = sample_coherence(field, looks, np.random.default_rng(seed))
    return est.ravel()


@pytest.mark.parametrize("gamma,looks", [(0.0, 21), (0.3, 21), (0.3, 119)])
def test_estimator_mean_matches_oracle(gamma, looks):
    n = 20000
    ours = _impl_coherence_draws(gamma, looks, n, seed=1)
    ref = _oracle_coherence_draws(gamma, looks, 20000, seed=2)
    se = math.sqrt(ours.var(ddof=1) / n + ref.var(ddof=1) / len(ref))
    assert abs(ours.mean() - ref.mean()) < 3 * se


def test_estimator_bias_falls_with_looks():
    a = _impl_coherence_draws(0.3, 21, 20000, seed=3)
    b = _impl_coherence_draws(0.3, 119, 20000, seed=4)
    assert a.mean() - 0.3 > b.mean() - 0.3 > 0


def test_estimator_exact_at_unit_coherence():
    est = sample_coherence(np.ones((4, 4)), 21, np.random.default_rng(0))
    np.testing.assert_array_equal(est, np.ones((4, 4)))


def test_estimator_infinite_looks_is_exact_copy():
    gamma = np.random.default_rng(1).uniform(0, 1, (5, 5))
    est = sample_coherence(gamma, math.inf, np.random.default_rng(2))
    np.testing.assert_array_equal(est, gamma)


def test_estimator_range_and_validation():
    est = sample_coherence(np.full((8, 8), 0.5), 4, np.random.default_rng(3))
    assert np.all((est >= 0) & (est <= 1))
    with pytest.raises(UsageError):
        sample_coherence(np.zeros((2, 2)), 1, np.random.default_rng(0))
    with pytest.raises(DataError):
        sample_coherence(np.full((2, 2), 1.5), 4, np.random.default_rng(0))


# -- speckle ---------------------------------------------------------------


def test_speckle_unit_mean_and_variance():
    n = 100000
    vals = apply_speckle(np.full(n, 2.0), 10.0, np.random.default_rng(5))
    ratio = vals / 2.0
    se = ratio.std(ddof=1) / math.sqrt(n)
    assert abs(ratio.mean() - 1.0) < 3 * se
    assert abs(ratio.var(ddof=1) - 0.1) < 0.005


def test_speckle_infinite_enl_noop():
    x = np.linspace(1, 2, 16)
    np.testing.assert_array_equal(apply_speckle(x, math.inf, 0), x)


def test_speckle_high_enl_concentrates():
    x = np.full((100,), 3.0)
    out = apply_speckle(x, 1e6, np.random.default_rng(6))
    assert np.all(np.abs(out / x - 1.0) < 0.01)


def test_speckle_validation():
    with pytest.raises(DataError):
        apply_speckle(np.zeros(3), 10.0, 0)
    with pytest.raises(UsageError):
        apply_speckle(np.ones(3), 0.5, 0)


# -- full scene ------------------------------------------------------------


def test_pair_combinatorics():
    cfg = small_config()
    pairs = cfg.pair_list()
    assert len(pairs) == 36
    lags = [lag for _, _, lag in pairs]
    counts = {lag: lags.count(lag) for lag in set(lags)}
    assert counts == {14.0 * k: 9 - k for k in range(1, 9)}
    assert cfg.lags() == [14.0 * k for k in range(1, 9)]


def test_scene_invariants():
    scene = simulate_stack(small_config())
    assert set(scene.sigma) == {"hh", "hv"}
    for pol in scene.sigma:
        assert np.all(scene.sigma[pol] > 0)
    assert len(scene.coherence_pairs) == 72
    for _, _, _, _, est in scene.coherence_pairs:
        assert np.all((est >= 0) & (est <= 1))
    assert set(np.unique(scene.mask)) <= {0.0, 1.0}
    assert np.all(scene.incidence > 0)


def test_scene_mask_fraction_bounds():
    scene = simulate_stack(small_config(mask_fraction=0.2, seed=9))
    frac = (scene.mask == 0).mean()
    assert 0.15 <= frac <= 0.35
    with pytest.raises(ConfigurationError):
        SceneConfig(mask_fraction=0.5)


def test_short_lag_coherence_exceeds_long_lag_on_average():
    scene = simulate_stack(small_config())
    lag_groups = {}
    for _, _, lag, pol, est in scene.coherence_pairs:
        lag_groups.setdefault(lag, []).append(est.mean())
    assert np.mean(lag_groups[14.0]) > np.mean(lag_groups[112.0])


def test_taller_stands_less_coherent():
    scene = simulate_stack(small_config())
    lag14 = [est for _, _, lag, pol, est in scene.coherence_pairs
             if lag == 14.0 and pol == "hv"]
    coh = np.median(np.stack(lag14), axis=0)
    h = scene.height
    quartiles = np.quantile(h, [0.25, 0.5, 0.75])
    bins = np.digitize(h, quartiles)
    means = [coh[bins == b].mean() for b in range(4)]
    assert all(means[i] > means[i + 1] for i in range(3))


def test_noiseless_closed_loop_recovers_decay_maps():
    cfg = small_config(looks=math.inf, enl=math.inf,
                       decay=DecayMapping(tau_min=8.0, tau_max=45.0))
    scene = simulate_stack(cfg)
    pairs = [(lag, est) for _, _, lag, pol, est in scene.coherence_pairs
             if pol == "hv"]
    lags, stack = median_aggregate(pairs)
    out = fit_decay_map(lags, stack)
    np.testing.assert_allclose(out["tau"], scene.tau_true, rtol=1e-6)
    np.testing.assert_allclose(out["rho_inf"], scene.rho_true,
                               rtol=1e-6, atol=1e-9)


def test_scene_write_is_byte_identical(tmp_path):
    cfg = small_config(size=24, n_clearings=2)
    a = tmp_path / "a"
    b = tmp_path / "b"
    simulate_stack(cfg, a)
    simulate_stack(cfg, b)
    files_a = sorted(os.listdir(a))
    files_b = sorted(os.listdir(b))
    assert files_a == files_b
    assert len(files_a) == 72 + 8 + 1
    match, mismatch, errors = filecmp.cmpfiles(a, b, files_a, shallow=False)
    assert not mismatch and not errors


def test_canopy_texture_touches_only_the_reference():
    plain = simulate_stack(small_config())
    rough = simulate_stack(small_config(canopy_texture_m=1.5))

    for pol in ("hh", "hv"):
        np.testing.assert_array_equal(plain.sigma[pol], rough.sigma[pol])
    for (_, _, _, _, a), (_, _, _, _, b) in zip(plain.coherence_pairs,
                                                rough.coherence_pairs):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(plain.tau_true, rough.tau_true)
    np.testing.assert_array_equal(plain.dem, rough.dem)
    np.testing.assert_array_equal(plain.mask, rough.mask)

    detail = rough.height - plain.height
    assert detail.std() > 1.0
    assert rough.height.min() >= 0.0
    assert rough.height.max() <= rough.config.max_height

    again = simulate_stack(small_config(canopy_texture_m=1.5))
    np.testing.assert_array_equal(rough.height, again.height)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        SceneConfig(size=4)
    with pytest.raises(ConfigurationError):
        SceneConfig(acquisitions=1)
    with pytest.raises(ConfigurationError):
        SceneConfig(looks=1)
    with pytest.raises(ConfigurationError):
        SceneConfig(spacing=33.0)  # no default look count
    with pytest.raises(ConfigurationError):
        SceneConfig(canopy_texture_m=-0.1)
    assert SceneConfig(spacing=33.0, looks=21).resolve_looks() == 21
