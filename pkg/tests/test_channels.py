import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crgat.channels import (
    ChannelSample,
    ScenarioConfig,
    _gain_scale,
    apply_csi_error,
    dataset_bytes,
    generate_dataset,
    load_dataset,
    noise_power_dbm,
    parse_dataset,
    path_loss_db,
    save_dataset,
    split_sizes,
)
from crgat.errors import ContractError, FormatError


def test_path_loss_reference_points():
    assert path_loss_db(1.0) == pytest.approx(140.7)
    assert path_loss_db(0.1) == pytest.approx(140.7 - 36.7)


def test_noise_power_for_ten_megahertz():
    assert noise_power_dbm(-162.0, 1e7) == pytest.approx(-92.0)


def test_default_split_of_the_full_size_dataset():
    assert split_sizes(110_000) == (90_000, 10_000, 10_000)
    assert split_sizes(500, "B") == (0, 0, 500)
    with pytest.raises(ContractError):
        split_sizes(10, "C")


def test_gain_scale_hits_the_target_mean_ratio():
    # numerical integration of E[d^-3.67] over the uniform distance law
    cfg = ScenarioConfig(2, 2)
    d = np.linspace(cfg.d_min_km, cfg.d_max_km, 200_001)
    mean_d = np.trapezoid(d ** -3.67, d) / (cfg.d_max_km - cfg.d_min_km)
    noise_mw = 10 ** (-92.0 / 10)
    ratio = _gain_scale(cfg) * 10 ** (-14.07) * mean_d / noise_mw
    assert 10 * np.log10(ratio) == pytest.approx(10.0, abs=1e-6)


def test_mean_channel_energy_matches_plnr():
    ds = generate_dataset(ScenarioConfig(4, 3, seed=5), 4000, kind="B")
    assert np.mean(np.abs(ds.h) ** 2) == pytest.approx(10.0, rel=0.05)


def test_generation_is_deterministic_and_prefix_stable():
    cfg = ScenarioConfig(3, 2, seed=11)
    a = generate_dataset(cfg, 20)
    assert a == generate_dataset(cfg, 20)
    b = generate_dataset(cfg, 7, kind="B")
    np.testing.assert_array_equal(a.h[:7], b.h)
    assert not np.array_equal(a.h, generate_dataset(cfg.replace(seed=12), 20).h)


def test_explicit_split_sizes():
    ds = generate_dataset(ScenarioConfig(2, 2), 10, sizes=(6, 2, 2))
    assert (len(ds.train), len(ds.val), len(ds.test)) == (6, 2, 2)
    with pytest.raises(ContractError):
        generate_dataset(ScenarioConfig(2, 2), 10, sizes=(6, 2, 1))


@pytest.mark.parametrize("bad", [dict(n_t=0), dict(p_max=0), dict(r_req=-1), dict(d_min_km=0.4)])
def test_scenario_validation(bad):
    with pytest.raises(ContractError):
        ScenarioConfig(**{"n_t": 2, "k_users": 2, **bad})


def test_zero_count_rejected():
    with pytest.raises(ContractError):
        generate_dataset(ScenarioConfig(2, 2), 0)


def test_roundtrip_through_file(tmp_path):
    ds = generate_dataset(ScenarioConfig(3, 2, seed=4, r_req=0.5), 22)
    save_dataset(ds, tmp_path / "d.bin")
    back = load_dataset(tmp_path / "d.bin")
    assert back == ds and back.config.r_req == 0.5
    assert dataset_bytes(back) == dataset_bytes(ds)


def test_corrupt_files_raise_format_error():
    buf = dataset_bytes(generate_dataset(ScenarioConfig(2, 2), 5))
    with pytest.raises(FormatError):
        parse_dataset(buf[:-3])
    with pytest.raises(FormatError):
        parse_dataset(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        parse_dataset(buf[:10])
    with pytest.raises(FormatError) as err:
        parse_dataset(buf + b"\0" * 16)
    assert err.value.offset is not None


def test_csi_error_statistics(rng):
    h = np.tile(np.array([[1.0, 2.0j, -1.0]]), (20_000, 1, 1))
    noisy = apply_csi_error(h, 0.01, rng)
    err = noisy - h
    # per-entry variance is rel_var * ||h_k||^2 = 0.06
    assert np.mean(np.abs(err) ** 2) == pytest.approx(0.06, rel=0.03)
    assert abs(np.mean(err)) < 0.01


def test_csi_error_edge_cases(rng):
    s = ChannelSample(np.ones((2, 2), complex))
    out = apply_csi_error(s, 0.0, rng)
    assert isinstance(out, ChannelSample)
    np.testing.assert_array_equal(out.h, s.h)
    with pytest.raises(ContractError):
        apply_csi_error(s, -0.1, rng)


@settings(max_examples=30, deadline=None)
@given(count=st.integers(1, 10_000))
def test_default_split_partitions_count(count):
    tr, va, te = split_sizes(count)
    assert tr + va + te == count and min(tr, va, te) >= 0
