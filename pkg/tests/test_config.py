import numpy as np
import pytest

from ccra import config


def paper_scale():
    return config.SystemConfig(
        n=24576, control_band=config.centered_band(24576, 839), s_cp=3000,
        s_d=300, k1=6, U=100, k2=10, alpha=0.21, noise_var=0.01,
        num_data_slots=10, master_seed=1)


def test_paper_scale_config_valid():
    cfg = config.validate(paper_scale())
    assert cfg.m == 839
    # idempotent
    assert config.validate(cfg) == cfg


def test_duplicate_band_index_rejected():
    cfg = paper_scale()
    bad = config.SystemConfig(**{**cfg.__dict__, "control_band": (1, 1, 2)})
    with pytest.raises(config.ConfigError, match="unique"):
        config.validate(bad)


def test_alpha_out_of_range_rejected():
    with pytest.raises(config.ConfigError, match="alpha"):
        config.with_params(paper_scale(), alpha=1.5)


@pytest.mark.parametrize("field,value", [
    ("s_d", 4000),          # exceeds s_cp
    ("k1", 0),
    ("k2", 101),
    ("noise_var", -1.0),
    ("num_data_slots", 0),
    ("modulation", "8PSK"),
])
def test_invariant_violations_named(field, value):
    cfg = paper_scale()
    bad = config.SystemConfig(**{**cfg.__dict__, field: value})
    with pytest.raises(config.ConfigError):
        config.validate(bad)


def test_degree_dist_must_sum_to_one():
    with pytest.raises(config.ConfigError, match="degree_dist"):
        config.with_params(paper_scale(), degree_dist=((3, 0.5),))


def test_seed_determinism():
    a = config.stream_rng(7, "chan", 3).standard_normal(16)
    b = config.stream_rng(7, "chan", 3).standard_normal(16)
    c = config.stream_rng(7, "chan", 4).standard_normal(16)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_spread_band_properties():
    band = config.spread_band(2048, 280)
    assert len(set(band)) == 280
    assert max(band) < 2048


def test_data_slots_partition_disjoint():
    cfg = config.validate(config.SystemConfig(
        n=256, control_band=config.spread_band(256, 64), s_cp=16, s_d=8,
        k1=2, U=4, k2=2, alpha=0.5, noise_var=0.0, num_data_slots=6))
    slots = config.data_slot_subcarriers(cfg)
    assert len(slots) == 6
    widths = {len(s) for s in slots}
    assert widths == {(256 - 64) // 6}
    flat = np.concatenate(slots)
    assert len(np.unique(flat)) == len(flat)
    assert not set(flat) & set(cfg.control_band)


def test_load_config_roundtrip(tmp_path):
    p = tmp_path / "demo.cfg"
    p.write_text("""
# demo
n = 512
control_band = centered:128
s_cp = 32
s_d = 16
k1 = 3
U = 10
k2 = 2
alpha = 0.4
snr_db = 20
num_data_slots = 8
modulation = bpsk
master_seed = 99
degree_dist = 2:0.25,3:0.75
""")
    cfg = config.load_config(p)
    assert cfg.m == 128
    assert cfg.control_band[0] == (512 - 128) // 2
    assert cfg.noise_var == pytest.approx(0.01)
    assert cfg.modulation == "BPSK"
    assert cfg.degree_dist == ((2, 0.25), (3, 0.75))


def test_load_config_explicit_band_and_errors(tmp_path):
    p = tmp_path / "demo.cfg"
    base = ("n = 64\ncontrol_band = 0,5,9\ns_cp = 8\ns_d = 4\nk1 = 2\n"
            "U = 4\nk2 = 1\nalpha = 0.5\nnoise_var = 0.0\nnum_data_slots = 4\n")
    p.write_text(base)
    cfg = config.load_config(p)
    assert cfg.control_band == (0, 5, 9)

    p.write_text(base + "bogus_field = 1\n")
    with pytest.raises(config.ConfigError, match="bogus_field"):
        config.load_config(p)

    p.write_text(base.replace("n = 64\n", ""))
    with pytest.raises(config.ConfigError, match="'n'"):
        config.load_config(p)


def test_with_params_snr_db():
    cfg = config.with_params(paper_scale(), snr_db=10)
    assert cfg.noise_var == pytest.approx(0.1)
    assert cfg.snr == pytest.approx(10.0)
