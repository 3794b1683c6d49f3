import numpy as np
import pytest

import ccra
from ccra import config, signal


def small_cfg(**kw):
    base = dict(n=256, control_band=config.spread_band(256, 64), s_cp=32,
                s_d=16, k1=3, U=6, k2=2, alpha=0.5, noise_var=0.01,
                num_data_slots=8, master_seed=3)
    base.update(kw)
    return config.validate(config.SystemConfig(**base))


def direct_circular_conv(delays, gains, v):
    """Independent O(n*k) oracle: sum of cyclically shifted copies."""
    out = np.zeros(len(v), dtype=complex)
    for d, g in zip(delays, gains):
        out += g * np.roll(v, d)
    return out


def test_identity_tap_is_identity():
    rng = np.random.default_rng(0)
    v = rng.standard_normal(64) + 1j * rng.standard_normal(64)
    ch = signal.ChannelRealization(0, np.array([0]), np.array([1.0 + 0j]))
    assert np.allclose(signal.circ_apply(ch, v), v, atol=1e-12)


def test_single_delay_tap_is_cyclic_shift():
    rng = np.random.default_rng(1)
    v = rng.standard_normal(64) + 1j * rng.standard_normal(64)
    ch = signal.ChannelRealization(0, np.array([1]), np.array([1.0 + 0j]))
    assert np.allclose(signal.circ_apply(ch, v), np.roll(v, 1), atol=1e-12)


def test_circ_apply_matches_direct_convolution():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n = 1024
        delays = rng.choice(64, size=6, replace=False)
        gains = rng.standard_normal(6) + 1j * rng.standard_normal(6)
        v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        ch = signal.ChannelRealization(0, delays, gains)
        got = signal.circ_apply(ch, v)
        want = direct_circular_conv(delays, gains, v)
        assert np.linalg.norm(got - want) / np.linalg.norm(want) <= 1e-9


def test_delay_out_of_range_rejected():
    ch = signal.ChannelRealization(0, np.array([40]), np.array([1.0 + 0j]))
    with pytest.raises(ValueError, match="delay"):
        signal.circ_apply(ch, np.ones(64), s_cp=32)


def test_preamble_energy_and_support():
    cfg = small_cfg()
    pre = signal.gen_preamble_set(cfg)
    band = set(cfg.control_band)
    for u in range(cfg.U):
        p = pre.time_domain(u)
        assert np.linalg.norm(p) ** 2 == pytest.approx(cfg.n * cfg.alpha, rel=1e-12)
        full = pre.full_freq(u)
        outside = [abs(full[f]) for f in range(cfg.n) if f not in band]
        assert max(outside) == 0.0


def test_preamble_coherence_scale():
    cfg = small_cfg(n=2048, control_band=config.spread_band(2048, 839),
                    U=100, s_cp=64, s_d=32, k1=4, num_data_slots=8)
    pre = signal.gen_preamble_set(cfg)
    gram = pre.band_values @ pre.band_values.conj().T
    scale = cfg.n * cfg.alpha
    off = np.abs(gram - np.diag(np.diag(gram))) / scale
    mx = off.max()
    assert mx < 1.0
    # random-phase rows: worst coherence of ~100 rows concentrates near
    # sqrt(log U / m), a small multiple of the m^(-1/2) scale
    assert 0.5 / np.sqrt(cfg.m) < mx < 8.0 / np.sqrt(cfg.m)


def test_channel_generation_statistics():
    cfg = small_cfg(k1=1)
    for ch in signal.gen_channels(cfg, range(cfg.U)):
        assert len(ch.delays) == 1
    cfg = small_cfg(n=2048, control_band=config.spread_band(2048, 280),
                    s_cp=512, s_d=300, k1=6, U=10000, num_data_slots=8)
    energies = [np.sum(np.abs(c.gains) ** 2)
                for c in signal.gen_channels(cfg, range(10000))]
    assert 0.97 <= np.mean(energies) <= 1.03
    assert all(c.delays.max() < 300 for c in signal.gen_channels(cfg, range(50)))


def test_synthesize_no_users_is_zero():
    cfg = small_cfg(noise_var=0.0, k2=0)
    pre = signal.gen_preamble_set(cfg)
    y = signal.synthesize_rx(cfg, pre, [], None)
    assert np.linalg.norm(y) == 0.0


def test_synthesize_identity_channel_single_user():
    cfg = small_cfg(noise_var=0.0, k2=1)
    pre = signal.gen_preamble_set(cfg)
    ch = [signal.ChannelRealization(0, np.array([0]), np.array([1.0 + 0j]))]
    payload = signal.gen_payload(cfg, [0], [pre.patterns[0]])
    y = signal.synthesize_rx(cfg, pre, ch, payload)
    x = signal.payload_freq(cfg, payload)[0]
    want = pre.time_domain(0) + signal.ifft_u(x)
    assert np.linalg.norm(y - want) / np.linalg.norm(want) <= 1e-12


def test_control_band_closed_form():
    cfg = small_cfg()
    pre = signal.gen_preamble_set(cfg)
    chans = signal.gen_channels(cfg, [0, 1])
    payload = signal.gen_payload(cfg, [0, 1], [pre.patterns[0], pre.patterns[1]])
    y = signal.synthesize_rx(cfg, pre, chans, payload, seed=11)
    band = np.asarray(cfg.control_band)
    got = signal.fft_u(y)[band]
    want = np.zeros(len(band), dtype=complex)
    for ch in chans:
        hf = signal.channel_freq(ch, cfg.n)[band]
        want += np.sqrt(cfg.n) * hf * pre.band_values[ch.user_id]
    rng = config.stream_rng(11, "noise")
    noise = np.sqrt(cfg.noise_var / 2.0) * (
        rng.standard_normal(cfg.n) + 1j * rng.standard_normal(cfg.n))
    want += signal.fft_u(noise)[band]
    assert np.linalg.norm(got - want) / np.linalg.norm(want) <= 1e-9


def test_parseval_both_domains():
    cfg = small_cfg()
    pre = signal.gen_preamble_set(cfg)
    chans = signal.gen_channels(cfg, [0, 1])
    payload = signal.gen_payload(cfg, [0, 1], [pre.patterns[0], pre.patterns[1]])
    y = signal.synthesize_rx(cfg, pre, chans, payload)
    e_t = np.linalg.norm(y) ** 2
    e_f = np.linalg.norm(signal.fft_u(y)) ** 2
    assert abs(e_t - e_f) / e_t <= 1e-10


def test_linearity_of_superposition():
    cfg = small_cfg(noise_var=0.0)
    pre = signal.gen_preamble_set(cfg)
    chans = signal.gen_channels(cfg, [0, 1])
    pl = signal.gen_payload(cfg, [0, 1], [pre.patterns[0], pre.patterns[1]])
    y_both = signal.synthesize_rx(cfg, pre, chans, pl)
    pl0 = signal.gen_payload(cfg, [0], [pre.patterns[0]])
    pl1 = signal.gen_payload(cfg, [1], [pre.patterns[1]])
    y0 = signal.synthesize_rx(cfg, pre, [chans[0]], pl0)
    y1 = signal.synthesize_rx(cfg, pre, [chans[1]], pl1)
    assert np.linalg.norm(y_both - y0 - y1) <= 1e-10 * np.linalg.norm(y_both)


def test_control_data_orthogonality():
    # payload on the data band leaves the control-band observation untouched
    cfg = small_cfg(noise_var=0.0)
    pre = signal.gen_preamble_set(cfg)
    chans = signal.gen_channels(cfg, [0, 1])
    pl = signal.gen_payload(cfg, [0, 1], [pre.patterns[0], pre.patterns[1]])
    band = np.asarray(cfg.control_band)
    with_data = signal.fft_u(signal.synthesize_rx(cfg, pre, chans, pl))[band]
    without = signal.fft_u(signal.synthesize_rx(cfg, pre, chans, None))[band]
    assert np.allclose(with_data, without, atol=1e-12)


@pytest.mark.parametrize("modulation", ["BPSK", "QPSK"])
def test_modulate_demodulate_roundtrip(modulation):
    rng = np.random.default_rng(4)
    bits = rng.integers(0, 2, size=64 * signal.BITS_PER_SYMBOL[modulation])
    syms = signal.modulate(bits, modulation)
    assert np.allclose(np.abs(syms), 1.0)
    hard, back = signal.demodulate(syms, modulation)
    assert np.array_equal(back, bits)
    assert np.allclose(hard, syms)


def test_alpha_zero_warns():
    cfg = small_cfg(alpha=0.0)
    with pytest.warns(UserWarning, match="alpha=0"):
        signal.gen_preamble_set(cfg)


def test_dump_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    y = (rng.standard_normal(64) + 1j * rng.standard_normal(64)).astype(np.complex64)
    gt = (rng.standard_normal(8) + 1j * rng.standard_normal(8)).astype(np.complex64)
    path = tmp_path / "rx.bin"
    signal.dump_rx(path, y, gt)
    y2, gt2 = signal.load_rx(path)
    assert np.allclose(y2, y)
    assert np.allclose(gt2, gt)
    # 16-byte header: 8-byte magic then little-endian uint64 length
    raw = path.read_bytes()
    assert raw[:8] == signal.DUMP_MAGIC
    assert int.from_bytes(raw[8:16], "little") == 64
