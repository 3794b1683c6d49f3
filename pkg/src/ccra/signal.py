"""Signal synthesis: transforms, circulant channels, preambles, payloads.

Conventions (used everywhere downstream):

* the Fourier map is unitary, ``x_hat = fft(x)/sqrt(n)``, so signal energy
  is identical in both domains;
* a sparse channel applied to a signal is the circular convolution of the
  zero-padded tap vector, evaluated in the frequency domain as
  ``sqrt(n) * ifft_u(h_hat * v_hat)``;
* preambles occupy only the control band with constant modulus per bin and
  time-domain energy ``n * alpha`` exactly;
* a user's data symbols sit on the subcarriers of its pattern slots, every
  replica carrying the same symbols, with total frame data energy
  ``n * (1 - alpha)`` split evenly over the occupied subcarriers.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .config import SystemConfig, data_slot_subcarriers, stream_rng

DUMP_MAGIC = b"CCRADUMP"

# unit-energy constellations, Gray-mapped
_BPSK = np.array([1.0 + 0j, -1.0 + 0j])
_QPSK = np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j]) / np.sqrt(2.0)

CONSTELLATIONS = {"BPSK": _BPSK, "QPSK": _QPSK}
BITS_PER_SYMBOL = {"BPSK": 1, "QPSK": 2}


@dataclass(frozen=True)
class ChannelRealization:
    """Sparse channel impulse response of one user: (delay, gain) taps."""
    user_id: int
    delays: np.ndarray   # int, unique, within [0, s_d)
    gains: np.ndarray    # complex, one per delay


@dataclass(frozen=True)
class PreambleSet:
    """U frequency-domain signatures on the control band plus their patterns.

    ``band_values[u]`` holds p_hat_u restricted to the control band (the
    full vector is zero elsewhere).  ``patterns[u]`` is the tuple of data
    slots addressed by preamble u.
    """
    band: np.ndarray            # control-band subcarrier indices
    band_values: np.ndarray     # (U, m) complex
    patterns: tuple             # U tuples of slot indices
    n: int
    alpha: float

    @property
    def U(self) -> int:
        return self.band_values.shape[0]

    def full_freq(self, u: int) -> np.ndarray:
        p = np.zeros(self.n, dtype=complex)
        p[self.band] = self.band_values[u]
        return p

    def time_domain(self, u: int) -> np.ndarray:
        return ifft_u(self.full_freq(u))


@dataclass
class TxPayload:
    """Per-active-user data: slot placement, symbols, bits, amplitude."""
    users: list                 # preamble indices, aligned with lists below
    slot_lists: list            # list of tuples of slot indices
    symbols: list               # list of (slot_width,) unit-energy symbols
    bits: list                  # list of (slot_width*bits_per_symbol,) int arrays
    amplitudes: list            # per-user per-subcarrier amplitude scale
    modulation: str


def fft_u(x: np.ndarray) -> np.ndarray:
    """Unitary DFT along the last axis."""
    return np.fft.fft(x, axis=-1, norm="ortho")


def ifft_u(x: np.ndarray) -> np.ndarray:
    return np.fft.ifft(x, axis=-1, norm="ortho")


def channel_freq(chan: ChannelRealization, n: int) -> np.ndarray:
    """Unitary DFT of the zero-padded tap vector."""
    h = np.zeros(n, dtype=complex)
    h[chan.delays] = chan.gains
    return fft_u(h)


def circ_apply(chan: ChannelRealization, v: np.ndarray, s_cp: int | None = None) -> np.ndarray:
    """Apply the circulant channel to a time-domain signal.

    Computed as sqrt(n) * ifft_u(h_hat * v_hat); bit-for-bit deterministic.
    """
    n = len(v)
    if np.any(chan.delays < 0) or (s_cp is not None and np.any(chan.delays >= s_cp)):
        raise ValueError("channel delay out of range")
    if np.any(chan.delays >= n):
        raise ValueError("channel delay out of range")
    h_hat = channel_freq(chan, n)
    return np.sqrt(n) * ifft_u(h_hat * fft_u(v))


def gen_patterns(cfg: SystemConfig, seed: int | None = None) -> tuple:
    """Replica pattern per preamble index: degree from the configured node
    distribution, slots uniform without replacement, deterministic in
    (u, seed)."""
    seed = cfg.master_seed if seed is None else seed
    degrees = np.array([d for d, _ in cfg.degree_dist])
    probs = np.array([p for _, p in cfg.degree_dist])
    patterns = []
    for u in range(cfg.U):
        rng = stream_rng(seed, "pattern", u)
        d = int(rng.choice(degrees, p=probs))
        slots = rng.choice(cfg.num_data_slots, size=d, replace=False)
        patterns.append(tuple(int(s) for s in np.sort(slots)))
    return tuple(patterns)


def gen_preamble_set(cfg: SystemConfig, seed: int | None = None) -> PreambleSet:
    """Draw the U random-phase constant-modulus preambles and their patterns.

    Each occupied bin carries magnitude sqrt(n*alpha/m) so the time-domain
    norm^2 is exactly n*alpha.
    """
    seed = cfg.master_seed if seed is None else seed
    if cfg.alpha == 0.0 and cfg.k2 > 0:
        warnings.warn("alpha=0 with active users: activity detection is "
                      "impossible (degenerate but allowed)")
    band = np.asarray(cfg.control_band, dtype=int)
    m = len(band)
    mag = np.sqrt(cfg.n * cfg.alpha / m)
    vals = np.empty((cfg.U, m), dtype=complex)
    for u in range(cfg.U):
        rng = stream_rng(seed, "preamble", u)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=m)
        vals[u] = mag * np.exp(1j * phases)
    return PreambleSet(band=band, band_values=vals,
                       patterns=gen_patterns(cfg, seed),
                       n=cfg.n, alpha=cfg.alpha)


def gen_channels(cfg: SystemConfig, active_users, seed: int | None = None) -> list[ChannelRealization]:
    """Independent sparse channels for the active users.

    Exactly k1 taps per user: delays uniform without replacement on
    [0, s_d), gains iid circular complex Gaussian with variance 1/k1, so
    the average channel energy is 1.
    """
    seed = cfg.master_seed if seed is None else seed
    out = []
    for u in active_users:
        rng = stream_rng(seed, "channel", int(u))
        delays = np.sort(rng.choice(cfg.s_d, size=cfg.k1, replace=False))
        scale = np.sqrt(1.0 / (2.0 * cfg.k1))
        gains = scale * (rng.standard_normal(cfg.k1) + 1j * rng.standard_normal(cfg.k1))
        out.append(ChannelRealization(user_id=int(u), delays=delays, gains=gains))
    return out


def modulate(bits: np.ndarray, modulation: str) -> np.ndarray:
    """Gray-mapped unit-energy symbols from a bit array."""
    k = BITS_PER_SYMBOL[modulation]
    bits = np.asarray(bits, dtype=int).reshape(-1, k)
    idx = bits @ (1 << np.arange(k - 1, -1, -1))
    return CONSTELLATIONS[modulation][idx]


def demodulate(symbols: np.ndarray, modulation: str) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-constellation-point demapping -> (hard symbols, bits)."""
    const = CONSTELLATIONS[modulation]
    k = BITS_PER_SYMBOL[modulation]
    idx = np.argmin(np.abs(symbols[:, None] - const[None, :]), axis=1)
    bits = ((idx[:, None] >> np.arange(k - 1, -1, -1)) & 1).reshape(-1)
    return const[idx], bits


def data_amplitude(cfg: SystemConfig, n_occupied: int) -> float:
    """Per-subcarrier amplitude so total frame data energy is n*(1-alpha)."""
    if n_occupied == 0:
        return 0.0
    return float(np.sqrt(cfg.n * (1.0 - cfg.alpha) / n_occupied))


def gen_payload(cfg: SystemConfig, users, slot_lists, seed: int | None = None,
                modulation: str | None = None) -> TxPayload:
    """Random data bits and symbols for each user; replicas are verbatim."""
    seed = cfg.master_seed if seed is None else seed
    modulation = modulation or cfg.modulation
    slots = data_slot_subcarriers(cfg)
    width = len(slots[0])
    bps = BITS_PER_SYMBOL[modulation]
    syms, bits, amps = [], [], []
    for u, sl in zip(users, slot_lists):
        rng = stream_rng(seed, "data", int(u))
        b = rng.integers(0, 2, size=width * bps)
        syms.append(modulate(b, modulation))
        bits.append(b)
        amps.append(data_amplitude(cfg, len(sl) * width))
    return TxPayload(users=list(users), slot_lists=list(slot_lists),
                     symbols=syms, bits=bits, amplitudes=amps,
                     modulation=modulation)


def payload_freq(cfg: SystemConfig, payload: TxPayload) -> dict[int, np.ndarray]:
    """Frequency-domain data vectors x_hat_u (length n), one per user."""
    slots = data_slot_subcarriers(cfg)
    out = {}
    for i, u in enumerate(payload.users):
        x = np.zeros(cfg.n, dtype=complex)
        for s in payload.slot_lists[i]:
            x[slots[s]] = payload.amplitudes[i] * payload.symbols[i]
        out[u] = x
    return out


def synthesize_rx(cfg: SystemConfig, preambles: PreambleSet,
                  channels: list[ChannelRealization],
                  payload: TxPayload | None = None,
                  seed: int | None = None,
                  preamble_choice: dict[int, int] | None = None) -> np.ndarray:
    """Received time-domain signal: superposition of every active user's
    preamble+data through its channel, plus AWGN of variance noise_var per
    complex dimension.

    ``preamble_choice`` maps user_id -> preamble index (defaults to the
    user's own index).
    """
    seed = cfg.master_seed if seed is None else seed
    y_hat = np.zeros(cfg.n, dtype=complex)
    xfreq = payload_freq(cfg, payload) if payload is not None else {}
    for chan in channels:
        u = chan.user_id
        p_idx = preamble_choice.get(u, u) if preamble_choice else u
        s_hat = preambles.full_freq(p_idx)
        if u in xfreq:
            s_hat = s_hat + xfreq[u]
        y_hat += np.sqrt(cfg.n) * channel_freq(chan, cfg.n) * s_hat
    y = ifft_u(y_hat)
    if cfg.noise_var > 0:
        rng = stream_rng(seed, "noise")
        scale = np.sqrt(cfg.noise_var / 2.0)
        y = y + scale * (rng.standard_normal(cfg.n) + 1j * rng.standard_normal(cfg.n))
    return y


def dump_rx(path, y: np.ndarray, ground_truth: np.ndarray | None = None) -> None:
    """Binary debug dump: 16-byte header (magic, n) then the received
    signal as little-endian interleaved complex64, optionally followed by
    the stacked ground-truth channel vector in the same encoding.
    """
    n = len(y)
    with open(path, "wb") as f:
        f.write(DUMP_MAGIC)
        f.write(struct.pack("<Q", n))
        f.write(np.ascontiguousarray(y, dtype="<c8").tobytes())
        if ground_truth is not None:
            f.write(np.ascontiguousarray(ground_truth, dtype="<c8").tobytes())


def load_rx(path) -> tuple[np.ndarray, np.ndarray | None]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != DUMP_MAGIC:
            raise ValueError("bad dump magic")
        (n,) = struct.unpack("<Q", f.read(8))
        rest = np.frombuffer(f.read(), dtype="<c8")
    y = rest[:n].astype(complex)
    gt = rest[n:].astype(complex) if len(rest) > n else None
    return y, gt
