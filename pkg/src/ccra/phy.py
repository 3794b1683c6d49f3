"""Per-slot data-plane processing.

One-tap equalization with the estimated channel, hard demapping, SER
scoring, capture decisions and replica cancellation.  Cancellation
subtracts the re-synthesized replica built from the channel *estimate*;
since the estimate differs from the truth a residue stays in the slot,
and the slot's residual-interference tracker is bumped by its expected
power so later SINR decisions see the accumulated degradation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import SystemConfig
from .signal import BITS_PER_SYMBOL, demodulate
from .stats import wilson_interval


class PhyError(ValueError):
    pass


@dataclass
class SlotObservation:
    slot_index: int
    subcarriers: np.ndarray      # absolute subcarrier indices
    y: np.ndarray                # frequency-domain observation on the slot
    residual_power: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.residual_power is None:
            self.residual_power = np.zeros(len(self.subcarriers))


@dataclass
class EqResult:
    symbols: np.ndarray          # equalized (soft) unit-scale symbols
    hard: np.ndarray             # nearest constellation points
    bits: np.ndarray
    evm: float
    undecodable: bool = False


def freq_response(taps: np.ndarray, subcarriers: np.ndarray, n: int) -> np.ndarray:
    """Unitary-convention channel frequency response on given subcarriers.

    ``taps`` is the dense delay-domain block (length s_d or any support).
    """
    taps = np.asarray(taps)
    nz = np.nonzero(taps)[0]
    if len(nz) == 0:
        return np.zeros(len(subcarriers), dtype=complex)
    phase = np.exp(-2j * np.pi * np.outer(subcarriers, nz) / n)
    return (phase @ taps[nz]) / np.sqrt(n)


def equalize_demod(slot: SlotObservation, chan_f: np.ndarray, modulation: str,
                   amplitude: float, n: int) -> EqResult:
    """One-tap equalization then nearest-point demapping.

    ``chan_f`` is the estimated channel frequency response on the slot's
    subcarriers (unitary convention); the effective per-subcarrier gain is
    sqrt(n)*chan_f*amplitude.
    """
    gain = np.sqrt(n) * chan_f * amplitude
    if np.all(gain == 0):
        k = BITS_PER_SYMBOL[modulation]
        return EqResult(symbols=np.zeros(len(slot.y), dtype=complex),
                        hard=np.zeros(len(slot.y), dtype=complex),
                        bits=np.zeros(len(slot.y) * k, dtype=int),
                        evm=np.inf, undecodable=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(gain != 0, slot.y / np.where(gain == 0, 1.0, gain), 0.0)
    hard, bits = demodulate(s, modulation)
    evm = float(np.sqrt(np.mean(np.abs(s - hard) ** 2)))
    return EqResult(symbols=s, hard=hard, bits=bits, evm=evm)


def cancel_replica(slot: SlotObservation, chan_f: np.ndarray,
                   symbols: np.ndarray, amplitude: float, n: int,
                   user_slots=None, residue_power=None) -> SlotObservation:
    """Subtract the re-synthesized replica sqrt(n)*chan_f*amplitude*symbols.

    Mutates and returns the slot.  ``residue_power`` (scalar or per
    subcarrier) is added to the residual-interference tracker; it should
    be the expected power of the imperfection left behind.
    """
    if user_slots is not None and slot.slot_index not in user_slots:
        raise PhyError(f"user is not mapped to slot {slot.slot_index}")
    slot.y = slot.y - np.sqrt(n) * chan_f * amplitude * symbols
    if residue_power is not None:
        slot.residual_power = slot.residual_power + residue_power
    return slot


def genie_residue_power(d_f: np.ndarray, amplitude: float, n: int) -> np.ndarray:
    """Exact expected residue power per subcarrier from the true estimation
    error d_f = est - true on the slot (unit-modulus constellations)."""
    return n * np.abs(d_f) ** 2 * amplitude ** 2


def proxy_est_error_sq(cfg: SystemConfig, epsilon: float, c1: float) -> float:
    """Blind per-subcarrier squared channel-estimation error proxy.

    Derived from the l1-recovery error constant: total stacked error is
    about c1*eps over sqrt(n*alpha) column scaling, split over k2 users
    and n frequency bins, so |d_f|^2 ~ c1^2 eps^2 / (alpha n^2 k2).
    """
    if cfg.alpha <= 0:
        return np.inf
    return float(c1 ** 2 * epsilon ** 2 / (cfg.alpha * cfg.n ** 2 * cfg.k2))


def slot_sinr(slot: SlotObservation, chan_f: np.ndarray, noise_var: float,
              amplitude: float, n: int, colliders=()) -> float:
    """Slot-average SINR for one user from estimate magnitudes and the
    tracked residual power.

    ``colliders`` is an iterable of (chan_f_j, amplitude_j) pairs for the
    uncancelled interferers sharing the slot.
    """
    sig = n * np.abs(chan_f) ** 2 * amplitude ** 2
    denom = noise_var + slot.residual_power
    for cf, amp in colliders:
        denom = denom + n * np.abs(cf) ** 2 * amp ** 2
    with np.errstate(divide="ignore"):
        per_sc = np.where(denom > 0, sig / np.where(denom == 0, 1.0, denom), np.inf)
    return float(np.mean(per_sc))


def capture_decide(slot: SlotObservation, chan_f: np.ndarray, amplitude: float,
                   n: int, mode: str, noise_var: float = 0.0,
                   gamma_cap: float = 4.0, colliders=(),
                   modulation: str = "BPSK",
                   true_bits: np.ndarray | None = None) -> bool:
    """Is the candidate decodable from this slot?

    mode "sinr": decodable iff the slot-average SINR reaches gamma_cap
    (linear).  mode "genie": attempt equalize/demod and require every bit
    correct against the transmitted ones.
    """
    if mode == "sinr":
        return slot_sinr(slot, chan_f, noise_var, amplitude, n, colliders) >= gamma_cap
    if mode == "genie":
        if true_bits is None:
            raise PhyError("genie capture needs the transmitted bits")
        eq = equalize_demod(slot, chan_f, modulation, amplitude, n)
        if eq.undecodable:
            return False
        return bool(np.array_equal(eq.bits, np.asarray(true_bits)))
    raise PhyError(f"unknown capture mode {mode!r}")


def compute_ser(tx_bits, rx_bits, bits_per_symbol: int = 1):
    """Symbol-error fraction with a Wilson 95% interval.

    A symbol is wrong when any of its bits differs.
    """
    tx = np.asarray(tx_bits, dtype=int)
    rx = np.asarray(rx_bits, dtype=int)
    if tx.shape != rx.shape:
        raise PhyError("bit streams must have equal length")
    diff = (tx != rx).reshape(-1, bits_per_symbol).any(axis=1)
    ser, lo, hi = wilson_interval(int(diff.sum()), len(diff))
    return ser, (lo, hi)
