"""System configuration, validation and the deterministic seeding policy.

Every scalar of the model lives in :class:`SystemConfig`.  A config is
immutable once validated and can be shared read-only across parallel
trials.  All per-trial randomness is derived through :func:`stream_rng`
as a pure function of (master_seed, labels), so two runs with identical
configs are bit-identical regardless of scheduling.
"""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

MODULATIONS = ("BPSK", "QPSK")


class ConfigError(ValueError):
    """Raised with the name of the first violated invariant."""


@dataclass(frozen=True)
class SystemConfig:
    n: int                      # number of OFDM subcarriers (FFT size)
    control_band: tuple         # m distinct subcarrier indices in [0, n)
    s_cp: int                   # cyclic-prefix length (max CIR support)
    s_d: int                    # delay-spread search window (dictionary depth)
    k1: int                     # max nonzero taps per user channel
    U: int                      # preamble-set size / max user population
    k2: int                     # truly active users per frame
    alpha: float                # control-power fraction
    noise_var: float            # per-complex-dimension AWGN variance
    num_data_slots: int         # B frequency slots partitioning the data band
    modulation: str = "BPSK"
    master_seed: int = 0
    # degree distribution for replica patterns: tuple of (degree, probability)
    degree_dist: tuple = ((3, 1.0),)
    gamma_cap_db: float = 6.0   # SINR capture threshold (dB)

    @property
    def m(self) -> int:
        return len(self.control_band)

    @property
    def snr(self) -> float:
        """Overall SNR under the unit transmit-power convention (1/sigma^2)."""
        if self.noise_var == 0:
            return np.inf
        return 1.0 / self.noise_var

    def rng(self, *labels) -> np.random.Generator:
        return stream_rng(self.master_seed, *labels)

    def config_hash(self) -> str:
        parts = []
        for f in fields(self):
            parts.append(f"{f.name}={getattr(self, f.name)!r}")
        return hashlib.sha256(";".join(parts).encode()).hexdigest()[:16]


def stream_rng(master_seed: int, *labels) -> np.random.Generator:
    """Deterministic per-stream RNG from (master_seed, trial index, label, ...).

    String labels are hashed with crc32 so the derivation is stable across
    processes and runs.
    """
    key = [int(master_seed) & 0xFFFFFFFFFFFFFFFF]
    for lab in labels:
        if isinstance(lab, str):
            key.append(zlib.crc32(lab.encode()))
        else:
            key.append(int(lab) & 0xFFFFFFFFFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(key))


def validate(cfg: SystemConfig) -> SystemConfig:
    """Check every type invariant; returns the config unchanged (idempotent).

    Reports the first violated invariant by name.
    """
    if cfg.n <= 0:
        raise ConfigError("n must be a positive integer")
    band = tuple(int(i) for i in cfg.control_band)
    if len(band) == 0:
        raise ConfigError("control_band must be non-empty")
    if len(set(band)) != len(band):
        raise ConfigError("control_band indices must be unique")
    if min(band) < 0 or max(band) >= cfg.n:
        raise ConfigError("control_band indices must lie in [0, n)")
    if len(band) >= cfg.n:
        raise ConfigError("control_band must satisfy m < n")
    if not (0 < cfg.s_cp < cfg.n):
        raise ConfigError("s_cp must satisfy 0 < s_cp < n")
    if not (0 < cfg.s_d <= cfg.s_cp):
        raise ConfigError("s_d must satisfy 0 < s_d <= s_cp")
    if not (0 < cfg.k1 <= cfg.s_d):
        raise ConfigError("k1 must satisfy 0 < k1 <= s_d")
    if cfg.U <= 0:
        raise ConfigError("U must be a positive integer")
    if not (0 <= cfg.k2 <= cfg.U):
        raise ConfigError("k2 must satisfy 0 <= k2 <= U")
    if not (0.0 <= cfg.alpha <= 1.0):
        raise ConfigError("alpha must lie in [0, 1]")
    if cfg.noise_var < 0:
        raise ConfigError("noise_var must be nonnegative")
    if cfg.num_data_slots <= 0:
        raise ConfigError("num_data_slots must be a positive integer")
    if cfg.modulation not in MODULATIONS:
        raise ConfigError(f"modulation must be one of {MODULATIONS}")
    total = 0.0
    for d, p in cfg.degree_dist:
        if d < 1 or p < 0:
            raise ConfigError("degree_dist entries must be (degree>=1, prob>=0)")
        total += p
    if abs(total - 1.0) > 1e-9:
        raise ConfigError("degree_dist probabilities must sum to 1")
    if max(d for d, _ in cfg.degree_dist) > cfg.num_data_slots:
        raise ConfigError("degree_dist max degree exceeds num_data_slots")
    return cfg


def data_band(cfg: SystemConfig) -> np.ndarray:
    """Subcarrier indices of the data band (complement of the control band)."""
    mask = np.ones(cfg.n, dtype=bool)
    mask[np.asarray(cfg.control_band, dtype=int)] = False
    return np.nonzero(mask)[0]


def data_slot_subcarriers(cfg: SystemConfig) -> list[np.ndarray]:
    """Partition the data band into B equal-width contiguous slots.

    Remainder subcarriers (fewer than one slot width) stay unused.
    """
    comp = data_band(cfg)
    width = len(comp) // cfg.num_data_slots
    if width == 0:
        raise ConfigError("num_data_slots exceeds the data-band size")
    return [comp[b * width:(b + 1) * width] for b in range(cfg.num_data_slots)]


def centered_band(n: int, m: int) -> tuple:
    """m contiguous subcarriers centered in [0, n)."""
    start = (n - m) // 2
    return tuple(range(start, start + m))


def spread_band(n: int, m: int) -> tuple:
    """m evenly spaced subcarriers (scattered-pilot comb).

    A comb makes the per-user delay dictionary orthogonal for delays up to
    m, so channel estimates stay accurate across the whole band; a
    contiguous window can only resolve delays down to n/m samples.
    """
    idx = tuple(int(i * n / m) for i in range(m))
    if len(set(idx)) != m:
        raise ConfigError("spread band needs m <= n")
    return idx


def snr_db_to_noise_var(snr_db: float) -> float:
    return float(10.0 ** (-snr_db / 10.0))


def _parse_degree_dist(text: str) -> tuple:
    out = []
    for part in text.split(","):
        d, p = part.split(":")
        out.append((int(d), float(p)))
    return tuple(out)


def load_config(path) -> SystemConfig:
    """Read a flat key/value config file.

    Lines are ``key = value`` with ``#`` comments.  ``control_band`` is an
    explicit comma-separated index list, ``centered:m`` (m contiguous
    subcarriers centered in [0, n)) or ``spread:m`` (m evenly spaced).
    The noise level can be given as ``noise_var`` directly or via the
    convenience field ``snr_db`` (overall SNR, noise_var = 10^(-snr_db/10)).
    """
    raw: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = line.split("=", 1)
        raw[key.strip()] = val.strip()

    def need(key):
        if key not in raw:
            raise ConfigError(f"missing required field '{key}'")
        return raw.pop(key)

    n = int(need("n"))
    band_text = need("control_band")
    if band_text.startswith("centered:"):
        band = centered_band(n, int(band_text.split(":", 1)[1]))
    elif band_text.startswith("spread:"):
        band = spread_band(n, int(band_text.split(":", 1)[1]))
    else:
        band = tuple(int(t) for t in band_text.split(","))

    if "noise_var" in raw:
        noise_var = float(raw.pop("noise_var"))
        raw.pop("snr_db", None)
    elif "snr_db" in raw:
        noise_var = snr_db_to_noise_var(float(raw.pop("snr_db")))
    else:
        raise ConfigError("missing required field 'noise_var' (or 'snr_db')")

    cfg = SystemConfig(
        n=n,
        control_band=band,
        s_cp=int(need("s_cp")),
        s_d=int(need("s_d")),
        k1=int(need("k1")),
        U=int(need("U")),
        k2=int(need("k2")),
        alpha=float(need("alpha")),
        noise_var=noise_var,
        num_data_slots=int(need("num_data_slots")),
        modulation=raw.pop("modulation", "BPSK").upper(),
        master_seed=int(raw.pop("master_seed", "0")),
        degree_dist=_parse_degree_dist(raw.pop("degree_dist", "3:1.0")),
        gamma_cap_db=float(raw.pop("gamma_cap_db", "6.0")),
    )
    if raw:
        raise ConfigError(f"unknown config fields: {sorted(raw)}")
    return validate(cfg)


def with_params(cfg: SystemConfig, **updates) -> SystemConfig:
    """Derive a config with some fields replaced (sweeps); re-validates.

    Accepts the pseudo-field ``snr_db`` which maps onto ``noise_var``.
    """
    if "snr_db" in updates:
        updates["noise_var"] = snr_db_to_noise_var(float(updates.pop("snr_db")))
    return validate(replace(cfg, **updates))
