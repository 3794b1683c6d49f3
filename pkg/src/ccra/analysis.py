"""Analytical companions: and-or-tree density evolution with generalized
capture, degree-distribution algebra, achievable-rate lower bounds and
reference fading curves.

The slot-side update treats pi[t, j] as the probability that a user
decodes in a degree-j slot once t interferers are cancelled.  With q the
probability that a replica has *not* been removed and q0 = 1, the
self-consistent recursion is

    p = 1 - sum_j omega_j sum_t C(j-1, t) (1-q)^t q^(j-1-t) pi[t, j]
    q = sum_k lambda_k p^(k-1)

which reduces exactly to the classical peeling recursion
p = 1 - omega(1-q) under singleton-only capture.  A strict-paper mode
evaluating the printed binomial weighting verbatim is kept behind a flag
for comparison.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special
from scipy.stats import poisson

from . import phy, recovery
from .config import SystemConfig, data_slot_subcarriers, stream_rng, with_params
from .signal import (data_amplitude, fft_u, gen_channels, gen_payload,
                     gen_preamble_set, synthesize_rx)


class AnalysisError(ValueError):
    pass


# ---------------------------------------------------------------------------
# degree-distribution algebra
# ---------------------------------------------------------------------------

def check_node_dist(dist) -> tuple:
    dist = tuple((int(d), float(p)) for d, p in dist)
    if not dist or abs(sum(p for _, p in dist) - 1.0) > 1e-9:
        raise AnalysisError("node distribution must sum to 1")
    if any(d < 1 or p < 0 for d, p in dist):
        raise AnalysisError("node distribution needs degrees >= 1, probs >= 0")
    return dist


def avg_degree(dist) -> float:
    return float(sum(d * p for d, p in dist))


def node_poly(dist, x: float) -> float:
    return float(sum(p * x ** d for d, p in dist))


def edge_from_node(dist) -> tuple:
    """Edge-oriented user degree distribution: lambda_k = k*L_k / L'(1)."""
    dist = check_node_dist(dist)
    mean = avg_degree(dist)
    if mean == 0:
        raise AnalysisError("degenerate node distribution (no edges)")
    return tuple((d, d * p / mean) for d, p in dist)


def edge_poly(edge_dist, x: float) -> float:
    """lambda(x) = sum_k lambda_k x^(k-1)."""
    total = 0.0
    for k, lk in edge_dist:
        total += lk * (1.0 if k == 1 else x ** (k - 1))
    return float(total)


def slot_edge_dist(G: float, dist, j_max: int | None = None) -> np.ndarray:
    """Edge-oriented slot degree distribution induced by load G.

    Slot degrees are Poisson(G * L'(1)) in the large-frame limit; the pmf
    is truncated at j_max with the tail mass folded into the last bin, and
    omega_j = j*Psi_j / sum_j j*Psi_j.  Returns an array indexed by j
    (entry 0 unused).
    """
    if G <= 0:
        raise AnalysisError("load G must be positive")
    mu = G * avg_degree(check_node_dist(dist))
    if j_max is None:
        j_max = max(50, int(np.ceil(10.0 * mu)))
    js = np.arange(0, j_max + 1)
    psi = poisson.pmf(js, mu)
    psi[j_max] += max(0.0, 1.0 - psi.sum())
    w = js * psi
    total = w.sum()
    if total <= 0:
        raise AnalysisError("degenerate slot distribution")
    return w / total


# ---------------------------------------------------------------------------
# capture tables
# ---------------------------------------------------------------------------

@dataclass
class CaptureTable:
    """pi[j][t]: decode probability in a degree-j slot after t of its
    interferers were cancelled (t in [0, j-1]).

    Values must be in [0, 1] and non-decreasing in t for fixed j; noisy
    Monte Carlo inputs are isotonically clamped with a warning.
    """
    pi: np.ndarray               # (j_max+1, j_max), row j uses cols 0..j-1
    monotonized: bool = False

    @classmethod
    def from_rows(cls, rows: dict) -> "CaptureTable":
        j_max = max(rows)
        pi = np.zeros((j_max + 1, j_max))
        fixed = False
        for j, vals in rows.items():
            vals = np.asarray(vals, dtype=float)
            if len(vals) != j:
                raise AnalysisError(f"row j={j} needs {j} entries")
            if np.any(vals < -1e-12) or np.any(vals > 1 + 1e-12):
                raise AnalysisError("capture probabilities must be in [0, 1]")
            clamped = np.maximum.accumulate(np.clip(vals, 0.0, 1.0))
            if np.max(np.abs(clamped - vals)) > 1e-12:
                fixed = True
            pi[j, :j] = clamped
        if fixed:
            warnings.warn("capture table was not monotone in t; clamped")
        return cls(pi=pi, monotonized=fixed)

    @classmethod
    def singleton_only(cls, j_max: int) -> "CaptureTable":
        return cls.from_rows({j: [1.0 if t == j - 1 else 0.0 for t in range(j)]
                              for j in range(1, j_max + 1)})

    @classmethod
    def always(cls, j_max: int) -> "CaptureTable":
        return cls.from_rows({j: [1.0] * j for j in range(1, j_max + 1)})

    @property
    def j_max(self) -> int:
        return self.pi.shape[0] - 1

    def prob(self, t: int, j: int) -> float:
        if j > self.j_max:
            return 0.0
        return float(self.pi[j, t])

    def extended(self, j_max: int) -> "CaptureTable":
        """Zero-extend to larger slot degrees (conservative: slots beyond
        the measured range never decode, matching ``prob``)."""
        if j_max <= self.j_max:
            return self
        pi = np.zeros((j_max + 1, j_max))
        pi[:self.j_max + 1, :self.j_max] = self.pi
        return CaptureTable(pi=pi, monotonized=self.monotonized)


# ---------------------------------------------------------------------------
# and-or tree density evolution
# ---------------------------------------------------------------------------

@dataclass
class DEResult:
    p_traj: list
    q_traj: list
    p_inf: float
    q_inf: float
    pd_edge: float               # 1 - q_inf
    pd_node: float               # 1 - node_poly(p_inf)
    iterations: int
    converged: bool
    convention: str = "consistent"

    @property
    def ploss_node(self) -> float:
        return 1.0 - self.pd_node


def and_or_tree(omega: np.ndarray, node_dist, pi: CaptureTable,
                tol: float = 1e-12, max_iter: int = 10000,
                strict_paper: bool = False,
                coverage_tol: float = 1e-9) -> DEResult:
    """Fixed-point (p_i, q_i) recursion with q_0 = 1.

    ``omega`` is indexed by slot degree j (entry 0 unused).  Raises if the
    capture table leaves non-negligible omega mass uncovered.
    """
    node_dist = check_node_dist(node_dist)
    edge_dist = edge_from_node(node_dist)
    j_max = len(omega) - 1
    uncovered = float(np.sum(omega[pi.j_max + 1:])) if pi.j_max < j_max else 0.0
    if uncovered > coverage_tol:
        raise AnalysisError(
            f"capture table covers j<={pi.j_max} but omega has mass "
            f"{uncovered:.3g} beyond it")

    js = np.nonzero(omega[1:] > 0)[0] + 1
    # binomial coefficient rows C(j-1, t)
    combs = {int(j): special.comb(j - 1, np.arange(j)) for j in js}
    pis = {int(j): pi.pi[j, :j] if j <= pi.j_max else np.zeros(j) for j in js}
    edge_dist = edge_from_node(node_dist)

    q = 1.0
    p = 1.0
    p_traj, q_traj = [], []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        acc = 0.0
        for j in js:
            t = np.arange(j)
            if strict_paper:
                w = q ** t * (1.0 - q) ** (j - 1 - t)
            else:
                w = (1.0 - q) ** t * q ** (j - 1 - t)
            acc += omega[j] * float(np.dot(combs[j] * w, pis[j]))
        p = acc if strict_paper else 1.0 - acc
        p = min(max(p, 0.0), 1.0)
        q_new = edge_poly(edge_dist, p)
        p_traj.append(p)
        q_traj.append(q_new)
        if abs(q_new - q) < tol:
            q = q_new
            converged = True
            break
        q = q_new
    return DEResult(p_traj=p_traj, q_traj=q_traj, p_inf=p, q_inf=q,
                    pd_edge=1.0 - q, pd_node=1.0 - node_poly(node_dist, p),
                    iterations=it, converged=converged,
                    convention="strict-paper" if strict_paper else "consistent")


def de_for_load(G: float, node_dist, pi: CaptureTable | None = None,
                strict_paper: bool = False, **kw) -> DEResult:
    omega = slot_edge_dist(G, node_dist)
    if pi is None:
        pi = CaptureTable.singleton_only(len(omega) - 1)
    return and_or_tree(omega, node_dist, pi, strict_paper=strict_paper, **kw)


def de_threshold(node_dist, pi: CaptureTable | None = None,
                 g_lo: float = 0.3, g_hi: float = 1.2, tol: float = 1e-3,
                 success_q: float = 1e-4) -> float:
    """Largest load at which the fixpoint still resolves (q -> ~0),
    located by bisection."""
    def succeeds(G):
        return de_for_load(G, node_dist, pi).q_inf < success_q
    if not succeeds(g_lo):
        raise AnalysisError("lower bracket already fails")
    if succeeds(g_hi):
        return g_hi
    lo, hi = g_lo, g_hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if succeeds(mid):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# capture table from the physical layer
# ---------------------------------------------------------------------------

def capture_table_from_phy(cfg: SystemConfig, trials: int,
                           seed: int | None = None, j_max: int = 4,
                           capture: str = "genie",
                           solver: str = "hicosamp") -> CaptureTable:
    """Monte Carlo pi[t, j] over full-phy slot instances.

    For each cell, j users transmit replicas into the same slot, the
    control receiver estimates their channels, t randomly chosen users are
    cancelled with residual accrual, and each remaining user attempts
    capture under the configured mode.
    """
    if trials < 1:
        raise AnalysisError("trials must be >= 1")
    seed = cfg.master_seed if seed is None else seed
    rows = {}
    for j in range(1, j_max + 1):
        row = []
        for t in range(j):
            row.append(_capture_cell(cfg, j, t, trials, seed, capture, solver))
        rows[j] = row
    return CaptureTable.from_rows(rows)


def _capture_cell(cfg, j, t, trials, seed, capture, solver) -> float:
    cfg_j = with_params(cfg, k2=j)
    preambles = gen_preamble_set(cfg_j)
    A = recovery.MeasurementOperator(preambles, cfg_j.s_d)
    slots_sc = data_slot_subcarriers(cfg_j)
    width = len(slots_sc[0])
    gamma_cap = 10.0 ** (cfg_j.gamma_cap_db / 10.0)
    ok = att = 0
    for trial in range(trials):
        rng = stream_rng(seed, "pitable", j, t, trial)
        pres = np.sort(rng.choice(cfg_j.U, size=j, replace=False))
        devices = list(range(j))
        choice = {d: int(p) for d, p in zip(devices, pres)}
        channels = gen_channels(cfg_j, devices, rng.integers(2**63))
        slot_lists = [(0,)] * j
        payload = gen_payload(cfg_j, devices, slot_lists, rng.integers(2**63))
        y = synthesize_rx(cfg_j, preambles, channels, payload,
                          rng.integers(2**63), preamble_choice=choice)
        y_hat = fft_u(y)
        y_b = y_hat[np.asarray(cfg_j.control_band, dtype=int)]
        if solver == "bpdn":
            sol = recovery.bpdn_solve(A, y_b, recovery.default_epsilon(cfg_j))
        else:
            sol = recovery.hicosamp_solve(A, y_b, j, cfg_j.k1)
        est = sol.h.reshape(cfg_j.U, cfg_j.s_d)
        obs = phy.SlotObservation(slot_index=0, subcarriers=slots_sc[0],
                                  y=y_hat[slots_sc[0]].copy())
        amp = data_amplitude(cfg_j, width)
        order = rng.permutation(j)
        cancelled, remaining = order[:t], order[t:]
        cf = {}
        for d in devices:
            cf[d] = phy.freq_response(est[choice[d]], slots_sc[0], cfg_j.n)
        for d in cancelled:
            d = int(d)
            ch = channels[d]
            taps = np.zeros(cfg_j.s_d, dtype=complex)
            taps[ch.delays] = ch.gains
            true_cf = phy.freq_response(taps, slots_sc[0], cfg_j.n)
            residue = phy.genie_residue_power(cf[d] - true_cf, amp, cfg_j.n)
            phy.cancel_replica(obs, cf[d], payload.symbols[d], amp, cfg_j.n,
                               residue_power=residue)
        for d in remaining:
            d = int(d)
            colliders = [(cf[int(o)], amp) for o in remaining if int(o) != d]
            decodable = phy.capture_decide(
                obs, cf[d], amp, cfg_j.n, capture, noise_var=cfg_j.noise_var,
                gamma_cap=gamma_cap, colliders=colliders,
                modulation=cfg_j.modulation, true_bits=payload.bits[d])
            ok += int(decodable)
            att += 1
    return ok / max(att, 1)


# ---------------------------------------------------------------------------
# rate bounds
# ---------------------------------------------------------------------------

SQRT2 = float(np.sqrt(2.0))


def c1_of_delta(delta2k: float) -> float:
    """Recovery-error constant 4*sqrt(1+d) / (1 - (1+sqrt(2))*d)."""
    if not (0.0 <= delta2k < SQRT2 - 1.0):
        raise AnalysisError("delta2k must lie in [0, sqrt(2)-1)")
    return float(4.0 * np.sqrt(1.0 + delta2k) / (1.0 - (1.0 + SQRT2) * delta2k))


@dataclass
class RateBoundInputs:
    alpha: float
    noise_var: float
    m: int
    n: int
    k2: int
    delta2k: float
    pbar_md: float = 1.0        # 1 - P_md at the operating threshold
    e_log: float = 0.0          # conditional expectation term (bare)
    n_colliders: int = 0


def _penalty(inp: RateBoundInputs, factor: float) -> float:
    if inp.alpha == 0.0:
        return np.inf
    c1 = c1_of_delta(inp.delta2k)
    return float(np.log1p(
        factor * (1.0 - inp.alpha) * c1 ** 2 * inp.m
        / (inp.noise_var * inp.alpha * inp.n * inp.k2)))


def rate_bound_singleton(inp: RateBoundInputs) -> float:
    """Per-subcarrier achievable-rate lower bound for singleton slots.

    May be negative; negativity is informative and not clamped.  alpha=0
    makes the penalty diverge and the bound is -inf.
    """
    pen = _penalty(inp, 1.0)
    if np.isinf(pen):
        return -np.inf
    return float(inp.e_log * inp.pbar_md - pen)


def rate_bound_collision(inp: RateBoundInputs) -> float:
    """Collision-slot variant: the penalty grows with (|C|+1)."""
    pen = _penalty(inp, inp.n_colliders + 1.0)
    if np.isinf(pen):
        return -np.inf
    return float(inp.e_log * inp.pbar_md - pen)


def expected_log_term(cfg: SystemConfig, xi: float, trials: int,
                      seed: int | None = None, pbar_md: float = 1.0,
                      min_accept: float = 1e-3) -> float:
    """Monte Carlo E[log(1 + (1-alpha)*g/sigma^2)] over per-subcarrier
    channel gains g = n*|h_hat_f|^2, conditioned on channel energy > xi,
    times pbar_md.
    """
    if trials < 1:
        raise AnalysisError("trials must be >= 1")
    seed = cfg.master_seed if seed is None else seed
    accepted = 0
    total = 0.0
    scale = (1.0 - cfg.alpha) / cfg.noise_var
    for trial in range(trials):
        ch = gen_channels(cfg, [0], stream_rng(seed, "elog", trial).integers(2**63))[0]
        energy = float(np.sum(np.abs(ch.gains) ** 2))
        if energy <= xi:
            continue
        accepted += 1
        taps = np.zeros(cfg.n, dtype=complex)
        taps[ch.delays] = ch.gains
        g = np.abs(np.fft.fft(taps)) ** 2   # n * |h_hat_f|^2, mean ||h||^2
        total += float(np.mean(np.log1p(scale * g)))
    if accepted < max(1, min_accept * trials):
        raise AnalysisError("conditioning event too rare "
                            f"(acceptance {accepted}/{trials})")
    return pbar_md * total / accepted


def rayleigh_bpsk_ser(snr_mean: float) -> float:
    """Closed-form average BPSK symbol-error rate in flat Rayleigh fading."""
    if snr_mean < 0:
        raise AnalysisError("mean SNR must be >= 0")
    if np.isinf(snr_mean):
        return 0.0
    return float(0.5 * (1.0 - np.sqrt(snr_mean / (1.0 + snr_mean))))
