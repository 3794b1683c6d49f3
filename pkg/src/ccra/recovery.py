"""Compressed-sensing control-channel receiver.

The measurement operator maps the stacked per-user delay-domain channel
vector (length U*s_d) to the control-band observation (length m).  Its
entries are the control-band restriction of each preamble's circulant
columns, evaluated matrix-free.  Two solvers share it: BPDN via monotone
proximal gradient with the penalty weight driven along a continuation /
bisection path until the residual constraint is met, and a CoSaMP variant
whose support steps use hierarchical (k2 user blocks, k1 taps each)
thresholding instead of flat top-k selection.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .config import SystemConfig, stream_rng
from .signal import PreambleSet, fft_u, gen_channels, gen_preamble_set
from .stats import wilson_interval


class SolverError(RuntimeError):
    pass


@dataclass
class SolverOptions:
    max_iter: int = 400          # proximal iterations per continuation stage
    max_stages: int = 40         # continuation / bisection stages (BPDN)
    inner_tol: float = 1e-8     # relative iterate-change stop (BPDN stage)
    tol_feas: float = 0.1        # acceptance band around epsilon
    cosamp_max_iter: int = 40
    cosamp_tol: float = 1e-10    # stop when ||r|| < tol * ||y||
    cosamp_stall: float = 1e-7   # stop when ||r|| improves less than this * ||y||
    cg_tol: float = 1e-8         # relative residual for the LS subproblem
    cg_max_iter: int = 200


@dataclass
class SolveResult:
    h: np.ndarray
    iterations: int
    residual: float
    residuals: list = field(default_factory=list)
    converged: bool = True
    lam: float | None = None
    method: str = ""


@dataclass
class ActivityEstimate:
    h_hat: np.ndarray           # stacked estimate, length U*s_d
    user_norms: np.ndarray      # squared block norms, length U
    detected: set               # user indices with norm^2 > threshold
    threshold: float


class MeasurementOperator:
    """Control-band measurement of the stacked sparse channel vector.

    Forward entry for band subcarrier f:
        (A h)_f = sum_u p_hat[u,f] * sum_l h[u,l] * exp(-2i*pi*f*l/n)
    which equals the control-band restriction of the received preamble
    superposition sqrt(n) * h_hat_u * p_hat_u.  Forward and adjoint are
    evaluated with a precomputed (m, s_d) Fourier block, restricted to the
    touched user blocks where possible.
    """

    def __init__(self, preambles: PreambleSet, s_d: int):
        self.band = np.asarray(preambles.band, dtype=int)
        self.n = preambles.n
        self.s_d = s_d
        self.P = preambles.band_values          # (U, m)
        self.U = self.P.shape[0]
        self.m = self.P.shape[1]
        # E[f, l] = exp(-2i*pi*band[f]*l/n)
        expo = -2j * np.pi * np.outer(self.band, np.arange(s_d)) / self.n
        self.E = np.exp(expo)                    # (m, s_d)
        self._opnorm = None

    @property
    def shape(self):
        return (self.m, self.U * self.s_d)

    def forward(self, h: np.ndarray) -> np.ndarray:
        hb = np.asarray(h).reshape(self.U, self.s_d)
        return np.einsum("um,um->m", self.P, hb @ self.E.T)

    def adjoint(self, r: np.ndarray) -> np.ndarray:
        return ((np.conj(self.P) * r[None, :]) @ np.conj(self.E)).reshape(-1)

    def forward_blocks(self, hb: np.ndarray, blocks: np.ndarray) -> np.ndarray:
        """Forward action when only the given user blocks are nonzero."""
        return np.einsum("um,um->m", self.P[blocks], hb @ self.E.T)

    def adjoint_blocks(self, r: np.ndarray, blocks: np.ndarray) -> np.ndarray:
        return (np.conj(self.P[blocks]) * r[None, :]) @ np.conj(self.E)

    def opnorm(self, iters: int = 30) -> float:
        """Largest singular value, estimated by seeded power iteration."""
        if self._opnorm is None:
            rng = np.random.default_rng(0xA17)
            v = rng.standard_normal(self.U * self.s_d) \
                + 1j * rng.standard_normal(self.U * self.s_d)
            s = 1.0
            for _ in range(iters):
                w = self.adjoint(self.forward(v))
                s = np.linalg.norm(w)
                v = w / s
            self._opnorm = float(np.sqrt(s))
        return self._opnorm


def measure_control(y: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    """Unitary FFT then control-band row selection; nothing else."""
    if len(y) != cfg.n:
        raise ValueError("signal length does not match config n")
    return fft_u(y)[np.asarray(cfg.control_band, dtype=int)]


def default_epsilon(cfg: SystemConfig, slack: float = 0.1) -> float:
    """Expected noise norm on the control band plus slack."""
    return float(np.sqrt(cfg.noise_var) * np.sqrt(cfg.m) * (1.0 + slack))


def _soft_threshold(z: np.ndarray, t: float) -> np.ndarray:
    mag = np.abs(z)
    scale = np.maximum(1.0 - t / np.maximum(mag, 1e-300), 0.0)
    return z * scale


def bpdn_solve(A: MeasurementOperator, y: np.ndarray, epsilon: float,
               opts: SolverOptions | None = None) -> SolveResult:
    """l1 minimization subject to ||A h - y|| <= epsilon.

    Runs monotone accelerated proximal-gradient on the penalized form
    0.5*||Ah-y||^2 + lam*||h||_1, lowering lam along a continuation path
    (with bisection refinement) until the iterate satisfies
    | ||Ah-y|| - eps | <= tol_feas*eps or ||Ah-y|| < eps.
    """
    opts = opts or SolverOptions()
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    ynorm = float(np.linalg.norm(y))
    dim = A.shape[1]
    if ynorm <= epsilon or ynorm == 0.0:
        return SolveResult(h=np.zeros(dim, dtype=complex), iterations=0,
                           residual=ynorm, residuals=[ynorm], lam=None,
                           method="bpdn")

    L = A.opnorm() ** 2 * 1.01
    step = 1.0 / L
    lam_max = float(np.max(np.abs(A.adjoint(y))))
    lam = 0.9 * lam_max
    lam_infeas = lam_max          # residual known to exceed target here
    lam_feas = None

    x = np.zeros(dim, dtype=complex)
    Ax = np.zeros_like(y)
    total_iters = 0
    residuals: list[float] = []
    resid = ynorm
    accept_hi = epsilon * (1.0 + opts.tol_feas)
    best = None

    for _ in range(opts.max_stages):
        x, Ax, n_it, traj, _ = _fista_stage(A, y, lam, step, x, Ax, opts)
        total_iters += n_it
        residuals.extend(traj)
        resid = float(np.linalg.norm(Ax - y))
        if resid <= accept_hi:
            lam_feas = lam
            if best is None or lam > best[2]:
                best = (x.copy(), resid, lam)
            if resid >= epsilon * (1.0 - opts.tol_feas) or resid < epsilon:
                break
        else:
            lam_infeas = lam
        if lam_feas is None:
            # continuation: jump toward the residual target (r roughly ~ lam)
            factor = np.clip(0.8 * epsilon / resid, 0.02, 0.7)
            lam *= factor
        else:
            lam = 0.5 * (lam_feas + lam_infeas)
    else:
        if best is None:
            return SolveResult(h=x, iterations=total_iters, residual=resid,
                               residuals=residuals, converged=False, lam=lam,
                               method="bpdn")

    if best is not None and best[2] != lam:
        x, resid, lam = best[0], best[1], best[2]
    return SolveResult(h=x, iterations=total_iters, residual=resid,
                       residuals=residuals, converged=True, lam=lam,
                       method="bpdn")


def _fista_stage(A, y, lam, step, x0, Ax0, opts: SolverOptions):
    """Accelerated proximal gradient with a monotone safeguard.

    The penalized objective is non-increasing across iterations: a
    candidate that would raise it is replaced by the plain proximal step
    from the current iterate (guaranteed descent for step <= 1/L).
    """
    x, Ax = x0, Ax0
    x_prev, Ax_prev = x, Ax
    t = 1.0
    obj = 0.5 * np.linalg.norm(Ax - y) ** 2 + lam * np.sum(np.abs(x))
    traj = []
    obj_traj = [float(obj)]
    k = 0
    for k in range(1, opts.max_iter + 1):
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / t_next
        Az = Ax + beta * (Ax - Ax_prev)
        z = x + beta * (x - x_prev)
        cand = _soft_threshold(z - step * A.adjoint(Az - y), step * lam)
        Acand = A.forward(cand)
        obj_cand = 0.5 * np.linalg.norm(Acand - y) ** 2 + lam * np.sum(np.abs(cand))
        if obj_cand <= obj:
            x_prev, Ax_prev = x, Ax
            x, Ax, obj = cand, Acand, obj_cand
            t = t_next
        else:
            cand = _soft_threshold(x - step * A.adjoint(Ax - y), step * lam)
            Acand = A.forward(cand)
            obj_cand = 0.5 * np.linalg.norm(Acand - y) ** 2 + lam * np.sum(np.abs(cand))
            x_prev, Ax_prev = x, Ax
            x, Ax = cand, Acand
            obj = min(obj, obj_cand)
            t = 1.0
        traj.append(float(np.linalg.norm(Ax - y)))
        obj_traj.append(float(obj))
        dx = np.linalg.norm(x - x_prev)
        if dx <= opts.inner_tol * max(np.linalg.norm(x), 1e-30):
            break
    return x, Ax, k, traj, obj_traj


def hier_support(g: np.ndarray, U: int, s_d: int, k2: int, k1: int) -> np.ndarray:
    """Boolean (U, s_d) mask of the hierarchical (k2, k1) support of g:
    the k2 blocks with the largest energy of their top-k1 entries, keeping
    the top-k1 entries within each.
    """
    mag = np.abs(g).reshape(U, s_d) ** 2
    k1 = min(k1, s_d)
    if k1 < s_d:
        top_idx = np.argpartition(mag, s_d - k1, axis=1)[:, s_d - k1:]
    else:
        top_idx = np.tile(np.arange(s_d), (U, 1))
    rows = np.arange(U)[:, None]
    scores = mag[rows, top_idx].sum(axis=1)
    k2 = min(k2, U)
    best = np.argpartition(scores, U - k2)[U - k2:] if k2 < U else np.arange(U)
    mask = np.zeros((U, s_d), dtype=bool)
    for u in best:
        if scores[u] > 0:
            mask[u, top_idx[u]] = True
    return mask


def hier_project(g: np.ndarray, U: int, s_d: int, k2: int, k1: int) -> np.ndarray:
    out = np.zeros_like(g).reshape(U, s_d)
    gb = np.asarray(g).reshape(U, s_d)
    mask = hier_support(g, U, s_d, k2, k1)
    out[mask] = gb[mask]
    return out.reshape(-1)


def _flat_support(g: np.ndarray, k: int) -> np.ndarray:
    mag = np.abs(g)
    if k >= len(g):
        return np.ones(len(g), dtype=bool)
    idx = np.argpartition(mag, len(g) - k)[len(g) - k:]
    mask = np.zeros(len(g), dtype=bool)
    mask[idx[mag[idx] > 0]] = True
    return mask


def _cg_lsq(A: MeasurementOperator, y: np.ndarray, mask: np.ndarray,
            opts: SolverOptions) -> np.ndarray:
    """Least squares on the masked support via CG on the normal equations,
    with forward/adjoint restricted to the touched user blocks."""
    U, s_d = A.U, A.s_d
    mb = mask.reshape(U, s_d)
    blocks = np.nonzero(mb.any(axis=1))[0]
    sub = mb[blocks]                       # (K, s_d) bool

    def normal_op(v):                      # v: (K, s_d) masked
        w = A.forward_blocks(np.where(sub, v, 0.0), blocks)
        g = A.adjoint_blocks(w, blocks)
        return np.where(sub, g, 0.0)

    b = np.where(sub, A.adjoint_blocks(y, blocks), 0.0)
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = np.vdot(r, r).real
    b0 = np.sqrt(np.vdot(b, b).real)
    if b0 == 0:
        full = np.zeros(U * s_d, dtype=complex)
        return full
    for _ in range(opts.cg_max_iter):
        Ap = normal_op(p)
        denom = np.vdot(p, Ap).real
        if denom <= 0:
            break
        a = rs / denom
        x = x + a * p
        r = r - a * Ap
        rs_new = np.vdot(r, r).real
        if np.sqrt(rs_new) <= opts.cg_tol * b0:
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    full = np.zeros((U, s_d), dtype=complex)
    full[blocks] = np.where(sub, x, 0.0)
    return full.reshape(-1)


def hicosamp_solve(A: MeasurementOperator, y: np.ndarray, k2: int, k1: int,
                   opts: SolverOptions | None = None,
                   structured: bool = True) -> SolveResult:
    """Greedy recovery with hierarchical support selection.

    CoSaMP skeleton: correlate the residual, merge the structured support
    of the proxy with the current one, least-squares on the merged support
    (CG on the normal equations, matrix-free), then prune back to the
    (k2, k1) structure.  ``structured=False`` falls back to flat top-k
    selection (classical CoSaMP with k = k1*k2) for head-to-head baselines.
    """
    opts = opts or SolverOptions()
    U, s_d = A.U, A.s_d
    if structured and k1 * k2 > A.m:
        raise ValueError("k1*k2 must not exceed the measurement count m")
    k_flat = k1 * k2
    x = np.zeros(U * s_d, dtype=complex)
    r = y.copy()
    ynorm = float(np.linalg.norm(y))
    if ynorm == 0:
        return SolveResult(h=x, iterations=0, residual=0.0, residuals=[0.0],
                           method="hicosamp" if structured else "cosamp")
    best_x, best_r = x, ynorm
    residuals = [ynorm]
    prev = np.inf
    it = 0
    for it in range(1, opts.cosamp_max_iter + 1):
        g = A.adjoint(r)
        if structured:
            omega = hier_support(g, U, s_d, k2, k1).reshape(-1)
        else:
            omega = _flat_support(g, 2 * k_flat)
        merged = omega | (x != 0)
        z = _cg_lsq(A, y, merged, opts)
        if structured:
            keep = hier_support(z, U, s_d, k2, k1).reshape(-1)
        else:
            keep = _flat_support(z, k_flat)
        # refit on the pruned support: correlated dictionary columns leave
        # large cancelling pairs in z that a bare prune would blow up
        x = _cg_lsq(A, y, keep, opts)
        blocks = np.nonzero(np.abs(x).reshape(U, s_d).any(axis=1))[0]
        r = y - A.forward_blocks(x.reshape(U, s_d)[blocks], blocks)
        rn = float(np.linalg.norm(r))
        residuals.append(rn)
        if rn < best_r:
            best_x, best_r = x.copy(), rn
        if rn <= opts.cosamp_tol * ynorm:
            break
        if abs(prev - rn) <= opts.cosamp_stall * ynorm:
            break
        prev = rn
    return SolveResult(h=best_x, iterations=it, residual=best_r,
                       residuals=residuals,
                       converged=best_r <= max(opts.cosamp_tol * ynorm, prev),
                       method="hicosamp" if structured else "cosamp")


def block_energies(h: np.ndarray, U: int, s_d: int) -> np.ndarray:
    return (np.abs(h).reshape(U, s_d) ** 2).sum(axis=1)


def detect_activity(h: np.ndarray, xi: float, U: int, s_d: int) -> ActivityEstimate:
    """Threshold the per-user block energies of the stacked estimate."""
    if xi < 0:
        raise ValueError("xi must be >= 0")
    norms = block_energies(h, U, s_d)
    detected = set(int(u) for u in np.nonzero(norms > xi)[0])
    return ActivityEstimate(h_hat=h, user_norms=norms, detected=detected,
                            threshold=xi)


def _detection_trial(cfg: SystemConfig, preambles: PreambleSet,
                     A: MeasurementOperator, trial: int, seed: int,
                     solver: str, opts: SolverOptions):
    """One control-channel trial: plant k2 users, recover, return the
    (active set, per-user block energies, solver iterations)."""
    rng = stream_rng(seed, "trial", trial, "active")
    active = np.sort(rng.choice(cfg.U, size=cfg.k2, replace=False))
    channels = gen_channels(cfg, active, stream_rng(seed, "trial", trial, "chan").integers(2**63))
    h_true = np.zeros((cfg.U, cfg.s_d), dtype=complex)
    for ch in channels:
        h_true[ch.user_id, ch.delays] = ch.gains
    y_b = A.forward(h_true.reshape(-1))
    if cfg.noise_var > 0:
        nr = stream_rng(seed, "trial", trial, "noise")
        y_b = y_b + np.sqrt(cfg.noise_var / 2.0) * (
            nr.standard_normal(cfg.m) + 1j * nr.standard_normal(cfg.m))
    if solver == "bpdn":
        res = bpdn_solve(A, y_b, default_epsilon(cfg), opts)
    else:
        res = hicosamp_solve(A, y_b, cfg.k2, cfg.k1, opts)
    return set(int(u) for u in active), block_energies(res.h, cfg.U, cfg.s_d), res.iterations


def calibrate_threshold(cfg: SystemConfig, target_pfa: float, trials: int,
                        seed: int | None = None, solver: str = "hicosamp",
                        opts: SolverOptions | None = None,
                        preambles: PreambleSet | None = None) -> float:
    """Empirical activity threshold for a per-user false-alarm target.

    Pools the inactive-user block energies over noise-plus-interference
    trials and returns the order statistic whose exceedance rate is at
    most ``target_pfa``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    n_samples = trials * (cfg.U - cfg.k2)
    if target_pfa < 1.0 / max(n_samples, 1):
        raise ValueError(
            f"target_pfa={target_pfa} below the resolution 1/{n_samples}")
    seed = cfg.master_seed if seed is None else seed
    opts = opts or SolverOptions()
    preambles = preambles or gen_preamble_set(cfg)
    A = MeasurementOperator(preambles, cfg.s_d)
    pooled = []
    for t in range(trials):
        active, energies, _ = _detection_trial(cfg, preambles, A, t, seed, solver, opts)
        inactive = np.setdiff1d(np.arange(cfg.U), sorted(active))
        pooled.append(energies[inactive])
    pooled = np.sort(np.concatenate(pooled))[::-1]
    allowed = int(np.floor(target_pfa * len(pooled)))
    return float(pooled[allowed])


@dataclass
class DetectionRates:
    pmd: float
    pmd_ci: tuple
    pfa: float
    pfa_ci: tuple
    trials: int


def estimate_pmd_pfa(cfg: SystemConfig, xi: float, trials: int,
                     seed: int | None = None, solver: str = "hicosamp",
                     opts: SolverOptions | None = None,
                     preambles: PreambleSet | None = None) -> DetectionRates:
    """Monte Carlo missed-detection / false-alarm rates at threshold xi,
    with Wilson 95% intervals."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    seed = cfg.master_seed if seed is None else seed
    opts = opts or SolverOptions()
    preambles = preambles or gen_preamble_set(cfg)
    A = MeasurementOperator(preambles, cfg.s_d)
    md = fa = n_act = n_inact = 0
    for t in range(trials):
        active, energies, _ = _detection_trial(cfg, preambles, A, t, seed, solver, opts)
        detected = set(int(u) for u in np.nonzero(energies > xi)[0])
        md += len(active - detected)
        fa += len(detected - active)
        n_act += len(active)
        n_inact += cfg.U - len(active)
    pmd, pmd_lo, pmd_hi = wilson_interval(md, n_act)
    pfa, pfa_lo, pfa_hi = wilson_interval(fa, n_inact)
    return DetectionRates(pmd=pmd, pmd_ci=(pmd_lo, pmd_hi),
                          pfa=pfa, pfa_ci=(pfa_lo, pfa_hi), trials=trials)


def write_telemetry(result: SolveResult, path) -> None:
    """Solver telemetry CSV: one row per iteration with the residual."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "residual"])
        for i, r in enumerate(result.residuals):
            w.writerow([i, repr(float(r))])
