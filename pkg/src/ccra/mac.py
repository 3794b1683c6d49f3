"""Coded-slotted-ALOHA frame simulator over frequency slots.

A frame is a bipartite graph between users (replica patterns addressed by
their preambles) and frequency slots.  Decoding runs in rounds: every slot
whose cancellation state changed offers its remaining users a capture
attempt; a success cancels all of that user's replicas, which can turn
other slots decodable.  The loop stops at a fixpoint.

Two modes share the loop: ``abstract`` replaces the physical layer with a
capture-probability model (default: only singleton slots decode), while
``full-phy`` synthesizes the waveform, runs the compressed-sensing control
receiver, and performs per-slot equalization plus re-synthesis
cancellation with residual bookkeeping.
"""

from __future__ import annotations

import json
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import phy, recovery
from .config import SystemConfig, data_slot_subcarriers, stream_rng
from .signal import (BITS_PER_SYMBOL, PreambleSet, data_amplitude, fft_u,
                     gen_channels, gen_patterns, gen_payload,
                     gen_preamble_set, modulate, synthesize_rx)
from .stats import wilson_interval

MAX_SIC_ROUNDS = 100

CAUSE_PREAMBLE_COLLISION = "preamble-collision"
CAUSE_UNDETECTED = "undetected"
CAUSE_UNDECODABLE = "undecodable"


@dataclass
class UserNode:
    user: int                   # device id
    preamble: int
    slots: tuple
    collided: bool = False


@dataclass
class SlotGraph:
    users: list
    n_slots: int
    slot_members: list          # per slot: list of indices into users

    def degrees(self) -> np.ndarray:
        return np.array([len(m) for m in self.slot_members])


@dataclass
class FrameResult:
    n_active: int
    n_slots: int
    records: list               # per user: dict(user, preamble, decoded, iteration, cause)
    iterations: int
    throughput: float
    n_decoded: int
    detected: set = field(default_factory=set)
    true_active_preambles: set = field(default_factory=set)
    ser_errors: int = 0
    ser_symbols: int = 0
    solver_iterations: int = 0

    def causes(self) -> Counter:
        return Counter(r["cause"] for r in self.records if not r["decoded"])

    def to_json(self) -> str:
        return json.dumps({
            "n_active": self.n_active,
            "n_slots": self.n_slots,
            "n_decoded": self.n_decoded,
            "iterations": self.iterations,
            "throughput": self.throughput,
            "records": self.records,
            "ser_errors": self.ser_errors,
            "ser_symbols": self.ser_symbols,
        })


@dataclass
class FrameOptions:
    solver: str = "hicosamp"
    solver_opts: recovery.SolverOptions | None = None
    xi: float | None = None              # activity threshold (full-phy)
    epsilon: float | None = None         # BPDN residual level
    capture: str = "genie"               # "genie" | "sinr"
    residual_accounting: str = "genie"   # "genie" | "proxy"
    delta2k: float = 0.2                 # feeds the proxy error model
    distinct_preambles: bool = False
    placement: str = "pattern"           # "pattern" | "dedicated"
    dedicated_chunk: int | None = None   # slots per user; None = B // k2
    capture_table: object = None         # abstract mode capture model
    score_raw: bool = False              # score detected users by raw demod
    score_lost_as_guess: bool = True


def build_graph(n_slots: int, preamble_choices: dict, patterns) -> SlotGraph:
    """Bipartite graph from device -> preamble choices and the pattern map.

    Devices that picked the same preamble are flagged preamble-collided.
    """
    counts = Counter(preamble_choices.values())
    users = []
    slot_members = [[] for _ in range(n_slots)]
    for i, (dev, pre) in enumerate(sorted(preamble_choices.items())):
        node = UserNode(user=dev, preamble=pre, slots=tuple(patterns[pre]),
                        collided=counts[pre] > 1)
        users.append(node)
        for s in node.slots:
            slot_members[s].append(i)
    return SlotGraph(users=users, n_slots=n_slots, slot_members=slot_members)


def run_sic(graph: SlotGraph, attempt_fn, cancel_cb=None,
            eligible=None, max_rounds: int = MAX_SIC_ROUNDS):
    """Iterative cancellation until no slot yields a new user.

    ``attempt_fn(slot, user_index, t_cancelled, j_initial)`` decides
    decodability; ``cancel_cb(slot, user_index)`` runs once per cancelled
    replica.  ``eligible`` restricts which user indices may ever decode.
    Returns ({user_index: round}, rounds_run, remaining user sets per slot).
    """
    remaining = [set(m) for m in graph.slot_members]
    j_init = [len(m) for m in graph.slot_members]
    t_canc = [0] * graph.n_slots
    last_attempt = {}
    decoded = {}
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        progress = False
        for s in range(graph.n_slots):
            if not remaining[s]:
                continue
            for ui in sorted(remaining[s]):
                if eligible is not None and ui not in eligible:
                    continue
                key = (s, ui)
                if last_attempt.get(key) == t_canc[s]:
                    continue
                last_attempt[key] = t_canc[s]
                if not attempt_fn(s, ui, t_canc[s], j_init[s]):
                    continue
                assert ui not in decoded, "SIC decoded the same user twice"
                decoded[ui] = rounds
                progress = True
                for s2 in graph.users[ui].slots:
                    if ui in remaining[s2]:
                        remaining[s2].discard(ui)
                        t_canc[s2] += 1
                        if cancel_cb is not None:
                            cancel_cb(s2, ui)
        if not progress:
            break
    return decoded, rounds, remaining


def singleton_attempt(slot, ui, t, j):
    """Ideal-IC baseline: only singleton (or reduced-to-singleton) slots
    decode, with probability 1."""
    return t == j - 1


def table_attempt_factory(table, rng: np.random.Generator):
    """Capture attempts drawn from a pi[t, j] probability table."""
    def attempt(slot, ui, t, j):
        p = table.prob(t, j)
        if p >= 1.0:
            return True
        if p <= 0.0:
            return False
        return bool(rng.random() < p)
    return attempt


def draw_load_patterns(n_slots: int, degree_dist, n_users: int,
                       rng: np.random.Generator) -> list:
    """iid replica patterns for a load-driven frame: degree from the node
    distribution, slots uniform without replacement."""
    degrees = np.array([d for d, _ in degree_dist])
    probs = np.array([p for _, p in degree_dist])
    ds = rng.choice(degrees, size=n_users, p=probs)
    return [tuple(int(s) for s in np.sort(rng.choice(n_slots, size=int(d), replace=False)))
            for d in ds]


def run_abstract_load_frame(n_slots: int, degree_dist, n_users: int, seed: int,
                            capture_table=None, trial: int = 0) -> FrameResult:
    """Load-driven abstract frame: n_users with iid patterns, no preamble
    space (every user individually addressable, detection ideal)."""
    rng = stream_rng(seed, "loadframe", trial)
    patterns = draw_load_patterns(n_slots, degree_dist, n_users, rng)
    choices = {i: i for i in range(n_users)}
    graph = build_graph(n_slots, choices, patterns)
    if capture_table is None:
        attempt = singleton_attempt
    else:
        attempt = table_attempt_factory(capture_table, stream_rng(seed, "capture", trial))
    decoded, rounds, _ = run_sic(graph, attempt)
    records = [{"user": i, "preamble": i, "decoded": i in decoded,
                "iteration": decoded.get(i), "cause": None if i in decoded else CAUSE_UNDECODABLE}
               for i in range(n_users)]
    return FrameResult(n_active=n_users, n_slots=n_slots, records=records,
                       iterations=rounds, n_decoded=len(decoded),
                       throughput=len(decoded) / n_slots)


def _choose_preambles(cfg: SystemConfig, seed: int, distinct: bool) -> dict:
    rng = stream_rng(seed, "active")
    if distinct:
        pres = np.sort(rng.choice(cfg.U, size=cfg.k2, replace=False))
    else:
        pres = rng.integers(0, cfg.U, size=cfg.k2)
    return {dev: int(p) for dev, p in enumerate(pres)}


def _dedicated_slots(n_slots: int, k2: int, ordered_preambles,
                     chunk: int | None = None) -> dict:
    """Reserved-resource placement: disjoint contiguous slot chunks, one
    per preamble in sorted order (mimics the one-shot scheme where a data
    region is reserved for users detected on the control band)."""
    if chunk is None:
        chunk = max(1, n_slots // k2)
    capacity = n_slots // chunk
    out = {}
    for i, p in enumerate(sorted(ordered_preambles)[:capacity]):
        out[p] = tuple(range(i * chunk, (i + 1) * chunk))
    return out


def run_frame(cfg: SystemConfig, mode: str, seed: int | None = None,
              preambles: PreambleSet | None = None,
              options: FrameOptions | None = None) -> FrameResult:
    """Simulate one frame; deterministic given (cfg, seed).

    mode "abstract": preamble choice + pattern graph, detection assumed for
    non-collided users, capture per the table model.  mode "full-phy":
    waveform synthesis, CS control receiver, threshold detection, and the
    equalize / cancel SIC loop.
    """
    seed = cfg.master_seed if seed is None else seed
    options = options or FrameOptions()
    if mode == "abstract":
        return _run_abstract_frame(cfg, seed, options, preambles)
    if mode == "full-phy":
        return _run_fullphy_frame(cfg, seed, options, preambles)
    raise ValueError(f"unknown frame mode {mode!r}")


def _run_abstract_frame(cfg, seed, options, preambles):
    choice = _choose_preambles(cfg, seed, options.distinct_preambles)
    patterns = preambles.patterns if preambles is not None else gen_patterns(cfg)
    graph = build_graph(cfg.num_data_slots, choice, patterns)
    eligible = {i for i, nd in enumerate(graph.users) if not nd.collided}
    if options.capture_table is None:
        attempt = singleton_attempt
    else:
        attempt = table_attempt_factory(options.capture_table,
                                        stream_rng(seed, "capture"))
    decoded, rounds, _ = run_sic(graph, attempt, eligible=eligible)
    records = []
    for i, nd in enumerate(graph.users):
        ok = i in decoded
        cause = None if ok else (
            CAUSE_PREAMBLE_COLLISION if nd.collided else CAUSE_UNDECODABLE)
        records.append({"user": nd.user, "preamble": nd.preamble, "decoded": ok,
                        "iteration": decoded.get(i), "cause": cause})
    return FrameResult(n_active=cfg.k2, n_slots=cfg.num_data_slots,
                       records=records, iterations=rounds,
                       n_decoded=len(decoded),
                       throughput=len(decoded) / cfg.num_data_slots,
                       true_active_preambles=set(choice.values()),
                       detected={nd.preamble for nd in graph.users if not nd.collided})


def _run_fullphy_frame(cfg, seed, options, preambles):
    preambles = preambles if preambles is not None else gen_preamble_set(cfg)
    choice = _choose_preambles(cfg, seed, options.distinct_preambles)
    devices = sorted(choice)
    channels = gen_channels(cfg, devices, seed)
    chan_by_dev = {ch.user_id: ch for ch in channels}

    if options.placement == "dedicated":
        tx_slots = _dedicated_slots(cfg.num_data_slots, cfg.k2,
                                    set(choice.values()),
                                    options.dedicated_chunk)
        slot_lists = [tx_slots.get(choice[d], ()) for d in devices]
    else:
        slot_lists = [preambles.patterns[choice[d]] for d in devices]
    payload = gen_payload(cfg, devices, slot_lists, seed)

    y = synthesize_rx(cfg, preambles, channels, payload, seed,
                      preamble_choice=choice)
    y_hat = fft_u(y)

    # control-channel detection
    A = recovery.MeasurementOperator(preambles, cfg.s_d)
    y_b = y_hat[np.asarray(cfg.control_band, dtype=int)]
    sopts = options.solver_opts or recovery.SolverOptions()
    if options.solver == "bpdn":
        eps = options.epsilon if options.epsilon is not None else recovery.default_epsilon(cfg)
        sol = recovery.bpdn_solve(A, y_b, eps, sopts)
    else:
        sol = recovery.hicosamp_solve(A, y_b, cfg.k2, cfg.k1, sopts)
    xi = options.xi if options.xi is not None else 0.0
    det = recovery.detect_activity(sol.h, xi, cfg.U, cfg.s_d)
    detected = sorted(det.detected)
    est_block = {p: sol.h.reshape(cfg.U, cfg.s_d)[p] for p in detected}

    # receiver's slot map for detected preambles
    if options.placement == "dedicated":
        rx_slots = _dedicated_slots(cfg.num_data_slots, cfg.k2, detected,
                                    options.dedicated_chunk)
    else:
        rx_slots = {p: preambles.patterns[p] for p in detected}

    slots_sc = data_slot_subcarriers(cfg)
    width = len(slots_sc[0])
    obs = [phy.SlotObservation(slot_index=b, subcarriers=slots_sc[b],
                               y=y_hat[slots_sc[b]].copy())
           for b in range(cfg.num_data_slots)]

    # receiver graph over detected preambles
    collided_pre = {p for p, c in Counter(choice.values()).items() if c > 1}
    devs_of_pre = {}
    for d in devices:
        devs_of_pre.setdefault(choice[d], []).append(d)
    rx_choice = {p: p for p in detected if rx_slots.get(p)}
    graph = build_graph(cfg.num_data_slots, rx_choice,
                        {p: rx_slots[p] for p in rx_choice})
    eligible = {i for i, nd in enumerate(graph.users)
                if nd.preamble not in collided_pre}

    gamma_cap = 10.0 ** (cfg.gamma_cap_db / 10.0)
    if options.residual_accounting == "proxy":
        eps_acc = options.epsilon if options.epsilon is not None else recovery.default_epsilon(cfg)
        from .analysis import c1_of_delta
        dhat_sq = phy.proxy_est_error_sq(cfg, eps_acc, c1_of_delta(options.delta2k))
    decoded_bits = {}
    chanf_cache = {}

    def chan_f(p, b):
        if (p, b) not in chanf_cache:
            chanf_cache[(p, b)] = phy.freq_response(est_block[p],
                                                    slots_sc[b], cfg.n)
        return chanf_cache[(p, b)]

    def amp_of(p):
        return data_amplitude(cfg, len(rx_slots[p]) * width)

    remaining_view = {}  # slot -> set of user indices, kept by callbacks

    def attempt(s, ui, t, j):
        p = graph.users[ui].preamble
        cf = chan_f(p, s)
        amp = amp_of(p)
        if options.capture == "genie":
            devs = devs_of_pre.get(p, [])
            if not devs:
                return False          # false alarm: nothing real to decode
            eq = phy.equalize_demod(obs[s], cf, cfg.modulation, amp, cfg.n)
            if eq.undecodable:
                return False
            ok = all(np.array_equal(eq.bits, payload.bits[devices.index(d)])
                     for d in devs)
            if ok:
                decoded_bits[p] = eq.bits
            return ok
        colliders = [(chan_f(graph.users[vj].preamble, s),
                      amp_of(graph.users[vj].preamble))
                     for vj in remaining_view.get(s, set()) if vj != ui]
        ok = phy.capture_decide(obs[s], cf, amp, cfg.n, "sinr",
                                noise_var=cfg.noise_var, gamma_cap=gamma_cap,
                                colliders=colliders)
        if ok:
            eq = phy.equalize_demod(obs[s], cf, cfg.modulation, amp, cfg.n)
            decoded_bits[p] = eq.bits
        return ok

    cancelled_contrib = {}   # (slot, preamble) -> subtracted replica vector

    def cancel(s, ui):
        p = graph.users[ui].preamble
        cf = chan_f(p, s)
        amp = amp_of(p)
        syms = modulate(decoded_bits[p], cfg.modulation)
        cancelled_contrib[(s, p)] = np.sqrt(cfg.n) * cf * amp * syms
        if options.residual_accounting == "genie":
            true_cf = np.zeros_like(cf)
            for d in devs_of_pre.get(p, []):
                ch = chan_by_dev[d]
                taps = np.zeros(cfg.s_d, dtype=complex)
                taps[ch.delays] = ch.gains
                true_cf = true_cf + phy.freq_response(taps, slots_sc[s], cfg.n)
            residue = phy.genie_residue_power(cf - true_cf, amp, cfg.n)
        else:
            residue = cfg.n * dhat_sq * amp ** 2
        phy.cancel_replica(obs[s], cf, syms, amp, cfg.n,
                           user_slots=graph.users[ui].slots,
                           residue_power=residue)
        remaining_view.get(s, set()).discard(ui)

    for s, members in enumerate(graph.slot_members):
        remaining_view[s] = set(members)

    decoded, rounds, remaining = run_sic(graph, attempt, cancel_cb=cancel,
                                         eligible=eligible)
    decoded_pre = {graph.users[ui].preamble: it for ui, it in decoded.items()}
    node_of_pre = {nd.preamble: i for i, nd in enumerate(graph.users)}

    def raw_receive(p):
        """Demodulate a detected preamble from its cleanest slot at the
        SIC fixpoint (fewest live interferers, then least residual); the
        user's own cancelled replica, if any, is added back first."""
        ui = node_of_pre[p]
        best = min(graph.users[ui].slots,
                   key=lambda s: (len(remaining[s] - {ui}),
                                  float(np.sum(obs[s].residual_power)), s))
        view = phy.SlotObservation(best, obs[best].subcarriers,
                                   obs[best].y, obs[best].residual_power)
        own = cancelled_contrib.get((best, p))
        if own is not None:
            view.y = view.y + own
        eq = phy.equalize_demod(view, chan_f(p, best), cfg.modulation,
                                amp_of(p), cfg.n)
        return None if eq.undecodable else eq.bits

    # per-device outcomes and raw-demodulation SER accounting: decoded
    # users score their recovered bits, detected-but-undecoded users their
    # best-slot hard bits, everything else a fair-coin guess
    bps = BITS_PER_SYMBOL[cfg.modulation]
    records = []
    err = tot = 0
    for i, d in enumerate(devices):
        p = choice[d]
        rx = None
        if p in collided_pre:
            ok, cause, itn = False, CAUSE_PREAMBLE_COLLISION, None
        elif p not in det.detected:
            ok, cause, itn = False, CAUSE_UNDETECTED, None
        elif p in decoded_pre:
            ok, cause, itn = True, None, decoded_pre[p]
            rx = raw_receive(p) if options.score_raw else decoded_bits[p]
        else:
            ok, cause, itn = False, CAUSE_UNDECODABLE, None
            if p in node_of_pre:
                rx = raw_receive(p)
        tx = payload.bits[i]
        if rx is None:
            if not options.score_lost_as_guess:
                records.append({"user": d, "preamble": p, "decoded": ok,
                                "iteration": itn, "cause": cause})
                continue
            rx = stream_rng(seed, "guess", d).integers(0, 2, size=len(tx))
        diff = (np.asarray(tx) != np.asarray(rx)).reshape(-1, bps).any(axis=1)
        err += int(diff.sum())
        tot += len(diff)
        records.append({"user": d, "preamble": p, "decoded": ok,
                        "iteration": itn, "cause": cause})
    n_dec = sum(1 for r in records if r["decoded"])
    return FrameResult(n_active=cfg.k2, n_slots=cfg.num_data_slots,
                       records=records, iterations=rounds, n_decoded=n_dec,
                       throughput=n_dec / cfg.num_data_slots,
                       detected=set(detected),
                       true_active_preambles=set(choice.values()),
                       ser_errors=err, ser_symbols=tot,
                       solver_iterations=sol.iterations)


@dataclass
class ThroughputStats:
    T: float
    P_loss: float
    ci: tuple
    frames: int
    causes: Counter


def throughput(results) -> ThroughputStats:
    """Aggregate decoded-per-slot and packet loss over frames."""
    results = list(results)
    if not results:
        raise ValueError("need at least one frame result")
    total_active = sum(r.n_active for r in results)
    total_decoded = sum(r.n_decoded for r in results)
    T = float(np.mean([r.n_decoded / r.n_slots for r in results]))
    lost = total_active - total_decoded
    if total_active == 0:
        p_loss, lo, hi = 0.0, 0.0, 0.0
    else:
        p_loss, lo, hi = wilson_interval(lost, total_active)
    causes = Counter()
    for r in results:
        causes.update(r.causes())
    return ThroughputStats(T=T, P_loss=p_loss, ci=(lo, hi),
                           frames=len(results), causes=causes)


def write_jsonl(results, path) -> None:
    """Per-trial frame results as JSON lines."""
    with open(path, "w") as f:
        for r in results:
            f.write(r.to_json() + "\n")
