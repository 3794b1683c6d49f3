"""Experiment orchestration CLI.

Subcommands: ``phy-sweep`` (full-phy SER curves), ``mac-sim`` (frame
simulator sweeps), ``de`` (density-evolution curves and threshold
bisection), ``bounds`` (rate lower bounds) and ``calibrate`` (activity
threshold).  All tabular output is CSV with a header comment carrying the
resolved config hash and master seed, so identical invocations reproduce
byte-for-byte.  Per-trial seeds are derived from (master seed, point
index, trial index); the worker count never affects results.

Exit codes: 0 success, 1 invalid config, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import functools
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, mac, recovery
from .config import (ConfigError, SystemConfig, load_config, stream_rng,
                     with_params)
from .signal import dump_rx, gen_preamble_set
from .stats import wilson_interval

SWEEP_PARAMS = ("alpha", "active_users", "load_G", "snr_db")


class SweepError(ValueError):
    pass


def parse_sweep(text: str):
    """NAME=START:STEP:STOP or NAME=v1,v2,... -> (name, grid)."""
    if "=" not in text:
        raise SweepError("sweep must look like name=start:step:stop")
    name, spec = text.split("=", 1)
    name = name.strip()
    if name not in SWEEP_PARAMS:
        raise SweepError(f"unknown sweep parameter {name!r}; "
                         f"choose from {SWEEP_PARAMS}")
    if ":" in spec:
        parts = [float(p) for p in spec.split(":")]
        if len(parts) != 3 or parts[1] <= 0:
            raise SweepError("range sweep needs start:step:stop with step>0")
        start, step, stop = parts
        count = int(np.floor((stop - start) / step + 1e-9)) + 1
        grid = [start + i * step for i in range(count)]
    else:
        grid = [float(p) for p in spec.split(",")]
    if not grid:
        raise SweepError("empty sweep grid")
    return name, grid


def point_config(cfg: SystemConfig, name: str, value: float) -> SystemConfig:
    if name == "alpha":
        return with_params(cfg, alpha=float(value))
    if name == "active_users":
        return with_params(cfg, k2=int(round(value)))
    if name == "snr_db":
        return with_params(cfg, snr_db=float(value))
    if name == "load_G":
        return cfg                      # load handled by the frame runner
    raise SweepError(f"unknown parameter {name!r}")


def write_csv(path, cfg_hash: str, seed: int, header: list, rows: list) -> None:
    lines = [f"# config_hash={cfg_hash} master_seed={seed}"]
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    text = "\n".join(lines) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


@functools.lru_cache(maxsize=8)
def _cached_preambles(cfg: SystemConfig):
    return gen_preamble_set(cfg)


def _trial_seed(master_seed: int, point_idx: int, trial: int) -> int:
    return int(stream_rng(master_seed, "sweep", point_idx, trial).integers(2**63))


def _phy_trial(task):
    cfg, point_idx, trial, opt = task
    preambles = _cached_preambles(cfg)
    options = mac.FrameOptions(solver=opt["solver"], xi=opt["xi"],
                               capture=opt["capture"],
                               residual_accounting=opt["residual"],
                               distinct_preambles=True,
                               placement=opt["placement"],
                               dedicated_chunk=opt.get("chunk"),
                               score_raw=True)
    seed = _trial_seed(cfg.master_seed, point_idx, trial)
    res = mac.run_frame(cfg, "full-phy", seed, preambles, options)
    if opt.get("dump_dir"):
        path = Path(opt["dump_dir"]) / f"rx_point{point_idx}_trial{trial}.bin"
        _dump_trial(cfg, preambles, seed, path)
    md = len(res.true_active_preambles - res.detected)
    fa = len(res.detected - res.true_active_preambles)
    return {
        "errors": res.ser_errors, "symbols": res.ser_symbols,
        "md": md, "fa": fa,
        "n_act": len(res.true_active_preambles),
        "n_inact": cfg.U - len(res.true_active_preambles),
        "solver_iters": res.solver_iterations,
    }


def _dump_trial(cfg, preambles, seed, path):
    from .signal import gen_channels, gen_payload, synthesize_rx
    choice = mac._choose_preambles(cfg, seed, True)
    devices = sorted(choice)
    channels = gen_channels(cfg, devices, seed)
    slot_lists = [preambles.patterns[choice[d]] for d in devices]
    payload = gen_payload(cfg, devices, slot_lists, seed)
    y = synthesize_rx(cfg, preambles, channels, payload, seed, choice)
    h = np.zeros((cfg.U, cfg.s_d), dtype=complex)
    for ch in channels:
        h[choice[ch.user_id], ch.delays] += ch.gains
    dump_rx(path, y, h.reshape(-1))


def _run_tasks(tasks, worker, workers: int):
    if workers <= 1:
        return [worker(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, tasks, chunksize=1))


def cmd_phy_sweep(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = with_params(cfg, master_seed=args.seed)
    name, grid = parse_sweep(args.sweep or "alpha=0.01:0.1:1.0")
    if name == "load_G":
        raise SweepError("phy-sweep cannot sweep load_G; use mac-sim")
    if args.dump_dir:
        Path(args.dump_dir).mkdir(parents=True, exist_ok=True)
    if args.telemetry_dir:
        Path(args.telemetry_dir).mkdir(parents=True, exist_ok=True)
    rows = []
    for pi_, val in enumerate(grid):
        pcfg = point_config(cfg, name, val)
        if args.xi is not None:
            xi = args.xi
        else:
            xi = recovery.calibrate_threshold(
                pcfg, args.target_pfa, args.cal_trials,
                seed=int(stream_rng(cfg.master_seed, "cal", pi_).integers(2**63)),
                solver=args.solver)
        opt = {"solver": args.solver, "xi": xi, "capture": args.capture,
               "residual": args.residual, "placement": args.placement,
               "chunk": args.chunk, "dump_dir": args.dump_dir}
        tasks = [(pcfg, pi_, t, opt) for t in range(args.trials)]
        outs = _run_tasks(tasks, _phy_trial, args.workers)
        errors = sum(o["errors"] for o in outs)
        symbols = sum(o["symbols"] for o in outs)
        md = sum(o["md"] for o in outs)
        fa = sum(o["fa"] for o in outs)
        n_act = sum(o["n_act"] for o in outs)
        n_inact = sum(o["n_inact"] for o in outs)
        ser, lo, hi = wilson_interval(errors, symbols)
        rows.append([val, args.trials, ser, lo, hi,
                     md / max(n_act, 1), fa / max(n_inact, 1),
                     float(np.mean([o["solver_iters"] for o in outs]))])
        if args.telemetry_dir:
            _write_point_telemetry(pcfg, args, pi_)
    write_csv(args.out, cfg.config_hash(), cfg.master_seed,
              ["param", "trials", "ser", "ser_ci_lo", "ser_ci_hi",
               "pmd", "pfa", "mean_solver_iters"], rows)
    return 0


def _write_point_telemetry(pcfg, args, point_idx):
    preambles = _cached_preambles(pcfg)
    A = recovery.MeasurementOperator(preambles, pcfg.s_d)
    seed = _trial_seed(pcfg.master_seed, point_idx, 0)
    _, _, _ = recovery._detection_trial(pcfg, preambles, A, 0, seed,
                                        args.solver, recovery.SolverOptions())
    # rerun the solve to capture the trajectory
    from .signal import gen_channels
    rng = stream_rng(seed, "trial", 0, "active")
    active = np.sort(rng.choice(pcfg.U, size=pcfg.k2, replace=False))
    channels = gen_channels(pcfg, active,
                            stream_rng(seed, "trial", 0, "chan").integers(2**63))
    h = np.zeros((pcfg.U, pcfg.s_d), dtype=complex)
    for ch in channels:
        h[ch.user_id, ch.delays] = ch.gains
    y_b = A.forward(h.reshape(-1))
    if pcfg.noise_var > 0:
        nr = stream_rng(seed, "trial", 0, "noise")
        y_b = y_b + np.sqrt(pcfg.noise_var / 2.0) * (
            nr.standard_normal(pcfg.m) + 1j * nr.standard_normal(pcfg.m))
    if args.solver == "bpdn":
        sol = recovery.bpdn_solve(A, y_b, recovery.default_epsilon(pcfg))
    else:
        sol = recovery.hicosamp_solve(A, y_b, pcfg.k2, pcfg.k1)
    recovery.write_telemetry(
        sol, Path(args.telemetry_dir) / f"solver_point{point_idx}.csv")


def _mac_load_trial(task):
    n_slots, dist, n_users, seed, trial = task
    res = mac.run_abstract_load_frame(n_slots, dist, n_users, seed, trial=trial)
    return res


def cmd_mac_sim(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = with_params(cfg, master_seed=args.seed)
    name, grid = parse_sweep(args.sweep or "load_G=0.1:0.1:1.0")
    rows = []
    all_results = []
    for pi_, val in enumerate(grid):
        if name == "load_G":
            if args.mode != "abstract":
                raise SweepError("load_G sweeps run in abstract mode")
            n_users = int(round(val * cfg.num_data_slots))
            seed = int(stream_rng(cfg.master_seed, "macsim", pi_).integers(2**63))
            tasks = [(cfg.num_data_slots, cfg.degree_dist, n_users, seed, t)
                     for t in range(args.trials)]
            results = _run_tasks(tasks, _mac_load_trial, args.workers)
            g_eff = val
        else:
            pcfg = point_config(cfg, name, val)
            preambles = _cached_preambles(pcfg) if args.mode == "full-phy" else None
            results = []
            for t in range(args.trials):
                seed = _trial_seed(cfg.master_seed, pi_, t)
                results.append(mac.run_frame(pcfg, args.mode, seed, preambles))
            g_eff = pcfg.k2 / pcfg.num_data_slots
        stats = mac.throughput(results)
        all_results.extend(results)
        row = [val, args.trials, stats.T, stats.P_loss,
               stats.ci[0], stats.ci[1],
               stats.causes.get(mac.CAUSE_PREAMBLE_COLLISION, 0),
               stats.causes.get(mac.CAUSE_UNDETECTED, 0),
               stats.causes.get(mac.CAUSE_UNDECODABLE, 0)]
        if args.de_overlay:
            de = analysis.de_for_load(max(g_eff, 1e-9), cfg.degree_dist)
            row.append(de.ploss_node)
        rows.append(row)
    header = ["param", "trials", "T", "P_loss", "ploss_ci_lo", "ploss_ci_hi",
              "lost_preamble_collision", "lost_undetected", "lost_undecodable"]
    if args.de_overlay:
        header.append("de_ploss")
    write_csv(args.out, cfg.config_hash(), cfg.master_seed, header, rows)
    if args.jsonl:
        mac.write_jsonl(all_results, args.jsonl)
    return 0


def _parse_dist(text: str) -> tuple:
    out = []
    for part in text.split(","):
        d, p = part.split(":")
        out.append((int(d), float(p)))
    return tuple(out)


def cmd_de(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        dist = cfg.degree_dist
        seed = cfg.master_seed if args.seed is None else args.seed
        cfg_hash = cfg.config_hash()
    else:
        dist = _parse_dist(args.dist)
        seed = args.seed or 0
        cfg_hash = f"dist:{args.dist}"
    if args.capture_table:
        table = _load_capture_table(args.capture_table)
    else:
        table = None
    _, grid = parse_sweep(args.sweep or "load_G=0.1:0.1:1.2")
    rows = []
    for val in grid:
        if val <= 0:
            rows.append([val, 0, True, 0.0, 0.0, 1.0, 1.0, 0.0]
                        + ([1.0, 1.0] if args.strict_paper_de else []))
            continue
        de = analysis.de_for_load(val, dist, table)
        row = [val, de.iterations, de.converged, de.p_inf, de.q_inf,
               de.pd_edge, de.pd_node, de.ploss_node]
        if args.strict_paper_de:
            ds = analysis.de_for_load(val, dist, table, strict_paper=True)
            row += [ds.pd_edge, ds.pd_node]
        rows.append(row)
    header = ["param", "iterations", "converged", "p_inf", "q_inf",
              "pd_edge", "pd_node", "ploss_node"]
    if args.strict_paper_de:
        header += ["strict_pd_edge", "strict_pd_node"]
    extra = ""
    if args.threshold:
        g_star = analysis.de_threshold(dist, table)
        extra = f" threshold={g_star!r}"
        print(f"threshold {g_star!r}", file=sys.stderr)
    write_csv(args.out, cfg_hash + extra, seed, header, rows)
    return 0


def _load_capture_table(path) -> analysis.CaptureTable:
    rows: dict[int, dict[int, float]] = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line or line.startswith("j,"):
            continue
        j, t, p = line.split(",")
        rows.setdefault(int(j), {})[int(t)] = float(p)
    return analysis.CaptureTable.from_rows(
        {j: [v[t] for t in range(j)] for j, v in rows.items()})


def cmd_bounds(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = with_params(cfg, master_seed=args.seed)
    _, grid = parse_sweep(args.sweep or "alpha=0.01:0.05:1.0")
    colliders = [int(c) for c in args.colliders.split(",")] if args.colliders else [1, 2, 4]
    rows = []
    for pi_, val in enumerate(grid):
        pcfg = with_params(cfg, alpha=float(val))
        e_log = analysis.expected_log_term(
            pcfg, args.xi, args.trials,
            seed=int(stream_rng(cfg.master_seed, "elog", pi_).integers(2**63)))
        inp = analysis.RateBoundInputs(
            alpha=pcfg.alpha, noise_var=pcfg.noise_var, m=pcfg.m, n=pcfg.n,
            k2=pcfg.k2, delta2k=args.delta2k, pbar_md=args.pbar_md,
            e_log=e_log)
        rows.append([val, "singleton", 0,
                     analysis.rate_bound_singleton(inp), e_log])
        for c in colliders:
            inp.n_colliders = c
            rows.append([val, "collision", c,
                         analysis.rate_bound_collision(inp), e_log])
    write_csv(args.out, cfg.config_hash(), cfg.master_seed,
              ["param", "kind", "colliders", "bound", "e_log"], rows)
    return 0


def cmd_calibrate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = with_params(cfg, master_seed=args.seed)
    xi = recovery.calibrate_threshold(cfg, args.target_pfa, args.cal_trials,
                                      solver=args.solver)
    rates = recovery.estimate_pmd_pfa(cfg, xi, args.trials, solver=args.solver)
    write_csv(args.out, cfg.config_hash(), cfg.master_seed,
              ["xi", "target_pfa", "pmd", "pmd_ci_lo", "pmd_ci_hi",
               "pfa", "pfa_ci_lo", "pfa_ci_hi", "trials"],
              [[xi, args.target_pfa, rates.pmd, rates.pmd_ci[0],
                rates.pmd_ci[1], rates.pfa, rates.pfa_ci[0],
                rates.pfa_ci[1], rates.trials]])
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ccra",
                                 description="compressive coded random access "
                                             "simulator and analyzer")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required)
        p.add_argument("--sweep", help="NAME=START:STEP:STOP or NAME=v1,v2,...")
        p.add_argument("--trials", type=int, default=100)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--workers", type=int,
                       default=max(1, os.cpu_count() or 1))

    p = sub.add_parser("phy-sweep", help="full-phy SER sweep")
    common(p)
    p.add_argument("--mode", choices=["full-phy"], default="full-phy")
    p.add_argument("--solver", choices=["bpdn", "hicosamp"], default="bpdn")
    p.add_argument("--capture", choices=["genie", "sinr"], default="genie")
    p.add_argument("--residual", choices=["genie", "proxy"], default="genie")
    p.add_argument("--placement", choices=["dedicated", "pattern"],
                   default="dedicated")
    p.add_argument("--chunk", type=int, default=None,
                   help="slots per user for dedicated placement")
    p.add_argument("--xi", type=float, default=None,
                   help="fixed activity threshold (default: calibrate per point)")
    p.add_argument("--target-pfa", type=float, default=1e-3)
    p.add_argument("--cal-trials", type=int, default=50)
    p.add_argument("--telemetry-dir", default=None)
    p.add_argument("--dump-dir", default=None)
    p.set_defaults(func=cmd_phy_sweep)

    p = sub.add_parser("mac-sim", help="frame simulator sweep")
    common(p)
    p.add_argument("--mode", choices=["abstract", "full-phy"],
                   default="abstract")
    p.add_argument("--de-overlay", action="store_true")
    p.add_argument("--jsonl", default=None,
                   help="write per-trial frame results as JSON lines")
    p.set_defaults(func=cmd_mac_sim)

    p = sub.add_parser("de", help="density-evolution curves")
    common(p, config_required=False)
    p.add_argument("--dist", default="3:1.0",
                   help="node degree distribution, e.g. 3:0.5,4:0.5")
    p.add_argument("--capture-table", default=None,
                   help="CSV with columns j,t,pi")
    p.add_argument("--strict-paper-de", action="store_true")
    p.add_argument("--threshold", action="store_true",
                   help="bisect the decoding threshold")
    p.set_defaults(func=cmd_de)

    p = sub.add_parser("bounds", help="achievable-rate lower bounds")
    common(p)
    p.add_argument("--delta2k", type=float, default=0.2)
    p.add_argument("--pbar-md", type=float, default=1.0)
    p.add_argument("--xi", type=float, default=0.0)
    p.add_argument("--colliders", default="1,2,4")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("calibrate", help="activity threshold calibration")
    common(p)
    p.add_argument("--solver", choices=["hicosamp", "bpdn"], default="hicosamp")
    p.add_argument("--target-pfa", type=float, default=1e-3)
    p.add_argument("--cal-trials", type=int, default=100)
    p.set_defaults(func=cmd_calibrate)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ConfigError, SweepError, analysis.AnalysisError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:          # runtime failure
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
