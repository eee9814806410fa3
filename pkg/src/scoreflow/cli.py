"""Experiment orchestration CLI.

Subcommands: simulate | lyapunov | align | perturb-sweep | diagnose |
response | kde | cfm-compare | validate | verify-manifest.  Every run
writes its CSV artifacts plus a manifest.json carrying the resolved
config, seed, versions and per-file checksums.  (config, seed) fully
determine every numeric artifact; the worker count only distributes
fixed-size path chunks, so results are byte-identical for any --workers.

Exit codes: 0 success, 2 config error, 3 more than 1% of paths diverged,
4 I/O or manifest-verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import analysis
from .config import (
    ConfigError,
    apply_overrides,
    build_from_config,
    load_config,
    make_observable,
    merge_config,
    validate as validate_config,
)
from .dynamics import RecordFlags, run_paths
from .runio import verify_manifest, write_csv, write_manifest
from .schedule_score import default_mode

SUBCOMMANDS = ("simulate", "lyapunov", "align", "perturb-sweep", "diagnose",
               "response", "kde", "cfm-compare", "validate",
               "verify-manifest")

DEFAULT_OUT_ENV = "SCOREFLOW_OUT"
CHUNK_SIZE = 2048  # fixed so results do not depend on the worker count


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.subcommand is None:
        parser.print_help()
        return 2
    return run(args.subcommand, args.config, overrides=args.set or (),
               seed=args.seed, workers=args.workers, out_dir=args.out)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="scoreflow",
        description="Curve-target diffusion / flow-matching experiments")
    sub = parser.add_subparsers(dest="subcommand")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config path")
        p.add_argument("--seed", type=int, default=None,
                       help="override run.seed")
        p.add_argument("--workers", type=int, default=None,
                       help="worker processes (default: machine parallelism)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted-path config override (repeatable)")
    return parser


def run(subcommand, config_path=None, overrides=(), seed=None, workers=None,
        out_dir=None) -> int:
    """Execute one named experiment; returns the process exit status."""
    if subcommand == "verify-manifest":
        target = out_dir or _default_out(None)
        problems = verify_manifest(target)
        for p in problems:
            print(f"verify-manifest: {p}", file=sys.stderr)
        if not problems:
            print(f"manifest ok: {target}")
        return 0 if not problems else 4

    if subcommand == "validate":
        problems = _collect_problems(config_path, overrides)
        if problems:
            for p in problems:
                print(f"config: {p}", file=sys.stderr)
            return 2
        print("config ok")
        return 0

    try:
        cfg = load_config(config_path, overrides)
    except ConfigError as err:
        for p in err.problems:
            print(f"config: {p}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as err:
        print(f"config: {err}", file=sys.stderr)
        return 2
    if seed is not None:
        cfg["run"]["seed"] = int(seed)
    out = out_dir or _default_out(cfg)
    cfg["output"]["dir"] = out

    started = time.monotonic()
    try:
        os.makedirs(out, exist_ok=True)
        with _pool(workers) as pmap:
            files, extra = _dispatch(subcommand, cfg, out, pmap)
        write_manifest(out, subcommand, cfg, files, started, extra)
    except ConfigError as err:
        for p in err.problems:
            print(f"config: {p}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"io error: {err}", file=sys.stderr)
        return 4
    n_paths = max(extra.get("n_paths", 1), 1)
    if extra.get("n_diverged", 0) > 0.01 * n_paths:
        print(f"divergence: {extra['n_diverged']} of {n_paths} paths "
              "diverged", file=sys.stderr)
        return 3
    return 0


def _collect_problems(config_path, overrides):
    try:
        if config_path is None:
            user = {}
        else:
            with open(config_path) as fh:
                user = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        return [str(err)]
    cfg, problems = merge_config(user)
    problems += apply_overrides(cfg, overrides)
    problems += validate_config(cfg)
    return problems


def _default_out(cfg):
    if cfg and cfg["output"]["dir"]:
        return cfg["output"]["dir"]
    return os.environ.get(DEFAULT_OUT_ENV, "out")


class _SerialPool:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False


class _ProcessPool:
    def __init__(self, workers):
        self.workers = workers
        self.pool = None

    def __enter__(self):
        import multiprocessing as mp

        self.pool = mp.get_context("fork").Pool(self.workers)
        return self.pool.map

    def __exit__(self, *exc):
        self.pool.close()
        self.pool.join()
        return False


def _pool(workers):
    if workers is None:
        workers = os.cpu_count() or 1
    return _ProcessPool(workers) if workers > 1 else _SerialPool()


def _model_with_perturbation(model, pert, eps):
    if pert is None or eps == 0.0:
        return model
    return replace(model, perturbation=pert, eps=float(eps))


def _integrator(cfg, model):
    return cfg["run"]["integrator"] or default_mode(model)


def _dispatch(subcommand, cfg, out, pmap):
    handler = {
        "simulate": _cmd_simulate,
        "lyapunov": _cmd_lyapunov,
        "align": _cmd_align,
        "perturb-sweep": _cmd_perturb_sweep,
        "diagnose": _cmd_diagnose,
        "response": _cmd_response,
        "kde": _cmd_kde,
        "cfm-compare": _cmd_cfm_compare,
    }[subcommand]
    return handler(cfg, out, pmap)


def _final_state_rows(model, res):
    xs = res.final_states
    dist, arc, s, _, _ = model.manifold.project_points(xs)
    coord = model.manifold.arc_coordinate(arc, s)
    for j in range(len(xs)):
        yield [res.indices[j], *xs[j], dist[j], coord[j]]


def _cmd_simulate(cfg, out, pmap):
    manifold, _, _, model, pert = build_from_config(cfg)
    run_cfg = cfg["run"]
    eps_list = cfg["perturbation"]["epsilons"]
    model = _model_with_perturbation(model, pert, eps_list[0] if eps_list else 0.0)
    record = RecordFlags(states=bool(cfg["output"]["trajectories"]))
    res = run_paths(model, _integrator(cfg, model), run_cfg["n_paths"],
                    run_cfg["seed"], record=record, chunk_size=CHUNK_SIZE,
                    parallel_map=pmap)
    d = manifold.ambient_dim
    files = ["final_states.csv"]
    header = ("path_id," + ",".join(f"x{i}" for i in range(d))
              + ",dist_to_M,tangential_coord")
    write_csv(os.path.join(out, "final_states.csv"), header,
              _final_state_rows(model, res))
    if record.states:
        rows = ([res.indices[j], n, res.times[n], *res.states[j, n]]
                for j in range(len(res.indices))
                for n in range(res.states.shape[1]))
        write_csv(os.path.join(out, "trajectories.csv"),
                  "path_id,n,t," + ",".join(f"x{i}" for i in range(d)), rows)
        files.append("trajectories.csv")
    extra = {"n_paths": run_cfg["n_paths"],
             "n_diverged": int(res.diverged.sum()),
             "integrator": _integrator(cfg, model), "eps": model.eps}
    return files, extra


def _cmd_lyapunov(cfg, out, pmap):
    manifold, _, _, model, _ = build_from_config(cfg)
    run_cfg = cfg["run"]
    k = run_cfg["frame_k"] or manifold.intrinsic_dim
    res = run_paths(model, _integrator(cfg, model), run_cfg["n_paths"],
                    run_cfg["seed"], tangent_k=k, chunk_size=CHUNK_SIZE,
                    parallel_map=pmap)
    lam = np.sort(res.log_r.sum(axis=1) / res.tau_eff, axis=1)[:, ::-1]
    mean_lam = lam.mean(axis=0)
    gap = analysis.le_gap(mean_lam) if k >= 2 else None
    files = ["exponents.csv", "spectrum_history.csv", "lyapunov.json"]
    write_csv(os.path.join(out, "exponents.csv"),
              "path_id," + ",".join(f"lambda_{i+1}" for i in range(k)),
              ([res.indices[j], *lam[j]] for j in range(len(lam))))
    mean_hist = res.log_r.mean(axis=0)
    write_csv(os.path.join(out, "spectrum_history.csv"),
              "n,t," + ",".join(f"log_r_{i+1}" for i in range(k)),
              ([n, res.step_times[n], *mean_hist[n]]
               for n in range(mean_hist.shape[0])))
    report = {
        "tau_eff": res.tau_eff,
        "k": int(k),
        "n_paths": int(run_cfg["n_paths"]),
        "mean_exponents": [float(v) for v in mean_lam],
        "exponents_path0": [float(v) for v in lam[0]],
        "final_frame_path0": [[float(v) for v in row]
                              for row in res.final_frames[0]],
    }
    if gap is not None:
        report.update(gap_index=gap.index, gap_size=gap.size,
                      gap_degenerate=gap.degenerate)
    with open(os.path.join(out, "lyapunov.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    extra = {"n_paths": run_cfg["n_paths"],
             "n_diverged": int(res.diverged.sum())}
    return files, extra


def _alignment_files(scan, out, prefix=""):
    name = f"alignment{prefix}.csv"
    write_csv(os.path.join(out, name), "path_id,a,theta_deg,dist",
              ([j, r.a, r.theta_deg, r.dist]
               for j, r in enumerate(scan.records)))
    files = [name]
    if scan.model.ambient_dim == 2:
        overlay = f"lv_overlay{prefix}.csv"
        write_csv(os.path.join(out, overlay), "x0,x1,e0,e1",
                  ([*r.x, *scan.top_lv[j]]
                   for j, r in enumerate(scan.records)))
        files.append(overlay)
    return files


def _cmd_align(cfg, out, pmap):
    _, _, _, model, _ = build_from_config(cfg)
    run_cfg = cfg["run"]
    scan = analysis.alignment_scan(model, run_cfg["n_paths"],
                                   k=run_cfg["frame_k"], seed=run_cfg["seed"],
                                   integrator=cfg["run"]["integrator"],
                                   chunk_size=CHUNK_SIZE, parallel_map=pmap)
    files = _alignment_files(scan, out)
    with open(os.path.join(out, "alignment_summary.json"), "w") as fh:
        json.dump(scan.summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    files.append("alignment_summary.json")
    extra = {"n_paths": run_cfg["n_paths"],
             "n_diverged": scan.summary["n_diverged"]}
    return files, extra


def _cmd_perturb_sweep(cfg, out, pmap):
    _, _, _, model, pert = build_from_config(cfg)
    if pert is None:
        raise ConfigError(["perturb-sweep needs perturbation.sup_norm > 0"])
    run_cfg = cfg["run"]
    shift = analysis.support_shift(model, cfg["perturbation"]["epsilons"],
                                   pert, run_cfg["n_paths"],
                                   seed=run_cfg["seed"],
                                   integrator=cfg["run"]["integrator"],
                                   chunk_size=CHUNK_SIZE, parallel_map=pmap)
    write_csv(os.path.join(out, "support_shift.csv"),
              "epsilon,rms_tan,rms_norm,q50_dist,q95_dist",
              ([r.eps, r.rms_tangential, r.rms_normal, r.q50_dist,
                r.q95_dist] for r in shift.rows))
    extra = {"n_paths": run_cfg["n_paths"],
             "n_diverged": max(r.n_diverged for r in shift.rows),
             "baseline_q95": shift.baseline_q95,
             "degenerate_target": shift.degenerate_target}
    return ["support_shift.csv"], extra


def _cmd_diagnose(cfg, out, pmap):
    _, _, _, model, _ = build_from_config(cfg)
    run_cfg = cfg["run"]
    diag = analysis.theorem_diagnostics(model, run_cfg["n_paths"],
                                        seed=run_cfg["seed"],
                                        integrator=cfg["run"]["integrator"],
                                        k=run_cfg["frame_k"])
    write_csv(os.path.join(out, "diagnostics.csv"), "n,t,alpha,b,c,g,h",
              ([n, diag.step_times[n], diag.alpha[n], diag.b[n], diag.c[n],
                diag.g[n], diag.h[n]] for n in range(len(diag.alpha))))
    payload = dict(diag.flags)
    payload["n_paths"] = diag.n_paths
    payload["k"] = diag.k
    with open(os.path.join(out, "diagnose_flags.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return (["diagnostics.csv", "diagnose_flags.json"],
            {"n_paths": run_cfg["n_paths"], "n_diverged": 0})


def _cmd_response(cfg, out, pmap):
    _, _, _, model, pert = build_from_config(cfg)
    if pert is None:
        raise ConfigError(["response needs perturbation.sup_norm > 0"])
    run_cfg = cfg["run"]
    eps_list = [e for e in cfg["perturbation"]["epsilons"] if e > 0]
    if not eps_list:
        raise ConfigError(["response needs at least one epsilon > 0"])
    obs = make_observable(cfg)
    table = analysis.response_consistency(
        model, obs, pert, eps_list, run_cfg["n_paths"], seed=run_cfg["seed"],
        integrator=cfg["run"]["integrator"], chunk_size=CHUNK_SIZE,
        parallel_map=pmap)
    write_csv(os.path.join(out, "response.csv"),
              "epsilon,fd_estimate,lin_estimate,std_err",
              ([r.eps, r.fd_estimate, table.lin_estimate, r.std_err]
               for r in table.rows))
    summary = {
        "observable": table.observable,
        "lin_estimate": table.lin_estimate,
        "lin_std_err": table.lin_std_err,
        "residuals": [float(v) for v in table.residuals],
        "orders": [float(v) for v in table.orders],
        "inconclusive": table.inconclusive,
        "converged_exact": table.converged_exact,
        "n_paths": table.n_paths,
        "n_diverged": table.n_diverged,
    }
    with open(os.path.join(out, "response_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return (["response.csv", "response_summary.json"],
            {"n_paths": run_cfg["n_paths"], "n_diverged": table.n_diverged})


def _cmd_kde(cfg, out, pmap):
    manifold, _, _, model, pert = build_from_config(cfg)
    if manifold.ambient_dim != 2:
        raise ConfigError(["kde needs a planar (ambient_dim = 2) target"])
    run_cfg = cfg["run"]
    eps_list = cfg["perturbation"]["epsilons"]
    model = _model_with_perturbation(model, pert, eps_list[0] if eps_list else 0.0)
    res = run_paths(model, _integrator(cfg, model), run_cfg["n_paths"],
                    run_cfg["seed"], chunk_size=CHUNK_SIZE, parallel_map=pmap)
    kcfg = cfg["kde"]
    grid = analysis.kde_grid(res.final_states[~res.diverged],
                             tuple(kcfg["xlim"]), tuple(kcfg["ylim"]),
                             nx=kcfg["nx"], ny=kcfg["ny"],
                             bandwidth=kcfg["bandwidth"])
    rows = ([grid.x_centers[i], grid.y_centers[j], grid.density[j, i]]
            for j in range(len(grid.y_centers))
            for i in range(len(grid.x_centers)))
    write_csv(os.path.join(out, "kde.csv"), "x0,x1,density", rows)
    extra = {"n_paths": run_cfg["n_paths"],
             "n_diverged": int(res.diverged.sum()),
             "bandwidth": grid.bandwidth, "eps": model.eps}
    return ["kde.csv"], extra


def _cmd_cfm_compare(cfg, out, pmap):
    _, _, _, model, _ = build_from_config(cfg)
    run_cfg = cfg["run"]
    sgm = replace(model, kind="sgm_reverse")
    cfm = replace(model, kind="cfm")
    files = []
    summaries = {}
    for name, m in (("_sgm", sgm), ("_cfm", cfm)):
        scan = analysis.alignment_scan(m, run_cfg["n_paths"],
                                       k=run_cfg["frame_k"],
                                       seed=run_cfg["seed"],
                                       chunk_size=CHUNK_SIZE,
                                       parallel_map=pmap)
        files += _alignment_files(scan, out, prefix=name)
        summaries[name.strip("_")] = scan.summary
    compare = {
        "median_a_sgm": summaries["sgm"]["median_a"],
        "median_a_cfm": summaries["cfm"]["median_a"],
        "sgm_more_aligned": bool(summaries["sgm"]["median_a"]
                                 < summaries["cfm"]["median_a"]),
        "median_theta_deg_sgm": summaries["sgm"]["median_theta_deg"],
        "summaries": summaries,
    }
    with open(os.path.join(out, "cfm_compare.json"), "w") as fh:
        json.dump(compare, fh, indent=2, sort_keys=True)
        fh.write("\n")
    files.append("cfm_compare.json")
    extra = {"n_paths": run_cfg["n_paths"],
             "n_diverged": max(s["n_diverged"] for s in summaries.values())}
    return files, extra


if __name__ == "__main__":
    sys.exit(main())
