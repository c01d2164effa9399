"""Command-line front end.

    covflow <study> [--config PATH] [--seed U64] [--workers N] [--out DIR] [--set KEY=JSON ...]

Studies: theory, simulate, grid, depth-rate, width-rate, joint. Each run
writes its CSV table(s), a whitespace-separated ``.dat`` twin for plotting
and ``manifest.json`` into the output directory. The default output
directory is ``$COVFLOW_OUT`` or ``./covflow_out``.

Exit codes: 0 success, 2 configuration error, 3 numerical instability,
4 I/O failure, 5 other numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .artifacts import write_csv, write_dat, write_json
from .config import OUTPUT_ENV, STUDIES, RunConfig, parse_config
from .errors import ConfigError, CovflowError, InstabilityError
from .experiments import (
    depth_rate_study,
    grid_study,
    joint_diagonal_study,
    layer_profile_study,
    width_rate_study,
)
from .nets import NetworkSpec
from .scaling import is_normalized, sequence_from_dict
from .theory import (
    InputPair,
    covariance_flow,
    euler_trace,
    infinite_width_trace,
    relu_dual,
    relu_dual_prime,
    sample_unit_pair,
)

EXIT_OK, EXIT_CONFIG, EXIT_INSTABILITY, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4, 5

FIGURES = {
    "grid": "fig1/fig2 - final-layer covariance vs width and depth (mean, std, L2 error)",
    "width-rate": "fig1 - L2 error of the final covariance vs width at fixed depth",
    "depth-rate": "fig4 - Delta_L = |q_(L,inf) - q_(t=1)| vs depth, log-log",
    "joint": "fig3 - distribution of q_(L,n) with L = n per architecture",
    "simulate": "fig1 - per-layer mean covariance against the infinite-width recursion",
    "theory": "fig1 - limiting covariance flow q_t (red dashed curve)",
}


def build_pair(cfg: RunConfig) -> InputPair:
    inputs = cfg.inputs
    kind = inputs["kind"]
    if kind == "random_unit":
        return sample_unit_pair(cfg.d, inputs.get("seed", cfg.master_seed))
    if kind == "correlation":
        return InputPair.from_correlation(inputs["c0"], inputs.get("q_aa", 1.0), inputs.get("q_bb", 1.0))
    return InputPair(inputs["a"], inputs["b"])


def build_spec(cfg: RunConfig, pair: InputPair, arch: str = None) -> NetworkSpec:
    arch = arch or cfg.arch
    scaling = sequence_from_dict(cfg.scaling) if arch == "scaled_resnet" else None
    return NetworkSpec(arch, cfg.n_list[0], cfg.L_list[0], pair.d, scaling=scaling, beta=cfg.beta, engine=cfg.engine)


def _emit(out: Path, stem: str, header, rows, study: str):
    write_csv(out / f"{stem}.csv", header, rows)
    write_dat(out / f"{stem}.dat", header, rows, FIGURES[study])
    return [f"{stem}.csv", f"{stem}.dat"]


def _fit_summary(study):
    if study.fit is None:
        return {"fit_error": study.fit_error}
    f = study.fit
    return {"slope": f.slope, "intercept": f.intercept, "r_squared": f.r_squared, "fit_points": list(f.xs)}


def _run_theory(cfg, pair, out):
    files = []
    rows = []
    for c in cfg.c_list:
        fp = relu_dual_prime(c, limit=True)
        rows.append((float(c), relu_dual(c), fp))
    write_csv(out / "relu_dual.csv", ("c", "f", "f_prime"), rows)
    files.append("relu_dual.csv")

    flow = covariance_flow(pair, cfg.step)
    stride = max(1, (len(flow.t_grid) - 1) // 1000)
    flow_rows = [r for i, r in enumerate(flow.csv_rows()) if i % stride == 0 or i == len(flow.t_grid) - 1]
    files += _emit(out, "flow", ("t", "q_aa", "q_ab", "q_bb", "c"), flow_rows, "theory")

    seq = sequence_from_dict(cfg.scaling)
    trace_rows = []
    for L in cfg.L_list:
        trace = infinite_width_trace(seq, L, pair)
        t = seq.time_grid(L)
        normalized = is_normalized(seq, L)
        euler = euler_trace(seq, L, pair) if normalized else None
        flow_at = flow.q_ab_at(np.clip(t, 0.0, 1.0)) if normalized else None
        for l in range(L + 1):
            trace_rows.append((
                L, l, float(t[l]), float(trace.q_aa[l]), float(trace.q_ab[l]), float(trace.q_bb[l]),
                float(euler[l]) if normalized else None,
                float(flow_at[l]) if normalized else None,
            ))
    write_csv(out / "infinite_width.csv",
              ("L", "layer", "t", "q_aa", "q_ab", "q_bb", "euler_q_ab", "flow_q_ab"), trace_rows)
    files.append("infinite_width.csv")
    return files, {"flow_q_ab_t1": flow.final().q_ab}


def _run_simulate(cfg, pair, out):
    files = []
    summary = {}
    cols = None
    rows = []
    template = build_spec(cfg, pair)
    for n in cfg.n_list:
        for L in cfg.L_list:
            spec = template.with_size(n, L)
            try:
                prof = layer_profile_study(spec, pair, cfg.trials, cfg.master_seed, cfg.workers,
                                           auxiliary=cfg.auxiliary and spec.arch == "scaled_resnet")
            except InstabilityError as exc:
                raise exc.with_context(n=n, L=L) from None
            cols = ("n", "L") + tuple(prof[0].keys())
            rows += [(n, L) + tuple(r.values()) for r in prof]
            summary[f"n={n},L={L}"] = {"final_mean_q_ab": prof[-1]["mean_q_ab"]}
    files += _emit(out, "simulate", cols, rows, "simulate")
    return files, summary


def _run_grid(cfg, pair, out):
    res = grid_study(build_spec(cfg, pair), cfg.n_list, cfg.L_list, cfg.trials, cfg.master_seed, pair,
                     cfg.workers, cfg.step, cfg.tol)
    return _emit(out, "grid", res.columns, res.table(), "grid"), {"theory_q": res.rows[0]["theory_q"]}


def _run_depth_rate(cfg, pair, out):
    res = depth_rate_study(cfg.L_list, pair, cfg.step, cfg.drop_fraction)
    return _emit(out, "depth_rate", res.columns, res.table(), "depth-rate"), _fit_summary(res)


def _run_width_rate(cfg, pair, out):
    res = width_rate_study(build_spec(cfg, pair), cfg.n_list, cfg.L_list[0], cfg.trials, cfg.master_seed, pair,
                           cfg.workers, cfg.step, cfg.tol, cfg.drop_fraction)
    return _emit(out, "width_rate", res.columns, res.table(), "width-rate"), _fit_summary(res)


def _run_joint(cfg, pair, out):
    templates = [build_spec(cfg, pair, arch) for arch in cfg.archs]
    res = joint_diagonal_study(cfg.n_list, templates, cfg.trials, cfg.master_seed, pair, cfg.workers,
                               cfg.step, cfg.beta)
    return _emit(out, "joint", res.columns, res.table(), "joint"), {}


RUNNERS = {
    "theory": _run_theory,
    "simulate": _run_simulate,
    "grid": _run_grid,
    "depth-rate": _run_depth_rate,
    "width-rate": _run_width_rate,
    "joint": _run_joint,
}


def run(cfg: RunConfig) -> int:
    """Execute one study and write its artifacts; returns the process exit status."""
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise PermissionError(f"output directory {out} is not writable")
    except OSError as exc:
        return _fail(EXIT_IO, "io", str(exc))
    started = time.time()
    try:
        pair = build_pair(cfg)
        files, summary = RUNNERS[cfg.study](cfg, pair, out)
        manifest = {
            "config": cfg.to_dict(),
            "study": cfg.study,
            "figure": FIGURES[cfg.study],
            "files": files,
            "results": summary,
            "pair": pair.describe(),
            "output_dir_env": {OUTPUT_ENV: os.environ.get(OUTPUT_ENV)},
            "versions": {"covflow": __version__, "numpy": np.__version__, "python": platform.python_version()},
            "started": started,
            "elapsed_s": time.time() - started,
        }
        write_json(out / "manifest.json", manifest)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), key=exc.key)
    except InstabilityError as exc:
        return _fail(EXIT_INSTABILITY, "instability", str(exc), layer=exc.layer, **exc.context)
    except OSError as exc:
        return _fail(EXIT_IO, "io", str(exc))
    except CovflowError as exc:
        return _fail(EXIT_NUMERIC, "numeric", str(exc))
    for key, value in summary.items():
        if isinstance(value, float) and math.isfinite(value):
            print(f"{key} = {value:.6g}")
        else:
            print(f"{key} = {value}")
    print(f"wrote {', '.join(files)}, manifest.json to {out}")
    return EXIT_OK


def _fail(code, kind, message, **extra):
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True, default=str), file=sys.stderr)
    return code


def _parse_set(items):
    overrides = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(item, "--set expects KEY=VALUE")
        key, raw = item.split("=", 1)
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="covflow", description="Width/depth covariance experiments for scaled ResNets.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="study", required=True)
    for study in STUDIES:
        p = sub.add_parser(study, help=FIGURES[study])
        p.add_argument("--config", metavar="PATH", help="JSON config file (flags take precedence)")
        p.add_argument("--seed", type=int, metavar="U64", help="master seed")
        p.add_argument("--workers", type=int, metavar="N", help="worker processes for Monte Carlo trials")
        p.add_argument("--out", metavar="DIR", help=f"output directory (default ${OUTPUT_ENV} or ./covflow_out)")
        p.add_argument("--set", action="append", metavar="KEY=JSON", help="override any config key")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = _parse_set(args.set)
        overrides.update({"study": args.study, "master_seed": args.seed, "workers": args.workers,
                          "output_dir": args.out})
        cfg = parse_config(args.config, overrides)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), key=exc.key)
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
