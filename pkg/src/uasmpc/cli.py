"""Command-line entry point: rollouts, the covariance-scaling sweep and forecast metrics."""

import argparse
import concurrent.futures
import csv
from dataclasses import dataclass
from fractions import Fraction
import glob
import io
import json
import math
import os
import sys
from importlib import resources

import numpy as np

from uasmpc.checks import SWEEP_ALPHAS, run_all
from uasmpc.errors import DomainError, NumericError
from uasmpc.metrics import CSV_FIELDS, TTC_HORIZON, csv_row, evaluate
from uasmpc.planner import HORIZON_PRESETS, PlannerConfig
from uasmpc.prediction import (
    avg_entropy,
    ece,
    gmm_nll,
    load_prediction_dump,
    min_ade_fde,
    mode_mean_trajectories,
    sample_trajectories,
    step_records,
)
from uasmpc.simulation import PlaybackPredictor, load_scenario, run_closed_loop

SWEEP_FIELDS = ("id", "alpha", "seed") + CSV_FIELDS[2:] + ("status", "error")
TABLE_METRICS = (("Progress", "progress"), ("Jerk", "jerk"), ("TTC", "min_ttc"), ("CL Score", "score"))
SVG_PAD = 10.0


def bundled_scenarios():
    root = resources.files("uasmpc") / "scenarios"
    return sorted(str(p) for p in root.iterdir() if p.name.endswith(".json"))


def parse_alpha(text):
    try:
        value = float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError(f"alpha must be positive, got {text}")
    return value


def parse_alphas(text):
    return [parse_alpha(t) for t in text.split(",") if t.strip()]


def parse_seeds(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be integers: {text!r}") from None


def alpha_label(alpha):
    f = Fraction(alpha).limit_denominator(1000)
    return str(f.numerator) if f.denominator == 1 else f"{f.numerator}/{f.denominator}"


def load_config(path=None, horizon=None, p=None):
    """Planner configuration: horizon preset, then the JSON file, then explicit flags."""
    fields = {}
    if path:
        with open(path) as fh:
            fields = json.load(fh)
        if not isinstance(fields, dict):
            raise DomainError(f"{path}: config must be a JSON object")
    if horizon is not None or "N" not in fields and "dt" not in fields:
        N, dt = HORIZON_PRESETS[horizon or "short"]
        fields = dict(fields, N=N, dt=dt)
    if p is not None:
        fields["p"] = p
    return PlannerConfig.from_dict(fields)


def _write_atomic(path, text):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _csv_text(rows, columns):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def _fmt(x):
    return f"{x:.3f}"


def render_svg(scenario, log, beta):
    """Static plot of routes, agent tracks, the ego path and first-step keep-out ellipses."""
    routes = [np.asarray(w, float) for w in scenario.routes.values()]
    ego = np.array([r["ego"]["position"] for r in log.records] + ([log.records[-1]["ego_after"]["position"]] if log.records else []))
    tracks = {}
    for r in log.records:
        for a in r["agents"]:
            tracks.setdefault(str(a["id"]), []).append(a["position"])
    pts = [ego] + [np.asarray(t) for t in tracks.values()]
    pts = np.concatenate([p.reshape(-1, 2) for p in pts if len(p)])
    lo = pts.min(axis=0) - SVG_PAD
    hi = pts.max(axis=0) + SVG_PAD
    w, h = hi - lo
    out = [
        '<svg xmlns="http://www.w3.org/2000/svg" '
        f'viewBox="{_fmt(lo[0])} {_fmt(-hi[1])} {_fmt(w)} {_fmt(h)}" width="{_fmt(8 * w)}" height="{_fmt(8 * h)}">',
        f'<rect x="{_fmt(lo[0])}" y="{_fmt(-hi[1])}" width="{_fmt(w)}" height="{_fmt(h)}" fill="white"/>',
        '<g transform="scale(1,-1)">',
    ]

    def poly(p, style):
        coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in p)
        return f'<polyline points="{coords}" fill="none" {style}/>'

    for route in routes:
        out.append(poly(route, 'stroke="#bbbbbb" stroke-width="0.4" stroke-dasharray="1,1"'))
    for r in log.records:
        for pred in r["predictions"]:
            for mode in pred["modes"]:
                (mx, my), (a, b, c) = mode["means"][0], mode["covs"][0]
                lam, U = np.linalg.eigh(np.array([[a, b], [b, c]]))
                rx, ry = np.sqrt(beta * np.maximum(lam, 0.0))
                ang = math.degrees(math.atan2(U[1, 0], U[0, 0]))
                out.append(f'<ellipse cx="{_fmt(mx)}" cy="{_fmt(my)}" rx="{_fmt(rx)}" ry="{_fmt(ry)}" '
                           f'transform="rotate({_fmt(ang)} {_fmt(mx)} {_fmt(my)})" '
                           'fill="none" stroke="#e08080" stroke-width="0.08"/>')
    for name in sorted(tracks):
        out.append(poly(tracks[name], 'stroke="#c03030" stroke-width="0.3"'))
    out.append(poly(ego, 'stroke="#2060c0" stroke-width="0.4"'))
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _predictor(path):
    return PlaybackPredictor.from_file(path) if path else None


def cmd_simulate(args):
    scenario = load_scenario(args.scenario)
    cfg = load_config(args.config, args.horizon, args.p_coverage)
    log = run_closed_loop(scenario, cfg, _predictor(args.predictions), args.alpha, args.seed,
                          speed_jitter=args.speed_jitter, record_timing=args.timing)
    m = evaluate(log, scenario.expert_progress)
    degraded = sum(r["plan"]["status"] != "optimal" for r in log.records)
    row = csv_row(scenario.id, args.alpha, m)
    if not args.timing:
        row["solve_time_mean"] = ""
    row["warning"] = f"{degraded} degraded plans" if degraded else ""
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.join(args.out, scenario.id)
    log.to_jsonl(stem + ".jsonl")
    _write_atomic(stem + ".csv", _csv_text([row], CSV_FIELDS + ("warning",)))
    _write_atomic(stem + ".svg", render_svg(scenario, log, cfg.beta))
    if degraded:
        print(f"warning: {degraded} of {len(log.records)} plans were degraded", file=sys.stderr)
    print(_csv_text([row], CSV_FIELDS + ("warning",)), end="")
    return 0


@dataclass
class SweepSpec:
    alphas: list
    scenarios: list
    horizon: str = "short"
    seeds: tuple = (0,)

    def __post_init__(self):
        if not self.alphas or any(not a > 0 for a in self.alphas):
            raise DomainError("sweep alphas must be a non-empty list of positive numbers")
        if not self.scenarios:
            raise DomainError("sweep needs at least one scenario")
        if self.horizon not in HORIZON_PRESETS:
            raise DomainError(f"unknown horizon preset {self.horizon!r}")


def _sweep_run(job):
    path, alpha, seed, cfg, predictions, jitter, timing, run_dir = job
    row = {"id": os.path.splitext(os.path.basename(path))[0], "alpha": alpha, "seed": seed, "status": "ok", "error": ""}
    try:
        scenario = load_scenario(path)
        row["id"] = scenario.id
        log = run_closed_loop(scenario, cfg, _predictor(predictions), alpha, seed,
                              speed_jitter=jitter, record_timing=timing)
        m = evaluate(log, scenario.expert_progress)
        row.update(csv_row(scenario.id, alpha, m))
        if not timing:
            row["solve_time_mean"] = ""
        if run_dir:
            name = f"{scenario.id}_a{alpha_label(alpha).replace('/', '-')}_s{seed}.jsonl"
            tmp = os.path.join(run_dir, name + ".tmp")
            log.to_jsonl(tmp)
            os.replace(tmp, os.path.join(run_dir, name))
    except (DomainError, NumericError, OSError, ValueError, KeyError) as exc:
        row.update(status="error", error=f"{type(exc).__name__}: {exc}")
    row["seed"] = seed
    return row


def aggregate(rows, alphas):
    """Per-alpha mean and standard error of each table metric over successful runs.

    Infinite TTC (no conflict in the window) counts as the window length.
    """
    out = []
    for alpha in alphas:
        sel = [r for r in rows if r["status"] == "ok" and float(r["alpha"]) == alpha]
        for label, key in TABLE_METRICS:
            x = np.array([min(float(r[key]), TTC_HORIZON) if key == "min_ttc" else float(r[key]) for r in sel])
            n = x.size
            mean = float(np.mean(x)) if n else float("nan")
            se = float(np.std(x, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
            out.append({"alpha": alpha, "label": alpha_label(alpha), "metric": label, "mean": mean, "stderr": se, "n": n})
    return out


def format_table(agg, alphas):
    labels = [alpha_label(a) for a in alphas]
    lines = ["| Metric | " + " | ".join(labels) + " |", "|---" * (len(labels) + 1) + "|"]
    for label, _ in TABLE_METRICS:
        cells = []
        for a in alphas:
            e = next(r for r in agg if r["alpha"] == a and r["metric"] == label)
            cells.append(f"{e['mean']:.2f} ± {e['stderr']:.2f}")
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def run_sweep(spec, out_dir, cfg=None, predictions=None, jitter=0.0, timing=False, jobs=1):
    """Run the (alpha x scenario x seed) grid; returns (long rows, aggregate rows)."""
    cfg = cfg or PlannerConfig.preset(spec.horizon)
    os.makedirs(out_dir, exist_ok=True)
    run_dir = os.path.join(out_dir, "runs")
    os.makedirs(run_dir, exist_ok=True)
    grid = [(path, a, s, cfg, predictions, jitter, timing, run_dir)
            for a in spec.alphas for path in spec.scenarios for s in spec.seeds]
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_run, grid))
    else:
        rows = [_sweep_run(job) for job in grid]
    agg = aggregate(rows, spec.alphas)
    _write_atomic(os.path.join(out_dir, "sweep_runs.csv"), _csv_text(rows, SWEEP_FIELDS))
    _write_atomic(os.path.join(out_dir, "sweep_aggregate.csv"),
                  _csv_text(agg, ("alpha", "label", "metric", "mean", "stderr", "n")))
    _write_atomic(os.path.join(out_dir, "sweep_table.md"), format_table(agg, spec.alphas))
    return rows, agg


def cmd_sweep(args):
    paths = sorted(glob.glob(args.scenarios)) if args.scenarios else bundled_scenarios()
    spec = SweepSpec(args.alphas, paths, args.horizon or "short", tuple(args.seeds))
    cfg = load_config(args.config, spec.horizon, args.p_coverage)
    rows, agg = run_sweep(spec, args.out, cfg, args.predictions, args.speed_jitter, args.timing, args.jobs)
    failed = [r for r in rows if r["status"] != "ok"]
    for r in failed:
        print(f"run failed: {r['id']} alpha={r['alpha']} seed={r['seed']}: {r['error']}", file=sys.stderr)
    print(format_table(agg, spec.alphas), end="")
    return 0


def prediction_metrics(records, k=5, seed=0, mode_means=False):
    """Mean and standard error of minADE_k, minFDE_k, NLL and entropy, plus aggregate ECE."""
    if not records:
        raise DomainError("prediction dump is empty")
    ade, fde, nll, ent, calib = [], [], [], [], []
    for i, (_, _, pred, truth) in enumerate(records):
        samples = mode_mean_trajectories(pred, k) if mode_means else sample_trajectories(pred, k, seed + i)
        a, f = min_ade_fde(samples, truth)
        ade.append(a)
        fde.append(f)
        nll.append(gmm_nll(pred, truth))
        ent.append(avg_entropy(pred))
        calib.extend(step_records(pred, truth))
    rows = []
    for name, vals in ((f"minADE{k}", ade), (f"minFDE{k}", fde), ("NLL", nll), ("Entropy", ent)):
        x = np.asarray(vals)
        se = float(np.std(x, ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0
        rows.append({"metric": name, "mean": float(np.mean(x)), "stderr": se})
    rows.append({"metric": "ECE", "mean": ece(calib), "stderr": ""})
    return rows


def cmd_pred_metrics(args):
    rows = prediction_metrics(load_prediction_dump(args.dump), args.samples, args.seed, args.mode_means)
    text = _csv_text(rows, ("metric", "mean", "stderr"))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_atomic(os.path.join(args.out, "pred_metrics.csv"), text)
    print(text, end="")
    return 0


def cmd_check_geometry(args):
    results = run_all(quick=args.quick)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    return 0 if all(r.passed for r in results) else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="uasmpc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, alpha=True):
        if alpha:
            p.add_argument("--alpha", type=parse_alpha, default=1.0, help="covariance scale factor (fractions allowed)")
        p.add_argument("--horizon", choices=sorted(HORIZON_PRESETS), default=None, help="horizon preset (default short)")
        p.add_argument("--p-coverage", type=float, default=None, help="per-step coverage level p")
        p.add_argument("--config", default=None, help="JSON file with PlannerConfig fields")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--predictions", default=None, help="prediction dump to replay instead of constant velocity")
        p.add_argument("--speed-jitter", type=float, default=0.0, help="std of agents' desired-speed noise (m/s)")
        p.add_argument("--timing", action="store_true", help="record solve times (outputs stop being byte-identical)")

    p = sub.add_parser("simulate", help="closed-loop rollout of one scenario")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int, default=0)
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="covariance-scaling sensitivity sweep")
    p.add_argument("--scenarios", default=None, help="glob of scenario files (default: bundled suite)")
    p.add_argument("--alphas", type=parse_alphas, default=list(SWEEP_ALPHAS))
    p.add_argument("--seeds", type=parse_seeds, default=[0])
    p.add_argument("--jobs", type=int, default=1)
    common(p, alpha=False)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("pred-metrics", help="forecast metrics of a prediction dump")
    p.add_argument("dump")
    p.add_argument("--samples", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode-means", action="store_true", help="use the top mode means instead of samples")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_pred_metrics)

    p = sub.add_parser("check-geometry", help="verify the keep-out geometry against oracles")
    p.add_argument("--quick", action="store_true")
    p.set_defaults(func=cmd_check_geometry)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DomainError, NumericError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
