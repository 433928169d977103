"""Command-line entry point: ``otguide {gen,solve,eval,train}``.

Exit codes: 0 success, 2 input or I/O error, 3 solver non-convergence,
4 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .core import (
    ConvergenceError,
    DiscreteMeasure,
    OTGuideError,
    TransportPlan,
    load_measure,
)
from .costs import CostSpec, cost_matrix
from .datagen import gen_attributed_clusters, gen_interval, gen_vertical_lines, load_images, write_dataset
from .mapping import (
    DeterministicMap,
    mismatching_degree,
    nearest_index,
    nearest_neighbor_map,
    random_bijection,
    solve_plan,
)
from .trainer import (
    ConfigError,
    FeatureMap,
    TrainConfig,
    TrainingDiverged,
    precompute_references,
    train,
)

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_DIVERGED = 0, 2, 3, 4


class InputError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    input_hashes: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    version: str = __version__
    extra: dict = field(default_factory=dict)


def _atomic_write(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        tmp.write_text(data)
    else:
        tmp.write_bytes(data)
    os.replace(tmp, path)


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(path: Path, manifest: RunManifest, started: float) -> None:
    manifest.wall_clock_seconds = round(time.perf_counter() - started, 6)
    _atomic_write(path, json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")


def _read_json_arg(value: str, what: str):
    """A JSON document given inline or as a path to a file."""
    text = value
    if not value.lstrip().startswith("{"):
        p = Path(value)
        if not p.exists():
            raise InputError(f"{what}: no such file {value}")
        text = p.read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{what}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def _load_measure(path: str, what: str) -> DiscreteMeasure:
    if not Path(path).exists():
        raise InputError(f"{what}: no such file {path}")
    return load_measure(path)


def _cost_inputs(args):
    mu = _load_measure(args.mu, "--mu")
    nu = _load_measure(args.nu, "--nu")
    try:
        spec = CostSpec.from_json(_read_json_arg(args.cost, "--cost"))
    except (ValueError, TypeError) as exc:
        raise InputError(f"--cost: {exc}") from None
    images = None
    if spec.kind == "histogram_wasserstein":
        images = {**load_images(args.mu, mu), **load_images(args.nu, nu)}
    hashes = {"mu": _sha256(Path(args.mu)), "nu": _sha256(Path(args.nu))}
    return mu, nu, spec, images, hashes


# --- gen ---------------------------------------------------------------------

def cmd_gen(args) -> int:
    started = time.perf_counter()
    out = Path(args.out)
    params = {k: v for k, v in vars(args).items() if k not in ("func", "out", "command")}
    header = {"generator": args.kind, "params": params}
    images = None
    if args.kind == "lines":
        images, measure = gen_vertical_lines(args.n, args.size, args.style)
    elif args.kind == "interval":
        measure = gen_interval(args.lo, args.hi, args.n, prefix=args.prefix)
    else:
        measure = gen_attributed_clusters(
            args.n, args.d, args.angle_law, args.color_law, args.seed,
            noise=args.noise, offset=args.offset, prefix=args.prefix,
        )
    written = write_dataset(out, measure, images, header)
    manifest = RunManifest(f"gen {args.kind}", params, outputs=sorted(p.name for p in written))
    _write_manifest(out / "manifest.json", manifest, started)
    print(f"wrote {measure.n} points to {out / 'dataset.jsonl'}")
    return EXIT_OK


# --- solve -------------------------------------------------------------------

def cmd_solve(args) -> int:
    started = time.perf_counter()
    mu, nu, spec, images, hashes = _cost_inputs(args)
    cost = cost_matrix(mu, nu, spec, images=images)
    result = solve_plan(mu, nu, cost, args.method, args.epsilon, args.max_iter)
    out = Path(args.out)
    duals = result.dual_potentials if args.method == "exact" else None
    doc = result.plan.to_json(duals=duals, objective=result.objective,
                              converged=result.converged, iterations=result.iterations)
    _atomic_write(out, json.dumps(doc, sort_keys=True) + "\n")
    manifest = RunManifest(
        "solve",
        {"cost": spec.to_json(), "method": args.method, "epsilon": args.epsilon, "max_iter": args.max_iter},
        hashes, [out.name], extra={"objective": result.objective, "converged": result.converged},
    )
    _write_manifest(out.with_name(out.name + ".manifest.json"), manifest, started)
    print(f"objective {result.objective:.6f}")
    if not result.converged:
        print(f"error: solver did not converge after {result.iterations} iterations", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


# --- eval --------------------------------------------------------------------

def _resolve_mapping(source: str, mu, nu, cost):
    """Return (method label, mapping object, is_coupling)."""
    if source == "nn":
        nn = nearest_neighbor_map(mu, nu, cost)
        if nn.image_size < min(mu.n, nu.n):
            print(
                f"warning: nearest-neighbour map collapses {mu.n} sources onto "
                f"{nn.image_size} target(s)",
                file=sys.stderr,
            )
        return "nn", nn, nn.bijective
    if source.startswith("random:"):
        try:
            seed = int(source.split(":", 1)[1])
        except ValueError:
            raise InputError(f"--mapping: bad seed in {source!r}") from None
        if mu.n != nu.n:
            raise InputError("--mapping random:<seed> needs datasets of equal size")
        return source, random_bijection(mu.n, seed), True
    doc = _read_json_arg(source, "--mapping")
    if "entries" in doc:
        plan = TransportPlan.from_json(doc)
        if plan.shape != (mu.n, nu.n):
            raise InputError(f"--mapping: plan is {plan.shape}, datasets are {mu.n}x{nu.n}")
        return "plan", plan, True
    if "generator" in doc:
        return "generator", FeatureMap.from_json(doc), False
    raise InputError("--mapping: file is neither a plan nor a generator checkpoint")


def cmd_eval(args) -> int:
    started = time.perf_counter()
    mu, nu, spec, images, hashes = _cost_inputs(args)
    cost = cost_matrix(mu, nu, spec, images=images)
    label, mapping, coupling = _resolve_mapping(args.mapping, mu, nu, cost)
    s = mismatching_degree(mapping, mu, nu, cost)

    rows = [(label, s, coupling)]
    optimum = solve_plan(mu, nu, cost, "exact")
    rows.append(("ot_exact", optimum.objective, True))
    if mu.n == nu.n and not label.startswith("random:"):
        rows.append((f"random:{args.seed}", mismatching_degree(random_bijection(mu.n, args.seed), mu, nu, cost), True))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "S", "coupling"))
    for name, value, is_coupling in rows:
        w.writerow((name, repr(float(value)), "true" if is_coupling else "false"))
    out = Path(args.out)
    _atomic_write(out, buf.getvalue())
    # A mapping file is identified by content, like the datasets, so the manifest
    # does not depend on where the file happens to live.
    mapping_arg = args.mapping
    if label in ("plan", "generator"):
        raw = args.mapping
        inline = raw.lstrip().startswith("{")
        hashes["mapping"] = hashlib.sha256(raw.encode()).hexdigest() if inline else _sha256(Path(raw))
        mapping_arg = label
    manifest = RunManifest("eval", {"cost": spec.to_json(), "mapping": mapping_arg, "seed": args.seed},
                           hashes, [out.name], extra={"S": s})
    _write_manifest(out.with_name(out.name + ".manifest.json"), manifest, started)
    print(f"S {s:.6f}")
    return EXIT_OK


# --- train -------------------------------------------------------------------

def _attribute_values(measure: DiscreteMeasure) -> tuple[str, np.ndarray]:
    if all(a.angle is not None for a in measure.attrs):
        return "angle", np.array([a.angle for a in measure.attrs])
    return "feature0", measure.points[:, 0].copy()


def _deviation(a: np.ndarray, b: np.ndarray, kind: str) -> np.ndarray:
    d = np.abs(a - b)
    return np.minimum(d, 360.0 - d) if kind == "angle" else d


def mapping_curve_svg(src: np.ndarray, mapped: np.ndarray, label: str) -> str:
    """Scatter of source vs mapped attribute with the identity line."""
    size, pad = 400, 40
    lo = float(min(src.min(), mapped.min()))
    hi = float(max(src.max(), mapped.max()))
    span = hi - lo or 1.0

    def px(v):
        return pad + (v - lo) / span * (size - 2 * pad)

    def py(v):
        return size - px(v)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<line x1="{pad}" y1="{size - pad}" x2="{size - pad}" y2="{size - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{size - pad}" x2="{pad}" y2="{pad}" stroke="black"/>',
        f'<line x1="{px(lo):.2f}" y1="{py(lo):.2f}" x2="{px(hi):.2f}" y2="{py(hi):.2f}" '
        'stroke="gray" stroke-dasharray="4 4"/>',
        f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">source {label}</text>',
        f'<text x="12" y="{size / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 12 {size / 2})">mapped {label}</text>',
    ]
    for s, m in zip(src, mapped):
        parts.append(f'<circle cx="{px(s):.2f}" cy="{py(m):.2f}" r="3" fill="steelblue"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _train_one(mu, nu, refs, config, cost, out: Path) -> tuple[dict, list[str]]:
    written = []

    def put(name, data):
        _atomic_write(out / name, data)
        written.append(name)

    try:
        report = train(mu, nu, refs, config, eval_cost=cost)
    except TrainingDiverged as exc:
        put("checkpoint.json", json.dumps(exc.checkpoint, sort_keys=True) + "\n")
        if exc.report is not None:
            put("report.csv", exc.report.to_csv())
        raise
    put("report.csv", report.to_csv())
    put("checkpoint.json", json.dumps(report.checkpoint(), sort_keys=True) + "\n")
    put("g_uv.json", json.dumps(report.map_uv().to_json(), sort_keys=True) + "\n")
    put("g_vu.json", json.dumps(report.map_vu().to_json(), sort_keys=True) + "\n")

    kind, src = _attribute_values(mu)
    _, tgt = _attribute_values(nu)
    mapped = tgt[nearest_index(report.map_uv()(mu.points), nu)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("source_attr", "mapped_attr"))
    for s, m in zip(src, mapped):
        w.writerow((repr(float(s)), repr(float(m))))
    put("mapping_curve.csv", buf.getvalue())
    put("mapping_curve.svg", mapping_curve_svg(src, mapped, kind))

    from scipy.stats import kendalltau

    tau = kendalltau(src, mapped).statistic
    summary = {
        "lambda_ref": config.lambda_ref,
        "seed": config.seed,
        "S_uv": report.series["mismatch_uv"][-1],
        "S_vu": report.series["mismatch_vu"][-1],
        "max_attribute_deviation": float(_deviation(src, mapped, kind).max()),
        "kendall_tau": None if tau is None or math.isnan(tau) else float(tau),
    }
    return summary, written


def _parse_lambda_list(text: str) -> list[float]:
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InputError(f"--lambda-ref: cannot parse {text!r}") from None
    if not values or any(v < 0 or not math.isfinite(v) for v in values):
        raise InputError("--lambda-ref: need one or more finite values >= 0")
    return values


def cmd_train(args) -> int:
    started = time.perf_counter()
    mu, nu, spec, images, hashes = _cost_inputs(args)
    doc = _read_json_arg(args.config, "--config") if args.config else {}
    try:
        config = TrainConfig.from_json(doc)
        if args.seed is not None:
            config = replace(config, seed=args.seed)
    except ConfigError as exc:
        raise InputError(f"--config: invalid field {exc}") from None
    except TypeError as exc:
        raise InputError(f"--config: {exc}") from None
    if args.config and Path(args.config).exists():
        hashes["config"] = _sha256(Path(args.config))

    out = Path(args.out)
    cost = cost_matrix(mu, nu, spec, images=images)
    refs = precompute_references(mu, nu, spec, cache_dir=out / "cache", images=images)
    _atomic_write(out / "refs.jsonl", refs.to_jsonl())
    outputs = ["refs.jsonl"]

    lambdas = _parse_lambda_list(args.lambda_ref) if args.lambda_ref else None
    runs = []
    status = EXIT_OK
    try:
        if lambdas is None:
            summary, written = _train_one(mu, nu, refs, config, cost, out)
            runs.append(summary)
            outputs += written
        else:
            for k, lam in enumerate(lambdas):
                run_cfg = replace(config, lambda_ref=lam, seed=config.seed + k)
                sub = f"lambda_ref_{lam:g}"
                summary, written = _train_one(mu, nu, refs, run_cfg, cost, out / sub)
                runs.append(summary)
                outputs += [f"{sub}/{name}" for name in written]
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(("lambda_ref", "seed", "S_uv", "S_vu"))
            for r in runs:
                w.writerow((repr(r["lambda_ref"]), r["seed"], repr(r["S_uv"]), repr(r["S_vu"])))
            _atomic_write(out / "sweep.csv", buf.getvalue())
            outputs.append("sweep.csv")
    except TrainingDiverged as exc:
        print(f"error: {exc}; last checkpoint kept in {out}", file=sys.stderr)
        status = EXIT_DIVERGED
    manifest = RunManifest("train", {"cost": spec.to_json(), "train": config.to_json(),
                                     "lambda_ref_grid": lambdas},
                           hashes, outputs, extra={"runs": runs})
    _write_manifest(out / "manifest.json", manifest, started)
    for r in runs:
        print(f"lambda_ref {r['lambda_ref']:g}: S_uv {r['S_uv']:.6f} S_vu {r['S_vu']:.6f}")
    return status


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="otguide", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset")
    gsub = gen.add_subparsers(dest="kind", required=True)
    lines = gsub.add_parser("lines", help="vertical-line images")
    lines.add_argument("--n", type=int, default=32)
    lines.add_argument("--size", type=int, default=64)
    lines.add_argument("--style", choices=("A", "B"), default="A")
    interval = gsub.add_parser("interval", help="equally spaced points on an interval")
    interval.add_argument("--lo", type=float, required=True)
    interval.add_argument("--hi", type=float, required=True)
    interval.add_argument("--n", type=int, required=True)
    interval.add_argument("--prefix", default="x")
    clusters = gsub.add_parser("clusters", help="points with angle and colour attributes")
    clusters.add_argument("--n", type=int, default=128)
    clusters.add_argument("--d", type=int, default=4)
    clusters.add_argument("--angle-law", default="uniform")
    clusters.add_argument("--color-law", default="uniform")
    clusters.add_argument("--noise", type=float, default=0.05)
    clusters.add_argument("--offset", type=float, default=0.0)
    clusters.add_argument("--prefix", default="p")
    clusters.add_argument("--seed", type=int, default=0)
    for g in (lines, interval, clusters):
        g.add_argument("--out", required=True)
        g.set_defaults(func=cmd_gen)

    def measures(sp):
        sp.add_argument("--mu", required=True, help="source dataset (JSONL)")
        sp.add_argument("--nu", required=True, help="target dataset (JSONL)")
        sp.add_argument("--cost", required=True, help="cost spec as inline JSON or a path")
        sp.add_argument("--out", required=True)

    solve = sub.add_parser("solve", help="solve the transport problem")
    measures(solve)
    solve.add_argument("--method", choices=("exact", "sinkhorn"), default="exact")
    solve.add_argument("--epsilon", type=float, default=None)
    solve.add_argument("--max-iter", type=int, default=None, help="Sinkhorn iteration cap (default 100000)")
    solve.set_defaults(func=cmd_solve)

    ev = sub.add_parser("eval", help="mismatching degree of a mapping against baselines")
    measures(ev)
    ev.add_argument("--mapping", required=True, help="plan file, generator checkpoint, 'nn' or 'random:<seed>'")
    ev.add_argument("--seed", type=int, default=0)
    ev.set_defaults(func=cmd_eval)

    tr = sub.add_parser("train", help="train the OT-guided mapping")
    measures(tr)
    tr.add_argument("--config", default=None, help="training config as inline JSON or a path")
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--lambda-ref", default=None, help="comma-separated reference weights for a sweep")
    tr.set_defaults(func=cmd_train)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OTGuideError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
