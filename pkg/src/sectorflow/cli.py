"""Command-line pipeline: synth -> fit -> train -> generate -> evaluate -> report.

Every subcommand takes ``--config`` (YAML mapping of PipelineConfig fields),
``--seed`` and ``--out``.  Flags override the config file, which overrides
the built-in defaults.  ``SECTORFLOW_THREADS`` caps the worker processes
used for track fitting.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from . import data, evaluation, models, nn, trackfit

log = logging.getLogger("sectorflow")

PAIRS_FILE = "pairs.csv"
FIT_META_FILE = "fit_meta.json"
ROUTES_FILE = "routes.json"
REPORT_FILE = "report.csv"
GENERATED_HEADER = ["track_id", "route_id", "context_id", "sample_index", "point_index", "lat_deg", "lon_deg"]
MODEL_KINDS = {"linear": "linear", "de": "deep_ensemble", "bnn": "bnn_laplace"}


class PipelineError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    # paths
    tracks: Optional[str] = None
    plans: Optional[str] = None
    scenario: Optional[str] = None
    sector: Optional[str] = None
    pairs: Optional[str] = None
    model: Optional[str] = None
    report: Optional[str] = None
    generated: List[str] = field(default_factory=list)
    out: Optional[str] = None
    # synth
    n_flights: int = 1000
    # fit
    degree: int = 3
    budget: int = 5000
    restarts: int = 5
    resample_count: int = 50
    top_k: int = data.DEFAULT_TOP_K
    w: int = data.DEFAULT_W
    fraction: float = data.DEFAULT_FRACTION
    # train
    kind: str = "bnn"
    hidden_layers: Tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    epochs: int = 500
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    n_e: int = models.DEFAULT_ENSEMBLE_SIZE
    prior_precision: float = models.DEFAULT_PRIOR_PRECISION
    sigma_jitter: float = models.DEFAULT_JITTER_DEG
    # generate / evaluate
    samples_per_context: int = models.DEFAULT_SAMPLES
    half_width_nm: float = evaluation.DEFAULT_HALF_WIDTH_NM
    seed: int = 0

    def __post_init__(self):
        self.hidden_layers = tuple(int(h) for h in self.hidden_layers)
        if self.samples_per_context < 1:
            raise PipelineError("samples_per_context must be >= 1")
        if self.kind not in MODEL_KINDS:
            raise PipelineError(f"kind must be one of {sorted(MODEL_KINDS)}")

    def fit_config(self) -> trackfit.FitConfig:
        return trackfit.FitConfig(
            degree=self.degree,
            resample_count=self.resample_count,
            budget=self.budget,
            restarts=self.restarts,
            seed=self.seed,
        )

    def train_config(self) -> nn.TrainConfig:
        return nn.TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            seed=self.seed,
        )

    def require(self, *names):
        for name in names:
            value = getattr(self, name)
            if value is None:
                raise PipelineError(f"--{name.replace('_', '-')} is required")
            if name != "out" and not Path(value).exists():
                raise PipelineError(f"{name} path does not exist: {value}")


def load_config(path: Optional[str], overrides: Dict) -> PipelineConfig:
    """Defaults, then the YAML file, then non-None overrides."""
    values = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise PipelineError(f"config {path} must be a mapping")
        known = {f.name for f in dataclasses.fields(PipelineConfig)}
        unknown = sorted(set(loaded) - known)
        if unknown:
            raise PipelineError(f"unknown config keys: {', '.join(unknown)}")
        values.update(loaded)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig(**values)


def _threads() -> int:
    raw = os.environ.get("SECTORFLOW_THREADS")
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise PipelineError(f"SECTORFLOW_THREADS must be an integer, got {raw!r}")


def _fmt(v: float) -> str:
    return repr(float(v))


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(rows)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------- synth


def cmd_synth(cfg: PipelineConfig) -> Path:
    cfg.require("out")
    scenario_path = cfg.scenario or data.default_scenario_path()
    if not Path(scenario_path).exists():
        raise PipelineError(f"scenario path does not exist: {scenario_path}")
    scenario = data.Scenario.load(scenario_path)
    records, sector = data.synth_sector(scenario, cfg.n_flights, cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    data.write_tracks(records, out / "tracks.csv")
    data.write_plans(records, out / "plans.csv")
    _write_json(out / "sector.json", sector.to_dict())
    log.info("wrote %d flights to %s", len(records), out)
    return out


# ----------------------------------------------------------------------- fit


def _fit_one(job):
    track, fcfg, penalized = job
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", trackfit.FitBudgetWarning)
        try:
            res = trackfit.fit(track, fcfg, penalized)
        except trackfit.DegenerateTrackError as exc:
            return None, str(exc), False
    hit_budget = any(issubclass(w.category, trackfit.FitBudgetWarning) for w in caught)
    return res, None, hit_budget


def _fit_all(jobs: Sequence, threads: int) -> List:
    if threads <= 1 or len(jobs) < 2:
        return [_fit_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_fit_one, jobs, chunksize=max(1, len(jobs) // (4 * threads))))


def _pairs_rows(split_name: str, ps: data.PairSet, records, fits):
    for fid, rid, x, y in zip(ps.flight_ids, ps.route_ids, ps.x, ps.y):
        f = fits[fid]
        yield [fid, rid, split_name, _fmt(records[fid].entry_fl), _fmt(f.misfit), _fmt(f.turn_deg)] + [
            _fmt(v) for v in x
        ] + [_fmt(v) for v in y]


def cmd_fit(cfg: PipelineConfig) -> Path:
    """Group routes, fit every grouped flight, calibrate the turn penalty, write pairs."""
    cfg.require("tracks", "plans", "out")
    records = data.ingest(cfg.tracks, cfg.plans)
    groups = data.group_routes(records, cfg.top_k)
    members = {r.flight_id: r for g in groups for r in g.members}
    ids = sorted(members)
    train_ids, _ = data.split_ids(ids, cfg.fraction, cfg.seed) if len(ids) >= 2 else (ids, [])
    fcfg = cfg.fit_config()
    threads = _threads()

    skipped: Dict[str, str] = {}
    budget_hits = 0
    raw = _fit_all([(members[i].track, fcfg, False) for i in ids], threads)
    free: Dict[str, trackfit.FitResult] = {}
    for fid, (res, err, hit) in zip(ids, raw):
        if res is None:
            skipped[fid] = err
            continue
        free[fid] = res
        budget_hits += hit

    train_fits = [free[i] for i in train_ids if i in free]
    if not train_fits:
        raise PipelineError("no training flight could be fitted")
    lam, phi_u = trackfit.calibrate_from_fits([f.misfit for f in train_fits], [f.turn_deg for f in train_fits])
    pcfg = trackfit.with_penalty(fcfg, lam, phi_u)

    # The penalty only changes the objective where the turn exceeds phi_u,
    # so fits already below it are optimal for the penalised cost too.
    redo = [i for i in ids if i in free and free[i].turn_deg > phi_u]
    fits = dict(free)
    for fid, (res, err, hit) in zip(redo, _fit_all([(members[i].track, pcfg, True) for i in redo], threads)):
        if res is None:
            skipped[fid] = err
            fits.pop(fid, None)
            continue
        fits[fid] = res
        budget_hits += hit

    split = data.build_pairs(groups, fits, cfg.w, cfg.fraction, cfg.seed) if len(ids) >= 2 else None
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    k = 3 + 2 * cfg.w
    header = ["flight_id", "route_id", "split", "entry_fl", "misfit", "turn_deg"]
    header += [f"x{i}" for i in range(k)] + [f"y{i}" for i in range(2 * cfg.degree)]
    rows = []
    if split is not None:
        rows += list(_pairs_rows("train", split.train, members, fits))
        rows += list(_pairs_rows("test", split.test, members, fits))
    _write_csv(out / PAIRS_FILE, header, rows)
    _write_json(
        out / FIT_META_FILE,
        {
            "lambda": lam,
            "phi_u_deg": phi_u,
            "degree": cfg.degree,
            "w": cfg.w,
            "fraction": cfg.fraction,
            "seed": cfg.seed,
            "budget": cfg.budget,
            "restarts": cfg.restarts,
            "n_grouped": len(ids),
            "n_train": len(split.train) if split else len(ids),
            "n_test": len(split.test) if split else 0,
            "n_refit_penalised": len(redo),
            "n_budget_exhausted": budget_hits,
            "skipped": skipped,
        },
    )
    _write_json(out / ROUTES_FILE, {g.route_id: {"plan": g.plan.tolist(), "n_members": len(g.members)} for g in groups})
    if skipped:
        print(f"fit: skipped {len(skipped)} flight(s): {', '.join(sorted(skipped))}", file=sys.stderr)
    if budget_hits:
        print(f"fit: {budget_hits} fit(s) stopped at the evaluation budget", file=sys.stderr)
    return out


def read_pairs(path) -> Dict[str, dict]:
    """Pairs file by split: {"train": {...}, "test": {...}} with ids, route ids, x, y."""
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header is None or header[:3] != ["flight_id", "route_id", "split"]:
            raise PipelineError(f"{path}: not a pairs file")
        xi = [i for i, h in enumerate(header) if h.startswith("x")]
        yi = [i for i, h in enumerate(header) if h.startswith("y")]
        out = {s: {"flight_ids": [], "route_ids": [], "x": [], "y": []} for s in ("train", "test")}
        for lineno, row in enumerate(rd, start=2):
            if row[2] not in out:
                raise PipelineError(f"{path}:{lineno}: unknown split {row[2]!r}")
            part = out[row[2]]
            part["flight_ids"].append(row[0])
            part["route_ids"].append(row[1])
            part["x"].append([float(row[i]) for i in xi])
            part["y"].append([float(row[i]) for i in yi])
    for part in out.values():
        part["x"] = np.array(part["x"], dtype=float).reshape(len(part["flight_ids"]), len(xi))
        part["y"] = np.array(part["y"], dtype=float).reshape(len(part["flight_ids"]), len(yi))
    return out


# --------------------------------------------------------------------- train


def cmd_train(cfg: PipelineConfig) -> Path:
    cfg.require("pairs", "out")
    train = read_pairs(cfg.pairs)["train"]
    x, y = train["x"], train["y"]
    degree = y.shape[1] // 2
    kind = MODEL_KINDS[cfg.kind]
    if kind == "linear":
        model = models.LinearModel(degree, cfg.sigma_jitter)
    else:
        if len(x) < 2:
            raise PipelineError("need at least two training pairs")
        tcfg = cfg.train_config()
        head = "gaussian" if kind == "deep_ensemble" else "point"
        spec = nn.NetworkSpec(x.shape[1], y.shape[1], cfg.hidden_layers, cfg.activation, head)
        try:
            if kind == "deep_ensemble":
                model = models.DeepEnsembleModel.train(x, y, spec, tcfg, cfg.n_e)
            else:
                model = models.LaplaceModel.train(x, y, spec, tcfg, cfg.prior_precision)
        except nn.TrainingError as exc:
            raise PipelineError(f"training diverged: {exc}") from exc
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    models.save_model(model, out)
    return out


# ------------------------------------------------------------------ generate


def generate_tracks(model: models.GenerativeModel, contexts, n: int, seed: int):
    """Per context, ``n`` sampled tracks resampled to polylines; yields (context index, sample, points)."""
    for j, xi in enumerate(contexts):
        tracks = model.sample(xi, n, seed=np.random.SeedSequence([seed, j]))
        for s, pt in enumerate(tracks):
            yield j, s, pt.sample(evaluation.GENERATED_POINTS)


def cmd_generate(cfg: PipelineConfig) -> Path:
    cfg.require("model", "pairs", "out")
    model = models.load_model(cfg.model)
    test = read_pairs(cfg.pairs)["test"]
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(GENERATED_HEADER)
        for j, s, poly in generate_tracks(model, test["x"], cfg.samples_per_context, cfg.seed):
            fid, rid = test["flight_ids"][j], test["route_ids"][j]
            tid = f"{fid}:{s}"
            for p, (lat, lon) in enumerate(poly):
                wr.writerow([tid, rid, fid, s, p, _fmt(lat), _fmt(lon)])
    return out


def read_generated(path) -> Dict[str, List[np.ndarray]]:
    """Generated polylines grouped by route, in file order."""
    by_track: Dict[str, list] = {}
    route_of: Dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header != GENERATED_HEADER:
            raise PipelineError(f"{path}: not a generated-tracks file")
        for row in rd:
            by_track.setdefault(row[0], []).append((float(row[5]), float(row[6])))
            route_of[row[0]] = row[1]
    out: Dict[str, List[np.ndarray]] = {}
    for tid, pts in by_track.items():
        out.setdefault(route_of[tid], []).append(np.array(pts))
    return out


# ------------------------------------------------------------------ evaluate


def _named_paths(items: Sequence[str]) -> List[Tuple[str, str]]:
    out = []
    for item in items:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise PipelineError(f"--generated expects NAME=PATH, got {item!r}")
        if not Path(path).exists():
            raise PipelineError(f"generated path does not exist: {path}")
        out.append((name, path))
    return out


def _route_sort_key(rid: str):
    return (0, int(rid), rid) if rid.isdigit() else (1, 0, rid)


def cmd_evaluate(cfg: PipelineConfig) -> Path:
    cfg.require("tracks", "plans", "pairs", "sector", "out")
    sources = _named_paths(cfg.generated)
    if not sources:
        raise PipelineError("at least one --generated NAME=PATH is required")
    records = {r.flight_id: r for r in data.ingest(cfg.tracks, cfg.plans)}
    with open(cfg.sector, encoding="utf-8") as fh:
        sector = data.SectorGeometry.from_dict(json.load(fh))
    test = read_pairs(cfg.pairs)["test"]
    test_by_route: Dict[str, List[str]] = {}
    for fid, rid in zip(test["flight_ids"], test["route_ids"]):
        if fid not in records:
            raise PipelineError(f"test flight {fid} missing from {cfg.tracks}")
        test_by_route.setdefault(rid, []).append(fid)
    generated = {name: read_generated(path) for name, path in sources}

    out = Path(cfg.out)
    (out / "kde").mkdir(parents=True, exist_ok=True)
    rows = []
    problems = []
    for rid in sorted(test_by_route, key=_route_sort_key):
        fids = test_by_route[rid]
        plane = evaluation.build_plane(records[fids[0]].flight_plan, sector, cfg.half_width_nm)
        test_rec, _ = evaluation.crossing_stats((records[f].track.points for f in fids), plane, rid)
        results = {}
        samples = {"test": test_rec}
        for name, _ in sources:
            gen_rec, rate = evaluation.crossing_stats(generated[name].get(rid, []), plane, rid)
            samples[name] = gen_rec
            try:
                results[name] = evaluation.compare_route(test_rec, gen_rec, rid, rate)
            except evaluation.EmptySampleError as exc:
                problems.append(f"{name}: {exc}")
                results[name] = evaluation.RouteComparison(rid, *([math.nan] * 4), crossing_rate=rate)
        for metric in evaluation.METRICS:
            rows.append([rid, metric] + [_fmt(results[name].metric(metric)) for name, _ in sources])
        _export_kde(out / "kde", rid, samples)
    _write_csv(out / REPORT_FILE, ["route_id", "metric"] + [name for name, _ in sources], rows)
    for p in problems:
        print(f"evaluate: {p}", file=sys.stderr)
    return out / REPORT_FILE


def _export_kde(folder: Path, rid: str, samples: Dict[str, list]):
    for stat, attr in (("dh", "d_h"), ("sinphi", "sin_phi")):
        values = {k: np.array([getattr(r, attr) for r in v]) for k, v in samples.items() if len(v) >= 2}
        if not values:
            continue
        grid = evaluation.kde_grid(list(values.values()))
        for source, v in values.items():
            dens = evaluation.kde(v, grid)
            _write_csv(folder / f"route_{rid}_{stat}_{source}.csv", ["x", "density"], zip(map(_fmt, grid), map(_fmt, dens)))


# -------------------------------------------------------------------- report


def read_report(path) -> Tuple[List[str], Dict[str, Dict[str, Dict[str, float]]]]:
    """(model names, {route: {metric: {model: value}}})."""
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header is None or header[:2] != ["route_id", "metric"]:
            raise PipelineError(f"{path}: not a report file")
        names = header[2:]
        table: Dict[str, Dict[str, Dict[str, float]]] = {}
        for row in rd:
            table.setdefault(row[0], {})[row[1]] = dict(zip(names, map(float, row[2:])))
    return names, table


def median_by_model(names, table, metric: str) -> Dict[str, float]:
    out = {}
    for name in names:
        vals = [table[r][metric][name] for r in table if metric in table[r]]
        vals = [v for v in vals if not math.isnan(v)]
        out[name] = float(np.median(vals)) if vals else math.nan
    return out


def format_report(names, table) -> str:
    lines = []
    for title, metrics in (
        ("KS distance", ("ks_dh", "ks_sinphi")),
        ("Percentage error in the mean", ("dmean_dh_pct", "dmean_sinphi_pct")),
    ):
        lines.append(title)
        cols = [f"{m}:{n}" for m in metrics for n in names]
        lines.append("route  " + "  ".join(f"{c:>16}" for c in cols))
        for rid in sorted(table, key=_route_sort_key):
            vals = [table[rid].get(m, {}).get(n, math.nan) for m in metrics for n in names]
            lines.append(f"{rid:<5}  " + "  ".join(f"{v:16.4f}" for v in vals))
        med = [median_by_model(names, table, m)[n] for m in metrics for n in names]
        lines.append("median " + "  ".join(f"{v:16.4f}" for v in med))
        lines.append("")
    return "\n".join(lines)


def cmd_report(cfg: PipelineConfig) -> str:
    cfg.require("report")
    names, table = read_report(cfg.report)
    text = format_report(names, table)
    print(text)
    return text


# ----------------------------------------------------------------------- CLI


COMMANDS = {
    "synth": cmd_synth,
    "fit": cmd_fit,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def _int_list(s: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file of pipeline settings")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (file for train/generate)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sectorflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="sample a synthetic sector")
    s.add_argument("--scenario")
    s.add_argument("--n-flights", type=int)

    f = sub.add_parser("fit", parents=[common], help="fit piecewise tracks and write training pairs")
    f.add_argument("--tracks")
    f.add_argument("--plans")
    f.add_argument("--degree", type=int)
    f.add_argument("--budget", type=int)
    f.add_argument("--restarts", type=int)
    f.add_argument("--resample-count", type=int)
    f.add_argument("--top-k", type=int)
    f.add_argument("--w", type=int)
    f.add_argument("--fraction", type=float)

    t = sub.add_parser("train", parents=[common], help="train a generative model")
    t.add_argument("--pairs")
    t.add_argument("--kind", choices=sorted(MODEL_KINDS))
    t.add_argument("--hidden-layers", type=_int_list, help="comma-separated widths")
    t.add_argument("--activation", choices=nn.ACTIVATIONS)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--n-e", type=int)
    t.add_argument("--prior-precision", type=float)
    t.add_argument("--sigma-jitter", type=float)

    g = sub.add_parser("generate", parents=[common], help="sample tracks for the test contexts")
    g.add_argument("--model")
    g.add_argument("--pairs")
    g.add_argument("--samples-per-context", "-n", type=int)

    e = sub.add_parser("evaluate", parents=[common], help="compare generated and test tracks per route")
    e.add_argument("--tracks")
    e.add_argument("--plans")
    e.add_argument("--pairs")
    e.add_argument("--sector")
    e.add_argument("--generated", action="append", metavar="NAME=PATH")
    e.add_argument("--half-width-nm", type=float)

    r = sub.add_parser("report", parents=[common], help="print a report as tables")
    r.add_argument("--report")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        cfg = load_config(args.config, overrides)
        COMMANDS[args.command](cfg)
    except (PipelineError, data.IngestError, data.ScenarioError, models.ModelFormatError, OSError, ValueError) as exc:
        print(f"sectorflow {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
