"""Command-line front end.

Every subcommand reads options from flags and, optionally, from a plain
``key = value`` file given with ``--config``; flags win. CSV outputs start
with a ``#``-prefixed metadata block (tool version, seed, config hash).
Exit status: 0 success, 1 fatal input error, 2 partial result.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Sequence

from . import __version__
from .clustering import (
    DEFAULT_RESTARTS,
    build_features,
    fit_per_pattern,
    label_patterns,
    read_assignments,
    scan,
    stage_seed,
    kmeans_cosine,
    write_assignments,
    write_scan,
)
from .errors import WorkfluxError
from .geo import (
    EARTH_DIAMETER_KM,
    METRICS,
    geo_cost_matrix,
    load_city_attributes,
    load_cost_table,
    write_city_attributes,
    write_cost_table,
)
from .gravity import FAMILIES, Family, compare_models, write_fit_table, write_prediction
from .indices import (
    PATTERNS,
    PatternedFlux,
    all_development_indices,
    all_province_ratios,
    correlate_pairs,
    correlate_provinces,
    gdp_match_curve,
    load_pair_covariate,
    load_province_covariate,
    locality_curve,
    representative_cities,
    write_rows,
)
from .ingest import (
    TimeWindow,
    extract_flux,
    load_registry,
    parse_time,
    read_flux_csv,
    read_messages,
    write_flux_csv,
)
from .synth import planted_patterns, synthetic_dataset

log = logging.getLogger("workflux")

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2

# options that must not change output bytes
_HASH_EXCLUDED = {"config", "out", "workers", "command", "verbose"}

_DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "out": ".",
    "diameter_km": EARTH_DIAMETER_KM,
    "families": ",".join(f.value for f in FAMILIES),
    "metrics": ",".join(METRICS),
    "k_min": 2,
    "k_max": 8,
    "k": 4,
    "restarts": DEFAULT_RESTARTS,
    "kind": "gravity",
    "n_cities": 30,
    "n_pairs": 200,
    "n_per_group": 10,
    "representative": False,
}

_INPUT_FILES = ("messages", "registry", "cities", "travel_km", "travel_min", "geo_km",
                "directed_flux", "undirected_flux", "assignments", "covariate", "province_covariate")


class Run:
    """Resolved options plus output helpers for one subcommand invocation."""

    def __init__(self, ns: argparse.Namespace):
        self.opts = ns
        self.out = Path(ns.out)
        self.out.mkdir(parents=True, exist_ok=True)
        hashed = {k: v for k, v in sorted(vars(ns).items()) if k not in _HASH_EXCLUDED}
        self.extra: dict[str, object] = {}
        self.config_hash = hashlib.sha256(json.dumps(hashed, sort_keys=True, default=str).encode()).hexdigest()[:16]

    def metadata(self) -> dict[str, object]:
        return {"tool_version": __version__, "seed": self.opts.seed, "config_hash": self.config_hash,
                "command": self.opts.command, **self.extra}

    def write_csv(self, relpath: str, body: Callable, *args) -> Path:
        path = self.out / relpath
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            for key, value in self.metadata().items():
                fh.write(f"# {key}={value}\n")
            body(*args, fh)
        return path

    def write_json(self, relpath: str, payload: dict) -> Path:
        path = self.out / relpath
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"metadata": self.metadata(), **payload}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def _flux_paths(opts) -> tuple[Path | None, Path | None]:
    d = getattr(opts, "directed_flux", None)
    u = getattr(opts, "undirected_flux", None)
    if getattr(opts, "flux_dir", None):
        base = Path(opts.flux_dir)
        d = d or base / "flux_directed.csv"
        u = u or base / "flux_undirected.csv"
    return (Path(d) if d else None, Path(u) if u else None)


def _require(opts, *names: str) -> None:
    for name in names:
        if getattr(opts, name, None) is None:
            raise WorkfluxError(f"--{name.replace('_', '-')} is required")


def _load_costs(opts, cities, pairs=None) -> dict:
    costs = {"geo_km": None, "travel_km": None, "travel_min": None}
    if getattr(opts, "geo_km", None):
        costs["geo_km"] = load_cost_table(opts.geo_km, "geo_km")
    elif cities is not None:
        costs["geo_km"] = geo_cost_matrix(cities, pairs, opts.diameter_km)
    for metric in ("travel_km", "travel_min"):
        path = getattr(opts, metric, None)
        if path:
            costs[metric] = load_cost_table(path, metric)
    return costs


def cmd_extract(run: Run) -> int:
    opts = run.opts
    _require(opts, "messages")
    if opts.registry:
        registry = load_registry(opts.registry)
    elif opts.cities:
        registry = {cid: cid for cid in load_city_attributes(opts.cities)}
    else:
        raise WorkfluxError("extract needs --registry or --cities to resolve city codes")
    window = TimeWindow(
        parse_time(opts.window_start) if opts.window_start else None,
        parse_time(opts.window_end) if opts.window_end else None,
    )
    messages, rejects = read_messages(opts.messages, registry, window)
    result = extract_flux(messages, rejects, workers=opts.workers)
    run.write_csv("flux_directed.csv", write_flux_csv, result.directed)
    run.write_csv("flux_undirected.csv", write_flux_csv, result.undirected)
    run.write_json("extract_metadata.json", {
        "counts": result.summary(),
        "rejects": dict(rejects.counts),
        "window": {"start": window.start, "end": window.end},
    })
    for reason, n in rejects.counts.items():
        if n:
            log.warning("rejected %d rows: %s", n, reason)
    if not messages:
        log.warning("no usable messages; flux files are empty")
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_fit(run: Run) -> int:
    opts = run.opts
    _require(opts, "cities")
    cities = load_city_attributes(opts.cities)
    run.extra.update(diameter_km=opts.diameter_km, pvalue_method="normal")
    dpath, upath = _flux_paths(opts)
    directed = read_flux_csv(dpath) if dpath else None
    undirected = read_flux_csv(upath) if upath else (directed.undirected() if directed else None)
    if directed is None and undirected is None:
        raise WorkfluxError("fit needs --directed-flux, --undirected-flux or --flux-dir")
    pairs = set(undirected.entries) if undirected else None
    costs = _load_costs(opts, cities, pairs)
    families = [Family(f.strip()) for f in opts.families.split(",")]
    metrics = [m.strip() for m in opts.metrics.split(",")]
    cells = compare_models(directed, undirected, cities, costs, families, metrics)
    run.write_csv("fits.csv", write_fit_table, cells)
    for cell in cells:
        if cell.ok:
            run.write_csv(f"predictions/{cell.family.value}_{cell.metric}.csv", write_prediction, cell)
        else:
            log.warning("%s/%s failed: %s", cell.family.value, cell.metric, cell.error)
    return EXIT_OK if all(c.ok for c in cells) else EXIT_PARTIAL


def _write_indices(run: Run, pf: PatternedFlux, flux, cities, travel_time) -> None:
    di = all_development_indices(pf)
    run.write_csv("di.csv", write_rows, ("city_id", "di"), sorted(di.items()))
    ratios = all_province_ratios(pf)
    run.write_csv("province_patterns.csv", write_rows, ("province_id", "p1", "p2", "p3", "p4"),
                  [(p, *r) for p, r in sorted(ratios.items())])
    for city in sorted(flux.cities):
        try:
            curve = locality_curve(flux, travel_time, city)
        except WorkfluxError:
            continue
        run.write_csv(f"locality/{city}.csv", write_rows, ("r", "c"), curve)
    for city in sorted(flux.cities):
        if city not in cities:
            continue
        try:
            curve = gdp_match_curve(cities, travel_time, city)
        except WorkfluxError:
            continue
        run.write_csv(f"gdp_match/{city}.csv", write_rows, ("r", "l"), curve)
    if run.opts.representative:
        reps = representative_cities(pf)
        run.write_csv("representative_cities_heuristic.csv", write_rows, ("pattern", "cities"),
                      [(k, " ".join(v)) for k, v in reps.items()])


def _province_map(cities) -> dict[str, str]:
    return {cid: c.province_id for cid, c in cities.items()}


def cmd_cluster(run: Run) -> int:
    opts = run.opts
    _require(opts, "cities", "travel_min")
    cities = load_city_attributes(opts.cities)
    _, upath = _flux_paths(opts)
    if upath is None:
        raise WorkfluxError("cluster needs --undirected-flux or --flux-dir")
    flux = read_flux_csv(upath).undirected()
    travel_time = load_cost_table(opts.travel_min, "travel_min")
    features = build_features(flux, cities, travel_time)
    log.info("features: %d pairs, excluded %s", len(features), features.excluded)

    points = scan(features, range(opts.k_min, opts.k_max + 1), seed=opts.seed,
                  n_init=opts.restarts, workers=opts.workers)
    run.write_csv("silhouette.csv", write_scan, [(p.k, p.silhouette) for p in points])
    run.write_csv("elbow.csv", write_scan, [(p.k, p.criterion) for p in points])

    model = next((p.model for p in points if p.k == opts.k), None)
    if model is None:
        model = kmeans_cosine(features, opts.k, seed=stage_seed(opts.seed, opts.k),
                              n_init=opts.restarts, workers=opts.workers)
    if opts.k != 4:
        run.write_csv("assignments.csv", write_assignments, model, None)
        log.warning("pattern labels, per-pattern fits and indices need k=4; skipped for k=%d", opts.k)
        return EXIT_PARTIAL

    labeling = label_patterns(model, features)
    run.write_csv("assignments.csv", write_assignments, model, labeling)
    run.write_csv("patterns.csv", write_rows,
                  ("pattern_label", "cluster", "size", "mean_flux", "flux_share", "mean_travel_time", "mean_gdp_product"),
                  [(s.label, s.cluster, s.size, s.mean_flux, s.flux_share, s.mean_travel_time, s.mean_gdp_product)
                   for s in labeling.stats])
    run.write_json("cluster_metadata.json", {
        "k": model.k,
        "restart": model.restart,
        "criterion": model.criterion_value,
        "excluded": features.excluded,
        "checks": labeling.checks,
        "ties": labeling.ties,
    })
    pair_labels = labeling.pair_labels(model)
    fits = fit_per_pattern(pair_labels, flux, cities, travel_time)
    rows = []
    for label, cell in fits.items():
        f = cell.fit
        if f is None:
            rows.append((label, "", "", "", "", "", "", cell.error))
        else:
            rows.append((label, f.gamma, f.log_a, f.r_squared, f.f_statistic, f.n_obs, cell.ssi, ""))
    run.write_csv("pattern_fits.csv", write_rows,
                  ("pattern", "gamma", "log_a", "r2", "f_stat", "n_obs", "ssi", "error"), rows)

    pf = PatternedFlux.from_labels(flux, pair_labels, _province_map(cities))
    _write_indices(run, pf, flux.restrict(pair_labels), cities, travel_time)
    return EXIT_OK if all(c.ok for c in fits.values()) else EXIT_PARTIAL


def cmd_indices(run: Run) -> int:
    opts = run.opts
    _require(opts, "cities", "travel_min", "assignments")
    cities = load_city_attributes(opts.cities)
    _, upath = _flux_paths(opts)
    if upath is None:
        raise WorkfluxError("indices needs --undirected-flux or --flux-dir")
    flux = read_flux_csv(upath).undirected()
    labels = {p: lab for p, lab in read_assignments(opts.assignments).items() if lab in PATTERNS}
    travel_time = load_cost_table(opts.travel_min, "travel_min")
    pf = PatternedFlux.from_labels(flux, labels, _province_map(cities))
    _write_indices(run, pf, flux.restrict(labels), cities, travel_time)
    return EXIT_OK


def cmd_correlate(run: Run) -> int:
    opts = run.opts
    rows = []
    _, upath = _flux_paths(opts)
    if opts.covariate:
        if upath is None:
            raise WorkfluxError("pair correlation needs --undirected-flux or --flux-dir")
        flux = read_flux_csv(upath)
        r, n = correlate_pairs(flux, load_pair_covariate(opts.covariate))
        rows.append(("flux_vs_pair_covariate", r, n))
    if opts.province_covariate:
        _require(opts, "assignments", "cities")
        if upath is None:
            raise WorkfluxError("province correlation needs --undirected-flux or --flux-dir")
        flux = read_flux_csv(upath).undirected()
        cities = load_city_attributes(opts.cities)
        labels = {p: lab for p, lab in read_assignments(opts.assignments).items() if lab in PATTERNS}
        pf = PatternedFlux.from_labels(flux, labels, _province_map(cities))
        r, n = correlate_provinces(pf, load_province_covariate(opts.province_covariate))
        rows.append(("province_covariate_vs_pattern_III_IV_share", r, n))
    if not rows:
        raise WorkfluxError("correlate needs --covariate and/or --province-covariate")
    run.write_csv("correlations.csv", write_rows, ("kind", "r", "n"), rows)
    for kind, r, n in rows:
        print(f"{kind}\t{r:.4f}\t{n}")
    return EXIT_OK


def _write_messages(messages, fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(("message_id", "user_id", "timestamp", "city_id"))
    writer.writerows(messages)


def cmd_synth(run: Run) -> int:
    opts = run.opts
    if opts.kind == "gravity":
        ds = synthetic_dataset(opts.n_cities, opts.n_pairs, seed=opts.seed)
        run.write_csv("messages.csv", _write_messages, ds.messages)
        run.write_csv("cities.csv", write_city_attributes, ds.cities)
        for metric, costs in ds.costs.items():
            run.write_csv(f"{metric}.csv", write_cost_table, costs)
    elif opts.kind == "planted":
        pp = planted_patterns(opts.n_per_group, seed=opts.seed)
        run.write_csv("cities.csv", write_city_attributes, pp.cities)
        run.write_csv("travel_min.csv", write_cost_table, pp.travel_time)
        run.write_csv("flux_undirected.csv", write_flux_csv, pp.flux)
        run.write_csv("truth.csv", write_rows, ("city_a", "city_b", "pattern_label"),
                      [(a, b, lab) for (a, b), lab in sorted(pp.truth.items())])
    else:
        raise WorkfluxError(f"unknown synth kind {opts.kind!r}")
    return EXIT_OK


COMMANDS = {
    "extract": cmd_extract,
    "fit": cmd_fit,
    "cluster": cmd_cluster,
    "indices": cmd_indices,
    "correlate": cmd_correlate,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="workflux", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"workflux {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value file; flags override it")
        p.add_argument("--out", help="output directory (default: .)")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int, help="parallel workers; never changes outputs")
        p.add_argument("-v", "--verbose", action="store_true", default=None)

    def flux_inputs(p):
        p.add_argument("--flux-dir", help="directory holding flux_directed.csv / flux_undirected.csv")
        p.add_argument("--directed-flux")
        p.add_argument("--undirected-flux")

    p = sub.add_parser("extract", help="message log -> directed and undirected flux")
    common(p)
    p.add_argument("--messages")
    p.add_argument("--registry", help="raw,city_id CSV")
    p.add_argument("--cities", help="city attributes; ids double as registry when --registry is absent")
    p.add_argument("--window-start")
    p.add_argument("--window-end")

    p = sub.add_parser("fit", help="fit gravity models for every family x metric")
    common(p)
    flux_inputs(p)
    p.add_argument("--cities")
    p.add_argument("--geo-km", help="precomputed great-circle table (default: computed)")
    p.add_argument("--travel-km")
    p.add_argument("--travel-min")
    p.add_argument("--diameter-km", type=float)
    p.add_argument("--families")
    p.add_argument("--metrics")

    p = sub.add_parser("cluster", help="k scan, k=4 patterns, per-pattern fits and indices")
    common(p)
    flux_inputs(p)
    p.add_argument("--cities")
    p.add_argument("--travel-min")
    p.add_argument("--k-min", type=int)
    p.add_argument("--k-max", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--representative", action="store_true", default=None,
                   help="also write the heuristic representative-city list")

    p = sub.add_parser("indices", help="DI, province pattern ratios, locality and GDP-match curves")
    common(p)
    flux_inputs(p)
    p.add_argument("--cities")
    p.add_argument("--travel-min")
    p.add_argument("--assignments")
    p.add_argument("--representative", action="store_true", default=None)

    p = sub.add_parser("correlate", help="Pearson r against pair or province covariates")
    common(p)
    flux_inputs(p)
    p.add_argument("--covariate", help="city_a,city_b,value CSV")
    p.add_argument("--province-covariate", help="province_id,value CSV")
    p.add_argument("--assignments")
    p.add_argument("--cities")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    common(p)
    p.add_argument("--kind", choices=("gravity", "planted"))
    p.add_argument("--n-cities", type=int)
    p.add_argument("--n-pairs", type=int)
    p.add_argument("--n-per-group", type=int)
    return parser


def read_config_file(path: str | Path) -> list[str]:
    """Turn ``key = value`` lines into argv tokens."""
    tokens = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise WorkfluxError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            flag = "--" + key.replace("_", "-")
            if value.lower() in ("true", "yes", "on"):
                tokens.append(flag)
            elif value.lower() not in ("false", "no", "off"):
                tokens += [flag, value]
    return tokens


def resolve_options(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    ns = parser.parse_args(argv)
    merged = {}
    if ns.config:
        file_ns = parser.parse_args([ns.command, *read_config_file(ns.config)])
        merged.update({k: v for k, v in vars(file_ns).items() if v is not None})
    merged.update({k: v for k, v in vars(ns).items() if v is not None})
    for key, value in _DEFAULTS.items():
        merged.setdefault(key, value)
    for key in vars(ns):
        merged.setdefault(key, None)
    resolved = argparse.Namespace(**merged)
    for name in _INPUT_FILES + ("flux_dir",):
        path = getattr(resolved, name, None)
        if path is not None and not Path(path).exists():
            raise WorkfluxError(f"--{name.replace('_', '-')}: {path} does not exist")
    return resolved


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        opts = resolve_options(argv)
        logging.basicConfig(level=logging.INFO if opts.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return COMMANDS[opts.command](Run(opts))
    except WorkfluxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
