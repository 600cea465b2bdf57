"""Command-line pipeline: each stage is a subcommand with inspectable
intermediate artifacts, plus `pipeline` to run them end to end."""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

from . import fitting, graphs, ingest, patches, properties, raster, route, simulate

STAGES = ["ingest", "heatmap", "blur", "skeleton", "graph", "route",
          "patches", "fit", "simulate", "check"]

ARTIFACTS = {
    "ingest": ["traces.csv"],
    "heatmap": ["heatmap.pgm"],
    "blur": ["blurred.pgm"],
    "skeleton": ["skeleton.pgm"],
    "graph": ["graph.txt"],
    "route": ["route.txt"],
    "patches": ["patches.txt"],
    "fit": ["observations.tsv", "model.txt", "gof.tsv"],
    "simulate": ["events.tsv"],
    "check": ["results.tsv"],
}


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="headwaylab",
                                 description="AVL traces -> patch model -> headway model checking")
    ap.add_argument("--config", help="key = value config file; flags override it")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--out", default=".", help="output directory")

    p = sub.add_parser("ingest", help="parse and window-filter raw AVL text")
    p.add_argument("input")
    add_common(p)
    p.add_argument("--delimiter", default=",")
    p.add_argument("--cols", default="0,1,2,3", help="vehicle,x,y,t column indices")
    p.add_argument("--route-col", type=int)
    p.add_argument("--route-value")
    p.add_argument("--time-format", default="unix", choices=sorted(ingest.TIME_HOOKS))
    p.add_argument("--window", help="daily window as start-end seconds, e.g. 36000-54000")
    p.add_argument("--weekdays", help="comma list of weekday numbers, Monday=0")
    p.add_argument("--tz-offset", type=int, default=0)

    p = sub.add_parser("heatmap", help="rasterize observation heat map")
    p.add_argument("input", help="ingested traces.csv")
    add_common(p)
    p.add_argument("--cell-size", type=float)
    p.add_argument("--resolution", type=int, default=raster.DEFAULT_RESOLUTION)
    p.add_argument("--delta", type=float, default=0.0, help="interpolation weight")
    p.add_argument("--boost", type=float, default=0.0, help="contrast boost")

    p = sub.add_parser("blur", help="Gaussian blur")
    p.add_argument("input", help="heatmap.pgm")
    add_common(p)
    p.add_argument("--sigma", type=float, default=1.0)

    p = sub.add_parser("skeleton", help="threshold and thin")
    p.add_argument("input", help="blurred.pgm")
    add_common(p)
    p.add_argument("--tau", type=float, required=True, help="intensity threshold")
    p.add_argument("--eta", type=float, required=True, help="erosion step")

    p = sub.add_parser("graph", help="skeleton to pruned route graph")
    p.add_argument("input", help="skeleton.pgm")
    add_common(p)
    p.add_argument("--epsilon", type=float, default=2.0, help="RDP tolerance in cells")
    p.add_argument("--split-divisor", type=float, default=1.0)

    p = sub.add_parser("route", help="termini, direction segments, loop length")
    p.add_argument("graph", help="graph.txt")
    p.add_argument("traces", help="traces.csv")
    add_common(p)
    p.add_argument("--rejection-radius", type=float, required=True)
    p.add_argument("--termini", default="dwell", choices=["dwell", "extremes"])

    p = sub.add_parser("patches", help="bin counts and clustering")
    p.add_argument("route", help="route.txt")
    p.add_argument("graph", help="graph.txt")
    p.add_argument("traces", help="traces.csv")
    add_common(p)
    p.add_argument("--gamma", type=int, default=50)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--method", default="jenks", choices=["jenks", "jenks-counts", "merge"])

    p = sub.add_parser("fit", help="crossing times and phase-type fits")
    p.add_argument("route", help="route.txt")
    p.add_argument("graph", help="graph.txt")
    p.add_argument("patches", help="patches.txt")
    p.add_argument("traces", help="traces.csv")
    add_common(p)
    p.add_argument("--branches", type=int, default=1, help="hyper-Erlang branches (1 = Erlang)")
    p.add_argument("--fit-seed", type=int, default=0)
    p.add_argument("--cdf-out", action="store_true", help="emit per-patch CDF comparison TSVs")

    def add_sim_args(p, seed_required=True):
        p.add_argument("--beta", type=int, required=True, help="bus count")
        p.add_argument("--seed", type=int, required=seed_required)
        p.add_argument("--r", type=float, help="timetabled loop duration override")
        p.add_argument("--no-timetable", action="store_true")
        p.add_argument("--termini-patches", help="two 1-based patch indices, e.g. 1,7")
        p.add_argument("--holding", type=float, help="holding threshold seconds")
        p.add_argument("--speedmod", type=float, help="speed modification threshold fraction")
        p.add_argument("--slowdown", type=float, default=0.9)
        p.add_argument("--init", default="uniform", choices=["uniform", "terminus"])

    p = sub.add_parser("simulate", help="run the bus simulator, log events")
    p.add_argument("model", help="model.txt")
    add_common(p)
    add_sim_args(p)
    p.add_argument("--horizon", type=float, default=50000.0, help="simulated seconds")

    p = sub.add_parser("check", help="statistical model checking of properties")
    p.add_argument("model", help="model.txt")
    add_common(p)
    add_sim_args(p)
    p.add_argument("--properties", help="property file; default: EWT/EVWT/BPH per patch")
    p.add_argument("--patches-list", help="patch indices for the default properties")
    p.add_argument("--warmup", type=float)
    p.add_argument("--batches", type=int, default=32)
    p.add_argument("--rel-halfwidth", type=float, default=0.10)
    p.add_argument("--budget", type=float, default=300.0, help="wall-clock seconds per assertion set")
    p.add_argument("--max-sim-time", type=float)

    p = sub.add_parser("pipeline", help="run all stages in order")
    p.add_argument("input")
    add_common(p)
    p.add_argument("--resume-from", choices=STAGES)
    # ingest
    p.add_argument("--delimiter", default=",")
    p.add_argument("--cols", default="0,1,2,3")
    p.add_argument("--route-col", type=int)
    p.add_argument("--route-value")
    p.add_argument("--time-format", default="unix", choices=sorted(ingest.TIME_HOOKS))
    p.add_argument("--window")
    p.add_argument("--weekdays")
    p.add_argument("--tz-offset", type=int, default=0)
    # raster/graph
    p.add_argument("--cell-size", type=float)
    p.add_argument("--resolution", type=int, default=raster.DEFAULT_RESOLUTION)
    p.add_argument("--delta", type=float, default=0.0)
    p.add_argument("--boost", type=float, default=0.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--tau", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--epsilon", type=float, default=2.0)
    p.add_argument("--split-divisor", type=float, default=1.0)
    p.add_argument("--rejection-radius", type=float)
    p.add_argument("--termini", default="dwell", choices=["dwell", "extremes"])
    # patches/fit
    p.add_argument("--gamma", type=int, default=50)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--method", default="jenks", choices=["jenks", "jenks-counts", "merge"])
    p.add_argument("--branches", type=int, default=1)
    p.add_argument("--fit-seed", type=int, default=0)
    # simulate/check
    p.add_argument("--beta", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--r", type=float)
    p.add_argument("--no-timetable", action="store_true")
    p.add_argument("--holding", type=float)
    p.add_argument("--speedmod", type=float)
    p.add_argument("--slowdown", type=float, default=0.9)
    p.add_argument("--init", default="uniform", choices=["uniform", "terminus"])
    p.add_argument("--horizon", type=float, default=50000.0)
    p.add_argument("--warmup", type=float)
    p.add_argument("--batches", type=int, default=32)
    p.add_argument("--rel-halfwidth", type=float, default=0.10)
    p.add_argument("--budget", type=float, default=300.0)
    p.add_argument("--max-sim-time", type=float)
    return ap


def _apply_config_file(argv: list[str]) -> list[str]:
    """Prepend key=value pairs from --config as flags so that explicit flags
    override the file (argparse keeps the last occurrence)."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    path = argv[i + 1]
    extra = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        key = key.strip().replace("_", "-")
        value = value.strip()
        if value.lower() in ("true", "yes"):
            extra.append(f"--{key}")
        else:
            extra.extend([f"--{key}", value])
    rest = argv[:i] + argv[i + 2:]
    # insert config-derived flags right after the subcommand
    for k, a in enumerate(rest):
        if a in STAGES or a == "pipeline":
            return rest[:k + 1] + extra + rest[k + 1:]
    return extra + rest


def _load_traces(path: str) -> ingest.TraceSet:
    with open(path) as fh:
        ts, _ = ingest.parse_records(fh, ingest.ColumnSchema())
    return ts


def _schema_from(args) -> ingest.ColumnSchema:
    cols = [int(c) for c in args.cols.split(",")]
    return ingest.ColumnSchema(delimiter=args.delimiter, vehicle_col=cols[0],
                               x_col=cols[1], y_col=cols[2], t_col=cols[3],
                               route_col=args.route_col, route_value=args.route_value,
                               time_format=args.time_format)


def _window_from(args) -> ingest.TimeWindow | None:
    if not args.window:
        return None
    start, _, end = args.window.partition("-")
    weekdays = frozenset(range(7))
    if args.weekdays:
        weekdays = frozenset(int(w) for w in args.weekdays.split(","))
    return ingest.TimeWindow(int(start), int(end), weekdays)


def _sim_config(args, pm: fitting.PatchModel, termini_patches) -> simulate.SimConfig:
    return simulate.SimConfig(
        n_buses=args.beta,
        timetable=not args.no_timetable,
        route_duration=args.r,
        terminus_patches=termini_patches,
        holding_threshold=args.holding,
        speedmod_threshold=args.speedmod,
        slowdown=args.slowdown,
        init=args.init,
        seed=args.seed if args.seed is not None else 0,
    )


def _terminus_patches_from_route(rm: route.RouteModel, ps: patches.PatchStructure,
                                 pm: fitting.PatchModel):
    """The gate applies where buses dwell: of the two patches flanking each
    turnaround fraction, pick the one with the larger fitted mean."""
    n = ps.n
    out = []
    for frac in (0.0, rm.direction_span(0)[1] % 1.0):
        after = patches.patch_of(ps, frac % 1.0)
        before = after - 1 if after > 1 else n
        out.append(after if pm.means[after - 1] >= pm.means[before - 1] else before)
    a, b = sorted(set(out))[:2] if len(set(out)) >= 2 else (1, max(2, n // 2 + 1))
    return (a, b)


def cmd_ingest(args, out: Path):
    window = _window_from(args)
    with open(args.input) as fh:
        ts, report = ingest.parse_records(fh, _schema_from(args))
    if window is not None:
        ts = ingest.filter_window(ts, window, args.tz_offset)
    (out / "traces.csv").write_text(ingest.serialize(ts))
    print(f"ingest: kept {report.rows_kept} rows, rejected {report.rows_rejected}, "
          f"duplicates {report.duplicates_dropped}; {len(ts)} records after window")


def cmd_heatmap(args, out: Path):
    ts = _load_traces(args.input)
    r = raster.rasterize_heatmap(ts, cell_size=args.cell_size, delta=args.delta,
                                 boost=args.boost, resolution=args.resolution)
    raster.write_pgm(r, str(out / "heatmap.pgm"))
    print(f"heatmap: {r.width}x{r.height} cells, cell_size {r.cell_size:.3g}")


def cmd_blur(args, out: Path):
    r = raster.read_pgm(args.input)
    raster.write_pgm(raster.gaussian_blur(r, args.sigma), str(out / "blurred.pgm"))
    print(f"blur: sigma {args.sigma}")


def cmd_skeleton(args, out: Path):
    r = raster.read_pgm(args.input)
    mask = raster.skeletonize(r, args.tau, args.eta)
    raster.write_mask_pgm(mask, str(out / "skeleton.pgm"))
    print(f"skeleton: {int(mask.mask.sum())} pixels")


def cmd_graph(args, out: Path):
    r = raster.read_pgm(args.input)
    mask = raster.SkeletonMask(r.intensity > 0, r.cell_size, r.origin)
    g = graphs.build_graph(mask, args.epsilon, args.split_divisor)
    graphs.write_graph(g, str(out / "graph.txt"))
    print(f"graph: {len(g.nodes)} nodes, {len(g.edges)} edges, length {g.total_length():.1f}")


def cmd_route(args, out: Path):
    g = graphs.read_graph(args.graph)
    ts = _load_traces(args.traces)
    rm = route.derive_route_model(g, ts, args.rejection_radius, args.termini)
    route.write_route_model(rm, str(out / "route.txt"))
    d1 = rm.direction_length(0)
    d2 = rm.direction_length(1)
    print(f"route: termini edges {rm.termini}, directions {d1:.1f} / {d2:.1f}, loop {rm.loop_length:.1f}")


def cmd_patches(args, out: Path):
    g = graphs.read_graph(args.graph)
    rm = route.read_route_model(args.route, g)
    ts = _load_traces(args.traces)
    counts = patches.bin_counts(ts, rm, args.gamma)
    if args.method == "jenks":
        ps = patches.jenks_cluster(counts, args.n)
    elif args.method == "jenks-counts":
        ps = patches.jenks_cluster_counts(counts, args.n)
    else:
        ps = patches.merge_adjacent_cluster(counts)
    patches.write_patches(ps, str(out / "patches.txt"))
    print(f"patches: n={ps.n}, breakpoints {['%.3f' % b for b in ps.breakpoints]}")


def cmd_fit(args, out: Path):
    g = graphs.read_graph(args.graph)
    rm = route.read_route_model(args.route, g)
    ps = patches.read_patches(args.patches)
    ts = _load_traces(args.traces)
    obs = fitting.extract_crossing_times(ts, rm, ps)
    with open(out / "observations.tsv", "w") as fh:
        fh.write("patch\tduration\n")
        for j in sorted(obs):
            for d in obs[j]:
                fh.write(f"{j}\t{d:.0f}\n")
    pm, flagged = fitting.fit_patch_model(obs, branches=args.branches, seed=args.fit_seed)
    fitting.write_patch_model(pm, str(out / "model.txt"))
    reports = {}
    for j in sorted(obs):
        if len(obs[j]) >= 3 and j not in flagged:
            reports[j] = fitting.anderson_darling(obs[j], pm.dists[j - 1])
    fitting.write_gof_tsv(reports, str(out / "gof.tsv"))
    if getattr(args, "cdf_out", False):
        fitting.write_cdf_comparison(obs, pm, str(out / "cdf"))
    if flagged:
        print(f"fit: WARNING patches with too few observations: {flagged}")
    print("fit: " + ", ".join(
        f"p{j}:mu={pm.means[j - 1]:.0f}" for j in range(1, pm.n + 1)))


def _load_model_for_sim(args, out: Path):
    pm = fitting.read_patch_model(args.model)
    termini_patches = None
    if not args.no_timetable:
        if getattr(args, "termini_patches", None):
            a, b = args.termini_patches.split(",")
            termini_patches = (int(a), int(b))
        else:
            route_path = out / "route.txt"
            patches_path = out / "patches.txt"
            graph_path = out / "graph.txt"
            if route_path.exists() and patches_path.exists() and graph_path.exists():
                g = graphs.read_graph(str(graph_path))
                rm = route.read_route_model(str(route_path), g)
                ps = patches.read_patches(str(patches_path))
                termini_patches = _terminus_patches_from_route(rm, ps, pm)
            else:
                raise StageError("simulate", "terminus patches unknown; pass --termini-patches")
    cfg = _sim_config(args, pm, termini_patches)
    return simulate.build_model(pm, cfg)


def cmd_simulate(args, out: Path):
    model = _load_model_for_sim(args, out)
    events, truncated = simulate.run_trajectory(
        model, args.seed, stop=lambda ev, sim: ev.t >= args.horizon)
    simulate.write_event_log(events, str(out / "events.tsv"))
    print(f"simulate: {len(events)} departures to t={args.horizon:.0f}"
          + (" (truncated)" if truncated else ""))


def cmd_check(args, out: Path):
    model = _load_model_for_sim(args, out)
    n = model.n
    plist = ([int(x) for x in args.patches_list.split(",")]
             if getattr(args, "patches_list", None) else list(range(1, n + 1)))
    ecfg = properties.EstimatorConfig(
        warmup_time=args.warmup, batches=args.batches,
        rel_halfwidth_target=args.rel_halfwidth, wall_budget=args.budget,
        max_sim_time=args.max_sim_time)
    texts: list[tuple[str, str]] = []
    if getattr(args, "properties", None):
        raw = Path(args.properties).read_text()
        if "_j" in raw:
            for j, txt in properties.expand_per_patch(raw, plist).items():
                texts.append((f"patch{j}", txt))
        else:
            texts.append(("file", raw))
    else:
        for j in plist:
            texts.append((f"ewt_{j}", properties.ewt_query(j)))
            texts.append((f"evwt_{j}", properties.evwt_query(j)))
            texts.append((f"bph_{j}", properties.bph_query(j)))
    results = []
    labels = []
    for name, text in texts:
        prop = properties.parse_quatex(text)
        res = properties.check_assertions(model, prop, ecfg, seed=args.seed)
        for q, r in zip(prop.assertions, res):
            results.append(r)
            labels.append(f"{name}:{q.function}")
    properties.write_results_tsv(results, str(out / "results.tsv"), labels)
    bad = [r for r in results if r.verdict == "violated"
           or (r.verdict == "undecided" and r.event_observed)]
    for label, r in zip(labels, results):
        shown = "-" if not r.event_observed else f"{r.estimate:.4g} ± {r.halfwidth:.2g}"
        print(f"check: {label} = {shown} -> {r.verdict}")
    return 0 if not bad else 1


def cmd_pipeline(args, out: Path):
    start = STAGES.index(args.resume_from) if args.resume_from else 0

    def want(stage):
        if STAGES.index(stage) >= start:
            return True
        missing = [a for a in ARTIFACTS[stage] if not (out / a).exists()]
        if missing:
            raise StageError(stage, f"cannot resume: missing artifacts {missing}")
        return False

    ns = argparse.Namespace(**vars(args))
    if want("ingest"):
        cmd_ingest(ns, out)
    ns.input = str(out / "traces.csv")
    ts = _load_traces(ns.input)
    extent = _extent(ts)
    cell = args.cell_size if args.cell_size else extent / args.resolution
    if args.rejection_radius is None:
        ns.rejection_radius = 3.0 * cell
    if args.tau is None or args.eta is None:
        raise StageError("skeleton", "tau and eta are required (set via flags or config)")
    if want("heatmap"):
        cmd_heatmap(ns, out)
    if want("blur"):
        ns.input = str(out / "heatmap.pgm")
        cmd_blur(ns, out)
    if want("skeleton"):
        ns.input = str(out / "blurred.pgm")
        cmd_skeleton(ns, out)
    if want("graph"):
        ns.input = str(out / "skeleton.pgm")
        cmd_graph(ns, out)
    ns.graph = str(out / "graph.txt")
    ns.traces = str(out / "traces.csv")
    if want("route"):
        cmd_route(ns, out)
    ns.route = str(out / "route.txt")
    if want("patches"):
        cmd_patches(ns, out)
    ns.patches = str(out / "patches.txt")
    if want("fit"):
        cmd_fit(ns, out)
    ns.model = str(out / "model.txt")
    ns.termini_patches = None
    if want("simulate"):
        cmd_simulate(ns, out)
    if want("check"):
        ns.patches_list = None
        ns.properties = None
        return cmd_check(ns, out)
    return 0


def _extent(ts) -> float:
    xs = [r.x for r in ts.all_records()]
    ys = [r.y for r in ts.all_records()]
    return max(max(xs) - min(xs), max(ys) - min(ys))


COMMANDS = {
    "ingest": cmd_ingest,
    "heatmap": cmd_heatmap,
    "blur": cmd_blur,
    "skeleton": cmd_skeleton,
    "graph": cmd_graph,
    "route": cmd_route,
    "patches": cmd_patches,
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "check": cmd_check,
    "pipeline": cmd_pipeline,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    argv = _apply_config_file(argv)
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        rc = COMMANDS[args.command](args, out)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing input file: {exc.filename}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: stage {args.command!r} failed: {exc}", file=sys.stderr)
        return 2
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
