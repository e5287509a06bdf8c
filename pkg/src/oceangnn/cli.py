"""Command-line entry point: ``oceangnn <subcommand> ...``."""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from ._binio import FormatError
from .config import ConfigError, ExperimentConfig
from .dataset import DataError, DayDataset
from .diff_core import load_checkpoint
from .gnn_model import ModelConfig, MultiScaleGNN, NumericalError
from .graph_build import GraphError, build_ocean_graph, save_graph
from .ocean_grid import ChannelSchema, NormStats, compute_norm_stats, level_channel, load_fields, parse_channel
from .rollout import FORCING_KINDS, ForcingSource, ForecastRun, build_climatology, run_forecast
from .sphere_mesh import build_hierarchy, load_mesh, save_mesh
from .synthetic import SyntheticOcean, write_dataset
from .training import TrainLog, train_phase
from . import evaluation as ev

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


# ----------------------------------------------------------------------------
# provenance


def digest(path) -> str:
    """sha256 of a file, or of a directory's relative paths and contents."""
    p = Path(path)
    h = hashlib.sha256()
    files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
    for q in files:
        if p.is_dir():
            h.update(str(q.relative_to(p)).encode())
        h.update(q.read_bytes())
    return h.hexdigest()


def write_manifest(path, command: str, config: dict, inputs=(), outputs=(), extra=None) -> None:
    manifest = {
        "tool": "oceangnn",
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": {str(p): digest(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        **(extra or {}),
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))


# ----------------------------------------------------------------------------
# shared builders


def _meshes_from(path):
    p = Path(path)
    if p.is_dir():
        files = {load_mesh(f).level: f for f in p.glob("*.omsh")}
        if not files:
            raise DataError(f"no OMSH files in {p}")
        fine = max(files)
        if fine - 1 not in files:
            raise DataError(f"{p} lacks the level {fine - 1} mesh paired with level {fine}")
        return load_mesh(files[fine - 1]), load_mesh(files[fine])
    fine = load_mesh(p)
    for f in p.parent.glob("*.omsh"):
        m = load_mesh(f)
        if m.level == fine.level - 1:
            return m, fine
    raise DataError(f"no level {fine.level - 1} mesh next to {p}")


def _grid_fields(path):
    p = Path(path)
    return load_fields(p / "statics.ogf" if p.is_dir() else p)


def build_model(model_cfg: ModelConfig, schema: ChannelSchema, stats: NormStats, statics) -> MultiScaleGNN:
    coarse, fine = build_hierarchy(model_cfg.finest_level)
    graph = build_ocean_graph(statics.grid, coarse, fine, model_cfg.radius_factor, model_cfg.grid_links)
    return MultiScaleGNN(model_cfg, schema, graph, stats, statics)


def model_from_checkpoint(path, statics):
    params, optimizer, meta = load_checkpoint(path)
    try:
        model_cfg = ModelConfig(**meta["model"])
        schema = ChannelSchema.from_dict(meta["schema"])
        stats = NormStats.from_json(json.dumps(meta["stats"]))
    except KeyError as exc:
        raise ConfigError(f"checkpoint {path} lacks model metadata ({exc})") from None
    return build_model(model_cfg, schema, stats, statics), params, optimizer, meta


def _day_range(days, window):
    if window is None:
        return list(days)
    return [d for d in days if window[0] <= d <= window[1]]


# ----------------------------------------------------------------------------
# subcommands


def cmd_build_mesh(args) -> int:
    if args.levels < 1:
        raise ConfigError("--levels must be >= 1 (the coarse mesh is one level below)")
    coarse, fine = build_hierarchy(args.levels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for m in (coarse, fine):
        paths.append(out / f"mesh_level{m.level}.omsh")
        save_mesh(m, paths[-1])
    write_manifest(out / "manifest.json", "build-mesh", {"levels": [coarse.level, fine.level]}, outputs=paths)
    print(f"coarse nodes={coarse.n_nodes} fine nodes={fine.n_nodes}")
    return EXIT_OK


def cmd_build_graph(args) -> int:
    statics = _grid_fields(args.grid)
    coarse, fine = _meshes_from(args.mesh)
    graph = build_ocean_graph(statics.grid, coarse, fine, args.radius_factor, args.grid_links)
    save_graph(graph, args.out)
    cfg = {"radius_factor": args.radius_factor, "grid_links": args.grid_links, "levels": [coarse.level, fine.level]}
    write_manifest(f"{args.out}.manifest.json", "build-graph", cfg, inputs=[args.grid, args.mesh], outputs=[args.out])
    print(" ".join(f"{k}={v}" for k, v in graph.counts().items()))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.days < 3:
        raise ConfigError("--days must be >= 3")
    gen = SyntheticOcean(cfg.generator)
    out = write_dataset(gen, range(args.start, args.start + args.days), args.out)
    write_manifest(out / "manifest.json", "gen-data", cfg.to_dict(), inputs=[args.config],
                   extra={"days": [args.start, args.start + args.days - 1]})
    print(f"wrote {args.days} days to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    data_dir = args.data or cfg.data_dir
    out_dir = Path(args.out or cfg.out_dir)
    dataset = DayDataset.from_directory(data_dir)
    schema = cfg.generator.channel_schema()
    init_ckpt = out_dir / "one_step.ockp" if args.phase == 2 else None
    if init_ckpt is not None and not init_ckpt.exists() and not args.resume:
        raise DataError(f"phase 2 needs the phase 1 checkpoint {init_ckpt}")
    tcfg = cfg.training.train_config(args.phase, out_dir, init_ckpt)

    params = optimizer = log = None
    if args.resume or args.phase == 2:
        source = args.resume or init_ckpt
        model, params, optimizer, meta = model_from_checkpoint(source, dataset.statics)
        stats = model.stats
        if args.resume:
            log_path = out_dir / f"{tcfg.phase}_log.csv"
            log = TrainLog.read_csv(log_path) if log_path.exists() else TrainLog()
            log.rows = [r for r in log.rows if r["step"] <= optimizer.step]
        else:
            optimizer = None
    else:
        window = tcfg.train_days
        days = _day_range(dataset.days, window)
        first, last = (min(days), max(days)) if days else (0, -1)
        stats = compute_norm_stats(
            [dataset.ocean(d) for d in days],
            [dataset.forcing(d) for d in dataset.forcing_days if first - 1 <= d <= last + 1],
            dataset.statics,
        )
        model = build_model(cfg.model, schema, stats, dataset.statics)
    provenance = {
        "experiment": cfg.to_dict(),
        "model": model.config.to_dict(),
        "schema": model.schema.to_dict(),
        "stats": json.loads(stats.to_json()),
        "version": __version__,
    }
    result = train_phase(tcfg, model, dataset, params, optimizer, log, provenance)
    write_manifest(out_dir / f"{tcfg.phase}_manifest.json", "train", cfg.to_dict(),
                   inputs=[args.config, data_dir] + ([args.resume] if args.resume else []),
                   outputs=[result.checkpoint, out_dir / f"{tcfg.phase}_log.csv"],
                   extra={"phase": args.phase, "steps": result.optimizer.step})
    last = result.log.rows[-1] if result.log.rows else None
    print(f"phase={args.phase} steps={result.optimizer.step} loss={last['loss'] if last else float('nan'):.6g} checkpoint={result.checkpoint}")
    return EXIT_OK


def cmd_forecast(args) -> int:
    dataset = DayDataset.from_directory(args.init)
    model, params, _, meta = model_from_checkpoint(args.ckpt, dataset.statics)
    t0 = args.t0 if args.t0 is not None else (dataset.days[1] if len(dataset.days) > 1 else None)
    if t0 is None:
        raise DataError("initial-condition directory needs two consecutive days")
    if args.horizon < 1:
        raise ConfigError("--horizon must be >= 1")
    clim_days = None
    if args.forcing == "climatology":
        clim_src = DayDataset.from_directory(args.clim_data) if args.clim_data else dataset
        window = meta.get("experiment", {}).get("training", {}).get("train_days") if args.clim_data is None else None
        days = _day_range(clim_src.forcing_days, window)
        source = build_climatology([clim_src.forcing(d) for d in days], require_full_year=False)
        clim_days = len(source.table)
    else:
        source = ForcingSource(args.forcing, dataset)
    record = {
        "tool": "oceangnn",
        "version": __version__,
        "config": meta.get("experiment", {}),
        "model": meta.get("model", {}),
        "inputs": {args.ckpt: digest(args.ckpt), args.init: digest(args.init)},
    }
    if clim_days is not None:
        record["climatology_days_of_year"] = clim_days
    run = run_forecast(dataset.ocean(t0 - 1), dataset.ocean(t0), source, args.horizon, model, params, record)
    run.save(args.out)
    print(f"forecast t0={t0} horizon={args.horizon} forcing={args.forcing} -> {args.out}")
    return EXIT_OK


def _load_eval_inputs(args):
    run = ForecastRun.load(args.pred)
    truth = DayDataset.from_directory(args.truth)
    return run, truth


def cmd_eval_rmse(args) -> int:
    run, truth = _load_eval_inputs(args)
    region = ev.get_region(args.region)
    rows = []
    for k, pred in enumerate(run.states, start=1):
        t = truth.ocean(pred.day)
        if args.depth_profile:
            variables = sorted({v for v, d in map(parse_channel, t.channels) if d is not None})
            values = {}
            for var in variables:
                for depth, value in ev.rmse_depth_profile(pred, t, var, region, args.cos_lat):
                    values[level_channel(var, depth)] = value
        else:
            values = ev.rmse(pred, t, None, region, args.cos_lat)
        rows += ev.rmse_rows(run.t0, k, values, region)
    ev.write_rmse_csv(rows, args.out)
    write_manifest(f"{args.out}.manifest.json", "eval-rmse", vars_config(args), inputs=[args.pred, args.truth], outputs=[args.out])
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def cmd_eval_spectra(args) -> int:
    run, truth = _load_eval_inputs(args)
    region = ev.get_region(args.region)
    if region is None:
        raise ConfigError("eval-spectra needs a named --region")
    results = []
    for k, pred in enumerate(run.states, start=1):
        results.append(("prediction", ev.surface_ke_spectrum(pred, region, args.window, k)))
        results.append(("truth", ev.surface_ke_spectrum(truth.ocean(pred.day), region, args.window, k)))
    ev.write_spectrum_csv(results, args.out)
    meta = dict(results[0][1].meta)
    write_manifest(f"{args.out}.manifest.json", "eval-spectra", vars_config(args), inputs=[args.pred, args.truth],
                   outputs=[args.out], extra={"estimator": meta})
    print(f"wrote {len(results)} spectra to {args.out}")
    return EXIT_OK


def vars_config(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oceangnn", description="Multi-scale GNN ocean forecaster.")
    p.add_argument("--threads", type=int, default=None, help="BLAS/worker threads (default: all cores)")
    p.add_argument("--version", action="version", version=f"oceangnn {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-mesh", help="write OMSH meshes for levels L-1 and L")
    s.add_argument("--levels", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_mesh)

    s = sub.add_parser("build-graph", help="build the OGRF graph for a grid and mesh pair")
    s.add_argument("--grid", required=True, help="OGF file or dataset directory defining the ocean mask")
    s.add_argument("--mesh", required=True, help="OMSH fine mesh file or build-mesh directory")
    s.add_argument("--radius-factor", type=float, default=0.6)
    s.add_argument("--grid-links", choices=("both", "fine"), default="both")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_graph)

    s = sub.add_parser("gen-data", help="write a synthetic dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--days", type=int, required=True)
    s.add_argument("--start", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="run training phase 1 (one-step) or 2 (two-step)")
    s.add_argument("--config", required=True)
    s.add_argument("--phase", type=int, choices=(1, 2), required=True)
    s.add_argument("--resume", default=None)
    s.add_argument("--data", default=None, help="override data_dir")
    s.add_argument("--out", default=None, help="override out_dir")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("forecast", help="autoregressive forecast from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--init", required=True, help="dataset directory holding initial states and forcing")
    s.add_argument("--forcing", choices=FORCING_KINDS, default="forecast")
    s.add_argument("--horizon", type=int, default=10)
    s.add_argument("--t0", type=int, default=None)
    s.add_argument("--clim-data", default=None, help="dataset directory for the forcing climatology")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_forecast)

    s = sub.add_parser("eval-rmse", help="per-lead RMSE CSV")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--region", default=None)
    s.add_argument("--depth-profile", action="store_true")
    s.add_argument("--cos-lat", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval_rmse)

    s = sub.add_parser("eval-spectra", help="surface KE spectra CSV")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--region", required=True)
    s.add_argument("--window", choices=("hann", "none"), default="hann")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval_spectra)
    return p


def _fail(code: int, kind: str, exc: BaseException) -> int:
    text = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error code={code} kind={kind}: {text}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None and args.threads < 1:
        return _fail(EXIT_CONFIG, "config", ValueError("--threads must be >= 1"))
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except (NumericalError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERICAL, "numerical", exc)
    except KeyError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except (DataError, FormatError, GraphError, OSError, ValueError) as exc:
        return _fail(EXIT_DATA, "data", exc)


if __name__ == "__main__":
    sys.exit(main())
