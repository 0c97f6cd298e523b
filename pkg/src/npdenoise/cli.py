"""Command-line entry point: ``npd <command> ...``.

Exit codes: 0 success, 1 usage/validation error, 2 data/format error,
3 numerical failure. Diagnostics go to stderr; results go to files under
``--out`` (or ``--report``) only.
"""

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__, data, io, kernels, metrics
from . import net as nn
from .errors import ConfigError, NPDError, NumericalError, UsageError
from .planefit import PlaneFitParams, fit_all

log = logging.getLogger("npdenoise")


@dataclass
class AblationConfig:
    alphas: list = field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7, 0.9])
    seeds: list = field(default_factory=lambda: [0])


@dataclass
class RunConfig:
    """Everything a run needs; mirrors ``NetConfig`` and ``BuildParams``."""

    net: nn.NetConfig = field(default_factory=nn.NetConfig)
    dataset: data.BuildParams = field(default_factory=data.BuildParams)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    out: str | None = None

    def to_dict(self):
        return asdict(self)


def _strict(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    return doc


def parse_run_config(doc):
    _strict(RunConfig, doc, "config")
    try:
        n = _strict(nn.NetConfig, doc.get("net", {}), "config.net")
        n = dict(n)
        if "alpha_schedule" in n:
            n["alpha_schedule"] = nn.AlphaSchedule(**_strict(nn.AlphaSchedule, n["alpha_schedule"], "config.net.alpha_schedule"))
        if "optimizer" in n:
            n["optimizer"] = nn.AdamConfig(**_strict(nn.AdamConfig, n["optimizer"], "config.net.optimizer"))
        d = dict(_strict(data.BuildParams, doc.get("dataset", {}), "config.dataset"))
        if "plane_fit" in d:
            d["plane_fit"] = PlaneFitParams(**_strict(PlaneFitParams, d["plane_fit"], "config.dataset.plane_fit"))
        a = _strict(AblationConfig, doc.get("ablation", {}), "config.ablation")
        return RunConfig(nn.NetConfig(**n), data.BuildParams(**d), AblationConfig(**a), doc.get("out"))
    except TypeError as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc


def load_run_config(path):
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror or exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_run_config(doc)


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_run_record(out_dir, command, argv, config=None, seeds=None, inputs=()):
    cfg = config.to_dict() if hasattr(config, "to_dict") else (config or {})
    blob = json.dumps(cfg, sort_keys=True).encode()
    record = {
        "command": command,
        "argv": list(argv),
        "config": cfg,
        "config_sha256": hashlib.sha256(blob).hexdigest(),
        "seeds": seeds or {},
        "inputs": {str(p): _sha256(p) for p in inputs if Path(p).is_file()},
        "versions": {
            "npdenoise": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
            "kernels": kernels.BACKEND,
        },
    }
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _apply_net_overrides(cfg, args):
    n = cfg.net
    if getattr(args, "epochs", None) is not None:
        n.alpha_schedule.epochs = args.epochs
    if getattr(args, "seed", None) is not None:
        n.seed = args.seed
    if getattr(args, "lr", None) is not None:
        n.optimizer.lr = args.lr
    n.validate()


# commands --------------------------------------------------------------------

def cmd_sample(args, argv):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, src in enumerate(args.meshes):
        name, mesh = data.resolve_mesh_source(src)
        pts = data.sample_surface(mesh, args.n, args.seed + i)
        if not args.no_normalize:
            pts, _ = data.normalize_unit_cube(pts)
        stem = Path(name).stem if not name.startswith("analytic:") else name.replace(":", "_")
        path = out / f"{stem}.pcb"
        io.write_cloud(path, pts)
    write_run_record(out, "sample", argv, {"n": args.n, "seed": args.seed, "normalize": not args.no_normalize},
                     {"seed": args.seed}, [m for m in args.meshes if Path(m).is_file()])
    return 0


def cmd_preprocess(args, argv):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = PlaneFitParams(eps_scale=args.eps_scale, max_k=args.max_k)
    stats, failed = [], 0
    for path in args.clouds:
        cloud = io.read_cloud(path)
        planes, report = fit_all(cloud, params)
        row = {"cloud": str(path), **report.to_dict(), "degenerate_count": len(report.degenerate)}
        if report.degenerate:
            failed += 1
            log.error("%s: degenerate plane fit at %d points", path, len(report.degenerate))
        else:
            target = out / (Path(path).stem.replace(".clean", "") + ".planes.pln")
            io.write_planes(target, planes)
            row["planes"] = str(target)
        stats.append(row)
    (out / "preprocess_stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    write_run_record(out, "preprocess", argv, params.to_dict(), {}, args.clouds)
    return NumericalError.exit_code if failed else 0


def cmd_build(args, argv):
    cfg = load_run_config(args.config)
    p = cfg.dataset
    for key in ("n_points", "sigma", "seed", "holdout"):
        v = getattr(args, key)
        if v is not None:
            setattr(p, key, v)
    if args.eps_scale is not None:
        p.plane_fit.eps_scale = args.eps_scale
    if args.max_k is not None:
        p.plane_fit.max_k = args.max_k
    sources = list(args.meshes)
    if args.analytic:
        sources += data.analytic_corpus(args.analytic, p.seed)
    if not sources:
        raise UsageError("no meshes given (pass mesh paths and/or --analytic N)")
    p = data.BuildParams(p.n_points, p.sigma, p.plane_fit, p.seed, p.holdout)
    manifest = data.build_dataset(sources, args.out, p)
    write_run_record(args.out, "build", argv, asdict(p), {"seed": p.seed},
                     [m for m in args.meshes if Path(m).is_file()])
    return 0


def _train_from_manifest(manifest, cfg):
    manifest.validate()
    train_set = manifest.training_samples("train")
    has_test = any(e.split == "test" for e in manifest.entries)
    val_set = manifest.training_samples("test") if has_test else []
    params, history = nn.train(train_set, cfg, val_samples=val_set)
    return params, history


def cmd_train(args, argv):
    cfg = load_run_config(args.config)
    _apply_net_overrides(cfg, args)
    manifest = data.DatasetManifest.load(args.dataset)
    params, history = _train_from_manifest(manifest, cfg.net)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"id": f"{manifest.dataset_id}-seed{cfg.net.seed}", "dataset": manifest.dataset_id,
            "epochs": len(history.records)}
    nn.save_checkpoint(params, cfg.net, out / "checkpoint.npd", meta)
    history.write_csv(out / "history.csv")
    (out / "history.json").write_text(json.dumps(history.to_dicts(), indent=2) + "\n")
    write_run_record(out, "train", argv, cfg, {"net": cfg.net.seed},
                     [manifest.root / "manifest.json"] + ([args.config] if args.config else []))
    return 0


def cmd_denoise(args, argv):
    params, config = nn.load_checkpoint(args.checkpoint)
    cloud = io.read_cloud(args.input)
    den, planes, bad = nn.denoise_with_mask(cloud, params, config)
    if bad.any():
        log.warning("%d degenerate planes; those points were left unchanged", int(bad.sum()))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_cloud(out / "denoised.pcb", den)
    io.write_planes(out / "planes.pln", planes)
    write_run_record(out, "denoise", argv, {"degenerate": int(bad.sum())}, {}, [args.checkpoint, args.input])
    return 0


def cmd_eval(args, argv):
    report = metrics.evaluate(args.dataset, args.checkpoint, split=args.split)
    out = Path(args.report)
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "report.json")
    report.write_csv(out / "report.csv")
    write_run_record(out, "eval", argv, {"split": args.split}, {}, [args.checkpoint])
    return 0


def run_ablation(manifest, cfg, mode, alphas=None, seeds=None):
    """Train and score the ablation variants; returns CSV-ready row dicts."""
    manifest.validate()
    train_set = manifest.training_samples("train")
    test_items = [(e.id, manifest.load_clean(e), manifest.load_noisy(e)) for e in manifest.select("test")]
    alphas = list(alphas if alphas is not None else cfg.ablation.alphas)
    seeds = list(seeds if seeds is not None else cfg.ablation.seeds)
    base = cfg.net
    rows = []

    def score(ncfg):
        params, _ = nn.train(train_set, ncfg)
        agg = metrics.evaluate_clouds(test_items, params, ncfg).aggregates
        return agg["mse_denoised"]["mean"], agg["cd_denoised"]["mean"]

    for seed in seeds:
        if mode == "alpha-sweep":
            for a in alphas:
                if not 0.0 <= a <= 1.0:
                    raise ConfigError(f"alpha {a} outside [0, 1]")
                ncfg = nn.NetConfig.from_dict({**base.to_dict(), "seed": seed,
                                                "alpha_schedule": {**asdict(base.alpha_schedule), "start": a, "end": a}})
                m, c = score(ncfg)
                rows.append({"alpha": a, "mse": m, "cd": c, "seed": seed})
                log.info("alpha=%.2f seed=%d mse=%.6g cd=%.6g", a, seed, m, c)
        elif mode == "global-feature":
            for variant, use_global in (("local+global", True), ("local-only", False)):
                ncfg = nn.NetConfig.from_dict({**base.to_dict(), "seed": seed, "use_global": use_global})
                m, c = score(ncfg)
                rows.append({"variant": variant, "mse": m, "cd": c, "seed": seed})
                log.info("%s seed=%d mse=%.6g cd=%.6g", variant, seed, m, c)
        else:
            raise UsageError(f"unknown ablation mode {mode!r}")
    return rows


def cmd_ablate(args, argv):
    cfg = load_run_config(args.config)
    _apply_net_overrides(cfg, args)
    alphas = _floats(args.alphas) if args.alphas else None
    seeds = _ints(args.seeds) if args.seeds else None
    manifest = data.DatasetManifest.load(args.dataset)
    rows = run_ablation(manifest, cfg, args.mode, alphas, seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    multi = len({r["seed"] for r in rows}) > 1
    if args.mode == "alpha-sweep":
        cols = ["alpha", "mse", "cd"]
        name = "alpha_sweep.csv"
    else:
        cols = ["variant", "mse", "cd"]
        name = "global_feature.csv"
    if multi:
        cols.append("seed")
    with open(out / name, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    write_run_record(out, "ablate", argv, cfg, {"seeds": sorted({r["seed"] for r in rows})},
                     [manifest.root / "manifest.json"])
    return 0


def build_parser():
    p = _Parser(prog="npd", description="Point-cloud denoising by learned reference planes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("sample", help="sample point clouds from meshes")
    s.add_argument("meshes", nargs="+", help="OFF/OBJ paths or analytic:<kind>:<seed>")
    s.add_argument("--n", type=int, default=2048)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-normalize", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("preprocess", help="fit reference planes to clean clouds")
    s.add_argument("clouds", nargs="+")
    s.add_argument("--eps-scale", type=float, default=PlaneFitParams.eps_scale)
    s.add_argument("--max-k", type=int, default=PlaneFitParams.max_k)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("build", help="build a clean/noisy/planes dataset")
    s.add_argument("meshes", nargs="*")
    s.add_argument("--analytic", type=int, default=0, help="add N analytic shapes")
    s.add_argument("--config")
    s.add_argument("--n-points", dest="n_points", type=int)
    s.add_argument("--sigma", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--holdout", type=int)
    s.add_argument("--eps-scale", type=float)
    s.add_argument("--max-k", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build)

    s = sub.add_parser("train", help="train the network on a dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--config")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("denoise", help="denoise one PCB1 cloud")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_denoise)

    s = sub.add_parser("eval", help="score a checkpoint on a dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="alpha sweep or global-feature ablation")
    s.add_argument("--dataset", required=True)
    s.add_argument("--mode", required=True, choices=["alpha-sweep", "global-feature"])
    s.add_argument("--config")
    s.add_argument("--alphas")
    s.add_argument("--seeds")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.INFO)
        return args.func(args, argv)
    except NPDError as exc:
        print(f"npd: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"npd: numerical failure: {exc}", file=sys.stderr)
        return NumericalError.exit_code


if __name__ == "__main__":
    sys.exit(main())
