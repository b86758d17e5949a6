"""Command-line pipeline: synth, ingest, fit-conversion, fit-premium, optimize, sweep, report.

Artifacts go under the output directory (``--out`` or ``out`` in the
config)::

    portfolio.bin(.json)      encoded portfolio cache         (ingest)
    preprocess_report.json                                    (ingest)
    conversion.json, conversion_metrics.json                  (fit-conversion)
    premium.json, premium_metrics.json                        (fit-premium)
    optimize/<method>/...     model or solution, trace, metrics (optimize)
    sweep/frontier.{json,csv}                                 (sweep)
    report/*.svg, report/dominance.json                       (report)
    manifests/<command>.json  config hash, data fingerprint, versions, seed

Exit codes: 0 success, 2 configuration or missing-dependency error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from fairprice import __version__
from fairprice import autodiff as ad
from fairprice.baselines import individual_optimize
from fairprice.boosting import fit_indirect_ratebook
from fairprice.config import RunConfig, load_config, mapping_toml
from fairprice.data import SPLITS, ConfigurationError, load_cache, load_portfolio, save_cache
from fairprice.eval import (METHODS, FrontierTable, SweepContext, conversion_rate, dominance_check,
                            fairness_report, gwm, sweep)
from fairprice.models import (CoefficientModel, PremiumModel, TrainingError, fit_conversion,
                              fit_premium, load_model, log_loss, save_model)
from fairprice.optimize import config_dict, train_fair_optigrad, train_optigrad
from fairprice.synth import SynthConfig, config_dict as synth_dict, default_mapping, write_csv

log = logging.getLogger("fairprice")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class DependencyError(ConfigurationError):
    """A pipeline step ran before the step it depends on."""


# ---------------------------------------------------------------- helpers

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict:
    import matplotlib
    import pandas
    import scipy
    return {"fairprice": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pandas": pandas.__version__, "matplotlib": matplotlib.__version__}


def write_manifest(out: Path, name: str, cfg: RunConfig | None, seed, outputs, fingerprint=None,
                   extra: dict | None = None) -> Path:
    """Everything needed to reproduce ``outputs``: config, its hash, data fingerprint, versions, seed."""
    outputs = [Path(p) for p in outputs]
    doc = {
        "command": name,
        "config": cfg.to_dict() if cfg is not None else None,
        "config_hash": cfg.config_hash() if cfg is not None else None,
        "dataset_fingerprint": fingerprint,
        "seed": seed,
        "versions": _versions(),
        "outputs": {str(p.relative_to(out)): _sha256(p) for p in outputs if p.exists()},
        **(extra or {}),
    }
    path = out / "manifests" / f"{name}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def _json(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def _require(path: Path, step: str) -> Path:
    if not path.exists():
        raise DependencyError(f"{path} not found; run `{step}` first")
    return path


def _portfolio(out: Path):
    return load_cache(_require(out / "portfolio.bin", "ingest"))


def _premium(cfg: RunConfig, out: Path, portfolio) -> np.ndarray:
    path = out / "premium.json"
    if path.exists():
        model = load_model(path)
    elif cfg.premium.source == "column":
        model = PremiumModel("column")
    else:
        raise DependencyError(f"{path} not found; run `fit-premium` first (premium.source = 'fitted')")
    h = model.premium(portfolio)
    if not np.all(h > 0):
        raise ConfigurationError("pure premium must be positive for every record")
    return h


def _conversion(out: Path):
    return load_model(_require(out / "conversion.json", "fit-conversion"))


def _split_metrics(portfolio, h, coefficients_for, fmodel, bounds, sensitive_index=0, fairness=False,
                   cfg: RunConfig | None = None) -> dict:
    metrics = {}
    for name in SPLITS:
        idx = portfolio.split.indices(name)
        if len(idx) == 0:
            continue
        part = portfolio.subset(idx, name)
        c = coefficients_for(name, part)
        row = {"n": int(len(idx)), "gwm": gwm(part.X, h[idx], c, fmodel, bounds),
               "conversion_rate": conversion_rate(part.X, h[idx], c, fmodel, bounds),
               "coefficient_min": float(np.min(c)), "coefficient_max": float(np.max(c))}
        if fairness and part.sensitive is not None and len(idx) >= 50:
            rep = fairness_report(c * h[idx], part.sensitive[:, sensitive_index], cfg.fairness.rdc_seeds,
                                  cfg.fairness.hgr_config())
            row.update(rdc=rep.rdc, hgr=rep.hgr, pearson=rep.pearson, degenerate=rep.degenerate)
        metrics[name] = row
    return metrics


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: RunConfig, args, out: Path) -> int:
    s = cfg.synth
    scfg = SynthConfig(n=s.n, n_features=s.n_features, elasticity=s.elasticity, dependence=s.dependence,
                       seed=s.seed if args.seed is None else args.seed)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "synth.csv"
    write_csv(csv_path, scfg)
    mapping = default_mapping(scfg)
    cfg_path = out / "synth_config.toml"
    cfg_path.write_text(f'out = "."\n\n[data]\npath = "synth.csv"\n\n{mapping_toml(mapping)}')
    write_manifest(out, "synth", None, scfg.seed, [csv_path, cfg_path], extra={"synth": synth_dict(scfg)})
    print(f"wrote {csv_path} ({scfg.n} rows) and {cfg_path}")
    return EXIT_OK


def cmd_ingest(cfg: RunConfig, args, out: Path) -> int:
    if cfg.data.mapping is None or not cfg.data.path:
        raise ConfigurationError("ingest needs [data] path and [data.mapping]")
    portfolio, report = load_portfolio(cfg.data.path, cfg.data.mapping, cfg.data.ratios, cfg.data.seed)
    out.mkdir(parents=True, exist_ok=True)
    cache = out / "portfolio.bin"
    save_cache(portfolio, cache, {"mapping_fingerprint": cfg.data.mapping.fingerprint(),
                                  "encoder": portfolio.encoder.to_dict()})
    rep = _json(out / "preprocess_report.json", report.to_dict())
    write_manifest(out, "ingest", cfg, cfg.data.seed, [cache, Path(str(cache) + ".json"), rep],
                   portfolio.fingerprint())
    print(f"loaded {report.n_loaded} of {report.n_rows} rows; rejected {dict(report.rejections)}")
    return EXIT_OK


def cmd_fit_conversion(cfg: RunConfig, args, out: Path) -> int:
    portfolio = _portfolio(out)
    c = cfg.conversion
    seed = c.seed if args.seed is None else args.seed
    train, dev = portfolio.part("train"), portfolio.part("dev")
    model = fit_conversion(train, dev, c.lr, c.epochs, c.batch_size, seed, c.momentum, c.patience)
    path = out / "conversion.json"
    save_model(model, path, cfg.data.mapping.fingerprint() if cfg.data.mapping else None)
    metrics = {"train_log_loss": model.train_log_loss, "dev_log_loss": model.dev_log_loss, "w_p": model.w_p,
               "dev_mean_conversion_at_hist_price": float(np.mean(model.predict(dev.X, dev.price)))}
    mpath = _json(out / "conversion_metrics.json", metrics)
    write_manifest(out, "fit-conversion", cfg, seed, [path, mpath], portfolio.fingerprint())
    print(json.dumps(metrics, indent=2))
    return EXIT_OK


def cmd_fit_premium(cfg: RunConfig, args, out: Path) -> int:
    portfolio = _portfolio(out)
    if cfg.premium.source == "column":
        if portfolio.premium is None:
            raise ConfigurationError("premium.source = 'column' but the data has no premium column")
        model = PremiumModel("column")
    else:
        model = fit_premium(portfolio.part("train"), iterations=cfg.premium.iterations)
    path = out / "premium.json"
    save_model(model, path, cfg.data.mapping.fingerprint() if cfg.data.mapping else None)
    h = model.premium(portfolio)
    metrics = {"source": model.kind, "min": float(h.min()), "max": float(h.max()), "mean": float(h.mean())}
    mpath = _json(out / "premium_metrics.json", metrics)
    write_manifest(out, "fit-premium", cfg, None, [path, mpath], portfolio.fingerprint())
    print(json.dumps(metrics, indent=2))
    return EXIT_OK


def cmd_optimize(cfg: RunConfig, args, out: Path) -> int:
    method = args.method
    if method not in METHODS:
        raise ConfigurationError(f"--method must be one of {METHODS}")
    portfolio = _portfolio(out)
    fmodel = _conversion(out)
    h = _premium(cfg, out, portfolio)
    tcfg = cfg.train.train_config(**({} if args.seed is None else {"seed": args.seed}))
    bounds = tcfg.bounds
    k = cfg.sensitive_index()
    base = out / "optimize" / method
    base.mkdir(parents=True, exist_ok=True)
    train_idx = portfolio.split.indices("train")
    train = portfolio.part("train")
    outputs = []
    extra = {"train_config": config_dict(tcfg)}

    if method in ("optigrad", "fair-optigrad"):
        dev = portfolio.part("dev")
        h_train, h_dev = h[train_idx], h[portfolio.split.indices("dev")]
        d = train.X.shape[1]
        if cfg.coefficient.model == "mlp":
            cmodel = CoefficientModel.mlp(d, cfg.coefficient.hidden, bounds, tcfg.seed)
        else:
            cmodel = CoefficientModel.linear(d, bounds, tcfg.seed)
        try:
            if method == "optigrad":
                result = train_optigrad(train, fmodel, h_train, cmodel, tcfg, dev, h_dev)
            else:
                if train.sensitive is None:
                    raise ConfigurationError("fair-optigrad needs sensitive columns in the mapping")
                train = replace(train, sensitive=train.sensitive[:, [k]])
                dev = replace(dev, sensitive=dev.sensitive[:, [k]])
                result = train_fair_optigrad(train, fmodel, h_train, cmodel, tcfg, dev, h_dev)
        except TrainingError as exc:
            trace = getattr(exc, "trace", None)
            if trace is not None:
                trace.to_csv(base / "trace.partial.csv")
                print(f"partial trace kept at {base / 'trace.partial.csv'}", file=sys.stderr)
            raise
        fp = cfg.data.mapping.fingerprint() if cfg.data.mapping else None
        save_model(result.model, base / "coefficient_model.json", fp)
        save_model(result.final, base / "coefficient_model_final.json", fp)
        result.trace.to_csv(base / "trace.csv")
        outputs += [base / "coefficient_model.json", base / "coefficient_model_final.json", base / "trace.csv"]
        if result.adversary is not None:
            adv = {"phi": {"layer_sizes": result.adversary.phi.layer_sizes(),
                           "params": [p.tolist() for p in result.adversary.phi.params()]},
                   "psi": {"layer_sizes": result.adversary.psi.layer_sizes(),
                           "params": [p.tolist() for p in result.adversary.psi.params()]}}
            outputs.append(_json(base / "adversary.json", adv))
        extra["best_epoch"] = result.best_epoch
        extra["selection"] = result.selection
        metrics = _split_metrics(portfolio, h, lambda name, part: result.chosen.coefficient(part.X), fmodel,
                                 bounds, k, args.fairness, cfg)
    elif method == "individual":
        b = cfg.baselines

        def solve(name, part):
            idx = portfolio.split.indices(name)
            return individual_optimize(part.X, h[idx], fmodel, tcfg.lambda_f, bounds, b.grid_step,
                                       b.refine).coefficients

        sol = individual_optimize(train.X, h[train_idx], fmodel, tcfg.lambda_f, bounds, b.grid_step, b.refine)
        sol.to_csv(base / "individual_train.csv", ids=train_idx)
        outputs.append(base / "individual_train.csv")
        extra["lambda_f"] = tcfg.lambda_f
        metrics = _split_metrics(portfolio, h, solve, fmodel, bounds, k, args.fairness, cfg)
    else:  # indirect
        src = out / "optimize" / "individual" / "individual_train.csv"
        manifest = out / "manifests" / "optimize-individual.json"
        if not src.exists() or not manifest.exists():
            raise DependencyError("the indirect ratebook is fitted on individually optimized coefficients; "
                                  "run `optimize --method individual` first")
        prior = json.loads(manifest.read_text())
        if prior.get("lambda_f") != tcfg.lambda_f or prior.get("dataset_fingerprint") != portfolio.fingerprint():
            raise DependencyError("the individual solution on disk was computed for a different lambda_f or "
                                  "dataset; rerun `optimize --method individual`")
        import pandas as pd
        table = pd.read_csv(src)
        if not np.array_equal(table["record_id"].to_numpy(), train_idx):
            raise DependencyError("individual solution records do not match the train split")
        b = cfg.baselines
        model = fit_indirect_ratebook(train.X, table["coefficient"].to_numpy(), b.trees, b.depth,
                                      b.shrinkage, bounds)
        model.save(base / "ratebook.json")
        outputs.append(base / "ratebook.json")
        extra["lambda_f"] = tcfg.lambda_f
        metrics = _split_metrics(portfolio, h, lambda name, part: model.predict(part.X), fmodel, bounds, k,
                                 args.fairness, cfg)
    outputs.append(_json(base / "metrics.json", metrics))
    write_manifest(out, f"optimize-{method}", cfg, tcfg.seed, outputs, portfolio.fingerprint(), extra)
    print(json.dumps(metrics, indent=2))
    return EXIT_OK


def _sweep_context(cfg: RunConfig, out: Path, tcfg) -> SweepContext:
    portfolio = _portfolio(out)
    return SweepContext(
        portfolio=portfolio, fmodel=_conversion(out), premium=_premium(cfg, out, portfolio), train_config=tcfg,
        coefficient_model=cfg.coefficient.model, hidden=tuple(cfg.coefficient.hidden),
        sensitive_column=cfg.sensitive_index(), fairness=cfg.sweep.fairness and portfolio.sensitive is not None,
        fairness_splits=tuple(cfg.sweep.fairness_splits), hgr_config=cfg.fairness.hgr_config(),
        rdc_seeds=tuple(cfg.fairness.rdc_seeds), grid_step=cfg.baselines.grid_step,
        trees=cfg.baselines.trees, depth=cfg.baselines.depth, shrinkage=cfg.baselines.shrinkage)


def cmd_sweep(cfg: RunConfig, args, out: Path) -> int:
    tcfg = cfg.train.train_config()
    ctx = _sweep_context(cfg, out, tcfg)
    base = out / "sweep"
    base.mkdir(parents=True, exist_ok=True)
    store = base / "frontier.json"
    table = FrontierTable.from_json(store) if (args.resume and store.exists()) else FrontierTable()
    if table.points and table.provenance.get("dataset_fingerprint") not in (None, ctx.portfolio.fingerprint()):
        raise ConfigurationError("stored frontier table belongs to a different dataset; drop --resume")
    seeds = cfg.sweep.seeds if args.seed is None else (args.seed,)
    methods = [args.method] if args.method else list(cfg.sweep.methods)
    jobs = args.jobs or cfg.jobs
    provenance = {"config_hash": cfg.config_hash(), "dataset_fingerprint": ctx.portfolio.fingerprint()}
    for method in methods:
        lambda_s = cfg.sweep.lambda_S if method == "fair-optigrad" else (0.0,)
        grid = [(lf, ls) for lf in cfg.sweep.lambda_f for ls in lambda_s]
        sweep(ctx, method, grid, seeds, table, jobs, store, provenance)
    table.to_json(store)
    table.to_csv(base / "frontier.csv")
    ok = [p for p in table.points if p.status == "ok"]
    failed = [p for p in table.points if p.status != "ok"]
    for p in failed:
        print(f"failed: {p.key}: {p.error.splitlines()[0]}", file=sys.stderr)
    write_manifest(out, "sweep", cfg, list(seeds), [store, base / "frontier.csv"], ctx.portfolio.fingerprint(),
                   {"table_hash": table.table_hash(), "n_ok": len(ok), "n_failed": len(failed)})
    print(f"{len(ok)} frontier points ok, {len(failed)} failed -> {store}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_report(cfg: RunConfig, args, out: Path) -> int:
    from fairprice.plots import fairness_plot, frontier_plot
    store = _require(out / "sweep" / "frontier.json", "sweep")
    table = FrontierTable.from_json(store)
    base = out / "report"
    base.mkdir(parents=True, exist_ok=True)
    outputs = []
    methods = {p.method for p in table.points}
    for split in SPLITS:
        if table.select(split=split):
            path = base / f"frontier_{split}.svg"
            frontier_plot(table, path, split)
            outputs.append(path)
    if "fair-optigrad" in methods:
        path = base / "fairness_dev.svg"
        fairness_plot(table, path, "dev")
        outputs.append(path)
    window = cfg.sweep.dominance_window
    reports = {}
    for a, b, split in (("optigrad", "indirect", "dev"), ("individual", "indirect", "train"),
                        ("optigrad", "indirect", "test")):
        if a in methods and b in methods:
            reports[f"{a}_vs_{b}_{split}"] = dominance_check(table, a, b, window, split).to_dict()
    doc = {"dominance": reports}
    # held-out conversion of each method needs the test labels only here
    try:
        portfolio = _portfolio(out)
        test = portfolio.part("test")
        fmodel = _conversion(out)
        doc["test_conversion_log_loss"] = log_loss(fmodel.predict(test.X, test.price), test.y)
        doc["test_observed_sale_rate"] = float(np.mean(test.y))
    except ConfigurationError:
        pass
    outputs.append(_json(base / "dominance.json", doc))
    write_manifest(out, "report", cfg, None, outputs, table.provenance.get("dataset_fingerprint"),
                   {"table_hash": table.table_hash()})
    for name, rep in reports.items():
        frac = rep["fraction"]
        print(f"{name}: fraction {'n/a' if frac is None else f'{frac:.3f}'} over {rep['n_compared']} points")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "ingest": cmd_ingest, "fit-conversion": cmd_fit_conversion,
            "fit-premium": cmd_fit_premium, "optimize": cmd_optimize, "sweep": cmd_sweep, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairprice", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "synth", help="TOML run configuration")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, help="override the run seed")
        if name in ("optimize", "sweep"):
            p.add_argument("--method", choices=METHODS, required=name == "optimize")
        if name == "optimize":
            p.add_argument("--fairness", action="store_true", help="also report RDC/HGR_NN per split")
        if name == "sweep":
            p.add_argument("--jobs", type=int, help="worker processes")
            p.add_argument("--resume", action="store_true", help="skip points already in the stored table")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        out = Path(args.out) if args.out else Path(cfg.out)
        return COMMANDS[args.command](cfg, args, out)
    except (ConfigurationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, ad.EvaluationError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
