"""Command-line entry point: synth, extract, aggregate, run, explain, report.

Every command reads one JSON config (flags --seed/--out/--jobs override it),
emits files whose names embed the seed and a config hash, and finishes by
writing a digest manifest of everything it produced. Exit codes: 0 ok,
2 config error, 3 data error, 4 internal invariant failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, LootscanError
from .evaluate import (
    EvalReport,
    config_from_dict,
    extract_feature_table,
    feature_layout_tag,
    parse_months,
    run_experiment,
    stratified_kfold,
)
from .embeddings import align_series
from .features import FEATURE_NAMES, FeatureTable, extract_handcrafted, write_feature_table, read_feature_table
from .models import save_model
from .raster import Mask, load_manifest, load_mask, load_patch
from .synth import SceneParams, gen_dataset
from .temporal import AGGREGATORS, MonthlySequence
from .explain import importance_pipeline


def _canonical(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def _config_hash(data) -> str:
    return hashlib.sha256(_canonical(data).encode()).hexdigest()[:8]


def _load_config(args) -> dict:
    if not args.config:
        raise ConfigError("--config PATH is required for this command")
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"no such config file: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["out"] = args.out
    if args.jobs is not None:
        data["jobs"] = args.jobs
    if "seed" not in data:
        raise ConfigError("config needs an explicit integer seed (no clock defaults)")
    if not isinstance(data["seed"], int):
        raise ConfigError("seed must be an integer")
    data["_base_dir"] = str(path.parent)
    return data


def _out_dir(cfg: dict) -> Path:
    if "out" not in cfg:
        raise ConfigError("config needs an output directory ('out')")
    out = Path(cfg["_base_dir"]) / cfg["out"]
    out.mkdir(parents=True, exist_ok=True)
    return out


def _tag(cfg: dict) -> str:
    public = {k: v for k, v in cfg.items() if not k.startswith("_")}
    return f"s{cfg['seed']}_{_config_hash(public)}"


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_digests(out: Path, tag: str, files: list[Path]) -> Path:
    digest_path = out / f"digests_{tag}.json"
    record = {str(p.relative_to(out)): _sha256(p) for p in sorted(files)}
    digest_path.write_text(json.dumps(record, sort_keys=True, indent=1) + "\n")
    return digest_path


def _fmt(v) -> str:
    if v is None:
        return ""
    return f"{v:.17g}"


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    tag = _tag(cfg)
    scene = SceneParams(**cfg.get("scene", {}))
    months = list(parse_months(cfg.get("months", "2023_01..2023_12")))
    dataset_dir = out / f"dataset_{tag}"
    gen_dataset(
        n_sites=int(cfg["n_sites"]),
        looted_fraction=float(cfg["looted_fraction"]),
        months=months,
        params=scene,
        seed=cfg["seed"],
        out_dir=dataset_dir,
    )
    files = [p for p in dataset_dir.rglob("*") if p.is_file()]
    _write_digests(out, tag, files)
    print(f"synth: wrote {len(files)} files under {dataset_dir}")
    return 0


# ---------------------------------------------------------------------------
# extract (optionally multi-process across sites)


def _extract_site(payload):
    site_id, mask_path, month_paths, masked = payload
    mask = load_mask(mask_path, site_id) if masked else None
    rows = []
    for month, patch_path in month_paths:
        patch = load_patch(patch_path, site_id, month)
        use = mask if masked else Mask(
            values=np.ones((patch.height, patch.width), dtype=np.uint8),
            site_id=site_id,
        )
        rows.append((month, extract_handcrafted(patch, use).values))
    return site_id, rows


def cmd_extract(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    tag = _tag(cfg)
    base = Path(cfg["_base_dir"])
    manifest = load_manifest(base / cfg["manifest"])
    months = list(parse_months(cfg["months"]))
    masked = bool(cfg.get("masked", True))
    jobs = int(cfg.get("jobs", 1))
    table = FeatureTable(dim=len(FEATURE_NAMES), rows={})
    if jobs > 1:
        payloads = []
        for e in manifest.entries:
            missing = [m for m in months if m not in e.months]
            if missing:
                raise DataError(f"site {e.site_id}: no patch for months {missing}")
            payloads.append(
                (
                    e.site_id,
                    str(e.mask_path),
                    [(m, str(e.patch_path(m))) for m in months],
                    masked,
                )
            )
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for site_id, rows in pool.map(_extract_site, payloads, chunksize=4):
                for month, values in rows:
                    table.add(site_id, month, values)
    else:
        table = extract_feature_table(manifest, months, masked)
    path = out / f"features_{tag}.csv"
    write_feature_table(path, table)
    _write_digests(out, tag, [path])
    print(f"extract: {len(table.rows)} rows -> {path}")
    return 0


# ---------------------------------------------------------------------------
# aggregate (stateless reducers only; PCA is fold-scoped inside `run`)


def cmd_aggregate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    tag = _tag(cfg)
    base = Path(cfg["_base_dir"])
    agg_name = cfg.get("aggregation", "mean")
    if agg_name == "pca":
        raise ConfigError(
            "PCA aggregation is fit per training fold inside `run`; "
            "it cannot be materialized as a standalone dataset-wide artifact"
        )
    if agg_name not in AGGREGATORS:
        raise ConfigError(f"unknown aggregation {agg_name!r}")
    manifest = load_manifest(base / cfg["manifest"])
    months = sorted(parse_months(cfg["months"]))
    table = read_feature_table(base / cfg["features_csv"])
    aligned = align_series(table, manifest, months)
    window = f"{months[0]}..{months[-1]}" if len(months) > 1 else months[0]
    agg = AGGREGATORS[agg_name]
    first = next(iter(aligned.values()))
    sample = agg(MonthlySequence(site_id="_", months=tuple(months), vectors=first))
    out_table = FeatureTable(dim=sample.shape[0], rows={})
    for sid, block in aligned.items():
        vec = agg(MonthlySequence(site_id=sid, months=tuple(months), vectors=block))
        out_table.add(sid, window, vec)
    path = out / f"aggregated_{agg_name}_{tag}.csv"
    write_feature_table(path, out_table)
    _write_digests(out, tag, [path])
    print(f"aggregate: {len(out_table.rows)} sites -> {path}")
    return 0


# ---------------------------------------------------------------------------
# run


def _summary_rows(cfg_echo: dict, report: EvalReport) -> list[list[str]]:
    header = [
        "feature", "aggregation", "model", "masked", "mask_dilation", "seed", "folds",
    ]
    for name in ("accuracy", "precision", "recall", "f1", "auroc"):
        header += [f"{name}_mean", f"{name}_std"]
    header.append("auroc_defined")
    row = [
        cfg_echo["feature"],
        cfg_echo["aggregation"],
        cfg_echo["model"],
        str(cfg_echo["masked"]).lower(),
        cfg_echo["mask_dilation"],
        str(cfg_echo["seed"]),
        str(cfg_echo["folds"]),
    ]
    for name in ("accuracy", "precision", "recall", "f1", "auroc"):
        cell = report.summary[name]
        row += [_fmt(cell["mean"]), _fmt(cell["std"])]
    row.append(str(report.summary["auroc"]["n_defined"]))
    return [header, row]


def cmd_run(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    tag = _tag(cfg)
    config = config_from_dict(cfg, base_dir=cfg["_base_dir"])
    report = run_experiment(config)
    files = []
    report_path = out / f"report_{tag}.json"
    report_path.write_text(json.dumps(report.as_dict(), sort_keys=True, indent=1) + "\n")
    files.append(report_path)
    summary_path = out / f"summary_{tag}.csv"
    with open(summary_path, "w", newline="") as fh:
        csv.writer(fh).writerows(_summary_rows(report.config, report))
    files.append(summary_path)
    layout = feature_layout_tag(config)
    for fold in report.folds:
        model_path = out / f"model_fold{fold.fold}_{tag}.json"
        save_model(model_path, fold.model, feature_layout=layout)
        files.append(model_path)
    _write_digests(out, tag, files)
    f1 = report.summary["f1"]["mean"]
    print(f"run: mean F1 {f1:.3f} -> {report_path}")
    return 0


# ---------------------------------------------------------------------------
# explain


def cmd_explain(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    tag = _tag(cfg)
    base = Path(cfg["_base_dir"])
    agg_name = cfg.get("aggregation", "mean")
    if agg_name not in ("mean", "median", "trend"):
        raise ConfigError(
            "explain needs a per-feature aggregation (mean, median, or trend) "
            "so importances map back to named features"
        )
    manifest = load_manifest(base / cfg["manifest"])
    months = sorted(parse_months(cfg["months"]))
    masked = bool(cfg.get("masked", True))
    table = extract_feature_table(manifest, months, masked)
    aligned = align_series(table, manifest, months)
    agg = AGGREGATORS[agg_name]
    site_order = manifest.site_ids()
    labels = manifest.labels()
    X = np.stack([
        agg(MonthlySequence(site_id=s, months=tuple(months), vectors=aligned[s]))
        for s in site_order
    ])
    y = np.array([labels[s] for s in site_order])
    plan = stratified_kfold(manifest, k=int(cfg.get("folds", 5)), seed=cfg["seed"])
    top_k = int(cfg.get("top_k", 10))
    importance, shap = importance_pipeline(
        X, y, site_order, FEATURE_NAMES, plan, seed=cfg["seed"], top_k=top_k,
        background_cap=int(cfg.get("background_cap", 256)),
        retrain_params=cfg.get("retrain"),
    )
    files = []
    imp_path = out / f"importance_{tag}.csv"
    with open(imp_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "ensemble_importance", "rank"])
        for rank, idx in enumerate(importance.order, start=1):
            writer.writerow(
                [importance.names[idx], _fmt(importance.importance[idx]), rank]
            )
    files.append(imp_path)
    shap_path = out / f"shap_summary_{tag}.csv"
    with open(shap_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "mean_abs_shap", "rank"])
        for rank, pos in enumerate(shap.order, start=1):
            writer.writerow(
                [shap.feature_names[pos], _fmt(shap.mean_abs[pos]), rank]
            )
    files.append(shap_path)
    inst_path = out / f"shap_instances_{tag}.csv"
    with open(inst_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["site_id", "fold", "base_value", "margin"]
            + [f"phi_{n}" for n in shap.feature_names]
        )
        for i, sid in enumerate(shap.site_ids):
            writer.writerow(
                [sid, int(shap.fold_of[i]), _fmt(shap.base_values[i]), _fmt(shap.margins[i])]
                + [_fmt(v) for v in shap.phi[i]]
            )
    files.append(inst_path)
    _write_digests(out, tag, files)
    best = shap.feature_names[shap.order[0]]
    print(f"explain: top feature by mean |SHAP| is {best} -> {shap_path}")
    return 0


# ---------------------------------------------------------------------------
# report (consolidate summary CSVs across runs)


def cmd_report(args) -> int:
    dirs = [Path(d) for d in args.dirs]
    if not dirs:
        raise ConfigError("report needs at least one directory to scan")
    rows = []
    header = None
    for d in dirs:
        if not d.exists():
            raise DataError(f"no such directory: {d}")
        for path in sorted(d.rglob("summary_*.csv")):
            with open(path, newline="") as fh:
                reader = csv.reader(fh)
                h = next(reader, None)
                if h is None:
                    continue
                if header is None:
                    header = h
                elif h != header:
                    raise DataError(f"{path}: summary header mismatch")
                rows.extend(reader)
    if header is None:
        raise DataError("no summary_*.csv files found under the given directories")
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3], r[4], r[5]))
    out = Path(args.out) if args.out else dirs[0]
    out.mkdir(parents=True, exist_ok=True)
    path = out / "consolidated_report.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    print(f"report: {len(rows)} configurations -> {path}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lootscan",
        description="Looted-site classification pipeline over LSP1 patch datasets",
    )
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="override the config output directory")
    parser.add_argument("--jobs", type=int, help="worker process bound")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("synth", cmd_synth),
        ("extract", cmd_extract),
        ("aggregate", cmd_aggregate),
        ("run", cmd_run),
        ("explain", cmd_explain),
    ):
        p = sub.add_parser(name)
        p.set_defaults(func=fn)
    rep = sub.add_parser("report")
    rep.add_argument("dirs", nargs="*", help="run output directories to scan")
    rep.set_defaults(func=cmd_report)
    return parser


def _emit_error(exc: Exception, code: int) -> None:
    record = {
        "error": type(exc).__name__,
        "exit_code": code,
        "message": str(exc),
    }
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except LootscanError as exc:
        _emit_error(exc, exc.exit_code)
        return exc.exit_code
    except Exception as exc:  # pragma: no cover - unexpected failure path
        traceback.print_exc()
        _emit_error(exc, 1)
        return 1


if __name__ == "__main__":
    sys.exit(main())
