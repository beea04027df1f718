"""Report generation: aggregate CSVs, win-rate matrix, scenario radar,
latent-space analyses, and the ablation table."""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from . import evaluation
from . import temporal_encoder as s2
from .config import config_hash
from .pipeline import (PROBE_MODELS, RunPaths, SHORTCUT_CELLS, load_bin_weeks,
                       probe_cell, run_embed_weeks, _subject_vectors)
from .shards import read_manifest, require

log = logging.getLogger("hiersig")

TASKS = ("morph", "rhythm", "combined")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.10g}"
    return str(x)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def load_cells(paths: RunPaths) -> list[dict]:
    cells = []
    for f in sorted(paths.cells_dir.glob("*.json")):
        cells.append(json.loads(f.read_text()))
    if not cells:
        from .config import MissingArtifactError
        raise MissingArtifactError("no probe cells found; run `hiersig probe` first")
    return cells


def check_hashes(cfg: dict, paths: RunPaths, force: bool = False) -> None:
    """Refuse to aggregate artifacts produced under a different config."""
    h = config_hash(cfg)
    mismatched = []
    for artifact in [paths.labels_csv, paths.segments, paths.weeks,
                     paths.stage2_ck]:
        try:
            m = read_manifest(artifact)
        except Exception:
            continue
        if m.get("config_hash") != h:
            mismatched.append((str(artifact), m.get("config_hash")))
    for cell in paths.cells_dir.glob("*.json"):
        doc = json.loads(cell.read_text())
        if doc.get("config_hash") != h:
            mismatched.append((str(cell), doc.get("config_hash")))
    if mismatched and not force:
        from .config import ConfigError
        raise ConfigError(
            f"artifacts were produced under different config hashes "
            f"(expected {h}): {mismatched[:5]} ... use --force to override")


def table_report(cells: list[dict]) -> tuple[list[str], list[list]]:
    header = ["task", "model", "scenario", "auroc", "auroc_boot_mean",
              "auroc_ci_low", "auroc_ci_high", "pauc", "pauc_ci_low",
              "pauc_ci_high", "lambda"]
    rows = []
    for c in sorted(cells, key=lambda c: (c["task"], c["model"], c["scenario"])):
        rows.append([c["task"], c["model"], c["scenario"],
                     c["auroc"]["point"], c["auroc"]["mean"],
                     c["auroc"]["ci_low"], c["auroc"]["ci_high"],
                     c["pauc"]["point"], c["pauc"]["ci_low"],
                     c["pauc"]["ci_high"], c.get("lambda")])
    return header, rows


def radar_table(cells: list[dict]) -> tuple[list[str], list[list]]:
    """Scenario x model mean AUROC across tasks (missingness radar)."""
    models = sorted({c["model"] for c in cells if c["scenario"] != "-"})
    scenarios = sorted({c["scenario"] for c in cells})
    rows = []
    for scen in scenarios:
        row = [scen]
        for m in models:
            pts = [c["auroc"]["point"] for c in cells
                   if c["model"] == m and c["scenario"] == scen]
            row.append(float(np.mean(pts)) if pts else None)
        rows.append(row)
    return ["scenario", *models], rows


def winrate_table(cells: list[dict]) -> tuple[list[str], list[list]]:
    by_model: dict[str, dict[str, float]] = {}
    for c in cells:
        if c["scenario"] == "all":
            by_model.setdefault(c["model"], {})[c["task"]] = c["auroc"]["point"]
    models, mat = evaluation.winrate_matrix(by_model)
    rows = [[models[i], *mat[i].tolist()] for i in range(len(models))]
    return ["model", *models], rows


def circadian_report(cfg: dict, paths: RunPaths, out_dir: Path) -> dict:
    """Similarity-vs-lag and reference-anchored weekly curves, model vs raw.

    Returns the lag-288 autocorrelation of both curves (the trained temporal
    model should exceed the raw Stage I bin means).
    """
    model, _ = s2.load_stage2(require(paths.stage2_ck, "pretrain-stage2"))
    weeks = [w for w in load_bin_weeks(require(paths.weeks, "embed-segments"))
             if not w.missing.all()]
    _, bins = s2.embed_weeks_batch(model, weeks)
    encoded = [(b, w.missing) for w, b in zip(weeks, bins) if b is not None]
    raw = [(w.values, w.missing) for w in weeks]

    curve_model = evaluation.similarity_vs_lag(encoded)
    curve_raw = evaluation.similarity_vs_lag(raw)
    ref_model = evaluation.reference_similarity(encoded)
    ref_raw = evaluation.reference_similarity(raw)
    stats = {
        "lag288_autocorr_model": evaluation.lag_autocorrelation(curve_model),
        "lag288_autocorr_raw": evaluation.lag_autocorrelation(curve_raw),
    }
    _write_csv(out_dir / "circadian_lag.csv",
               ["lag_bins", "model_similarity", "raw_similarity"],
               [[i + 1, curve_model[i], curve_raw[i]] for i in range(len(curve_model))])
    _write_csv(out_dir / "circadian_reference.csv",
               ["bin", "model_similarity", "raw_similarity"],
               [[t, ref_model[t], ref_raw[t]] for t in range(len(ref_model))])
    _plot_circadian(curve_model, curve_raw, ref_model, ref_raw,
                    out_dir / "circadian.svg")
    (out_dir / "circadian_stats.json").write_text(
        json.dumps(stats, indent=2, sort_keys=True) + "\n")
    return stats


def pe_report(paths: RunPaths, out_dir: Path) -> dict:
    model, _ = s2.load_stage2(require(paths.stage2_ck, "pretrain-stage2"))
    mats = evaluation.pe_similarity(model.pe.dow.detach().numpy(),
                                    model.pe.tod.detach().numpy())
    for name in ("dow_raw", "tod_raw", "dow_standardized", "tod_standardized"):
        mat = mats[name]
        _write_csv(out_dir / f"pe_{name}.csv",
                   ["i", *[str(j) for j in range(mat.shape[1])]],
                   [[i, *mat[i].tolist()] for i in range(mat.shape[0])])
    _plot_pe(mats, out_dir / "pe_similarity.svg")
    return {k: v.shape for k, v in mats.items()}


def ablation_report(cfg: dict, paths: RunPaths, out_dir: Path) -> list[dict]:
    """Ablation table plus shortcut-cell probes on the combined task."""
    results_file = paths.ablations_dir / "results.json"
    if not results_file.exists():
        return []
    results = json.loads(results_file.read_text())
    for name in SHORTCUT_CELLS:
        if name not in results:
            continue
        ck = paths.ablations_dir / f"{name}.ck1"
        run_embed_weeks(cfg, paths, scenarios=["all"], models=("pipeline",),
                        checkpoint_override={"pipeline": ck}, tag=f"{name}__")
        vectors = _subject_vectors(paths.week_vectors(f"{name}__pipeline", "all"))
        cell = probe_cell(cfg, paths, f"{name}__pipeline", "combined", "all", vectors)
        results[name]["auroc_combined"] = cell["auroc"]["point"]
    header = ["name", "n_ctx", "patch_sizes", "local_branch", "global_branch",
              "week_token", "eval_total", "eval_local", "eval_global",
              "auroc_combined"]
    rows = []
    for name in sorted(results):
        r = results[name]
        rows.append([r["name"], r["n_ctx"], "|".join(map(str, r["patch_sizes"])),
                     r["local_branch"], r["global_branch"], r["week_token"],
                     r["eval_total"], r["eval_local"], r["eval_global"],
                     r.get("auroc_combined")])
    _write_csv(out_dir / "ablations.csv", header, rows)
    return list(results.values())


def run_report(cfg: dict, paths: RunPaths, force: bool = False) -> dict:
    check_hashes(cfg, paths, force=force)
    out_dir = paths.reports_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = load_cells(paths)
    _write_csv(out_dir / "report.csv", *table_report(cells))
    _write_csv(out_dir / "radar.csv", *radar_table(cells))
    _write_csv(out_dir / "winrate.csv", *winrate_table(cells))
    circ = circadian_report(cfg, paths, out_dir)
    pe_report(paths, out_dir)
    ablation_report(cfg, paths, out_dir)
    log.info("report: %d cells, circadian lag288 model=%.3f raw=%.3f",
             len(cells), circ["lag288_autocorr_model"], circ["lag288_autocorr_raw"])
    return circ


def _plot_circadian(curve_model, curve_raw, ref_model, ref_raw, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    lags_h = (np.arange(1, len(curve_model) + 1)) / 12.0
    axes[0].plot(lags_h, curve_model, label="temporal encoder", lw=0.8)
    axes[0].plot(lags_h, curve_raw, label="raw bin means", lw=0.8)
    axes[0].set_xlabel("lag (hours)")
    axes[0].set_ylabel("mean cosine similarity")
    axes[0].legend()
    t_h = np.arange(len(ref_model)) / 12.0
    axes[1].plot(t_h, ref_model, label="temporal encoder", lw=0.8)
    axes[1].plot(t_h, ref_raw, label="raw bin means", lw=0.8)
    axes[1].set_xlabel("hours since Monday 00:00")
    axes[1].set_ylabel("similarity to Mon 9-10 AM")
    axes[1].legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)


def _plot_pe(mats: dict, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(13, 4))
    for ax, key, title in zip(
            axes, ("dow_raw", "tod_raw", "tod_standardized"),
            ("day-of-week", "time-of-day", "time-of-day (gap-standardized)")):
        im = ax.imshow(mats[key], cmap="coolwarm")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# reproduce
# ---------------------------------------------------------------------------

def run_reproduce(cfg: dict, paths: RunPaths, with_ablations: bool = True,
                  with_supervised: bool = True) -> dict:
    """The full experiment: generate, preprocess, pretrain, probe, report."""
    from . import pipeline as pl

    pl.run_synth(cfg, paths)
    pl.run_preprocess(cfg, paths)
    pl.run_features(cfg, paths)
    pl.run_stage1(cfg, paths)
    pl.run_embed_segments(cfg, paths)
    pl.run_stage2(cfg, paths, variant="pipeline")
    pl.run_stage2(cfg, paths, variant="behavior")
    pl.run_embed_weeks(cfg, paths)
    if with_supervised:
        pl.run_train_baselines(cfg, paths)
    pl.run_probe(cfg, paths)
    pl.run_demographics_reference(cfg, paths)
    if with_ablations:
        pl.run_stage2_ablations(cfg, paths)
    return run_report(cfg, paths)
