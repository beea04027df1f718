"""End-to-end orchestration of the pipeline stages.

Every stage reads and writes content-addressed artifacts under
``<workdir>/<config-hash>/``; manifests carry the producing command and the
config hash so the reporting stage can refuse to mix configurations.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import aggregators, cohort, evaluation, features, preprocessing
from . import segment_encoder as s1
from . import temporal_encoder as s2
from .config import (N_FEATURES, NumericalError, WEEK_BINS, config_hash, subseed)
from .shards import (RecordShard, read_labels_csv, read_manifest,
                     read_record_shard, read_week_shard, iter_recordings,
                     require, write_labels_csv, write_manifest,
                     write_record_shard, write_week_shard)
from .timeutil import (calendar_indices_vec, scenario_allows_vec,
                       week_start_for)

log = logging.getLogger("hiersig")

PROBE_MODELS = ("pipeline", "morphology", "behavior")
SUPERVISED_KINDS = ("weighted_pooling", "cross_attention", "lstm")

ABLATION_CELLS = {
    "dual": {},
    "no_local": {"local_branch": False},
    "no_global": {"global_branch": False},
    "nctx_504": {"n_ctx": 504},
    "nctx_1008": {"n_ctx": 1008},
    "learnable_token": {"week_token": "learnable"},
    "shortcut_p1_nctx252": {"global_branch": False, "patch_sizes": [1], "n_ctx": 252},
    "shortcut_p1_nctx1008": {"global_branch": False, "patch_sizes": [1], "n_ctx": 1008},
}
SHORTCUT_CELLS = ("shortcut_p1_nctx252", "shortcut_p1_nctx1008")


@dataclass
class RunPaths:
    root: Path

    @classmethod
    def for_config(cls, cfg: dict) -> "RunPaths":
        root = Path(cfg["run"]["workdir"]) / config_hash(cfg)[:16]
        return cls(root=root)

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def raw_dir(self): return self.root / "raw"
    @property
    def labels_csv(self): return self.root / "labels.csv"
    @property
    def split_json(self): return self.root / "split.json"
    @property
    def segments(self): return self.root / "segments.seg1"
    @property
    def features_shard(self): return self.root / "features.fea1"
    @property
    def stage1_ck(self): return self.root / "stage1.ck1"
    @property
    def stage1_full_ck(self): return self.root / "stage1_full.ck1"
    @property
    def stage1_log(self): return self.root / "stage1_log.json"
    @property
    def segment_embeddings(self): return self.root / "segment_embeddings.emb1"
    @property
    def weeks(self): return self.root / "weeks.wk1"
    @property
    def feature_weeks(self): return self.root / "feature_weeks.wk1"
    @property
    def feature_stats(self): return self.root / "feature_stats.json"
    @property
    def stage2_ck(self): return self.root / "stage2.ck1"
    @property
    def stage2_log(self): return self.root / "stage2_log.json"
    @property
    def behavior_ck(self): return self.root / "stage2_behavior.ck1"
    @property
    def behavior_log(self): return self.root / "stage2_behavior_log.json"
    @property
    def week_vectors_dir(self): return self.root / "week_vectors"
    @property
    def baselines_dir(self): return self.root / "baselines"
    @property
    def cells_dir(self): return self.root / "cells"
    @property
    def ablations_dir(self): return self.root / "stage2_ablations"
    @property
    def reports_dir(self): return self.root / "reports"

    def week_vectors(self, model: str, scenario: str) -> Path:
        return self.week_vectors_dir / f"{model}_{scenario}.emb1"


def _workers(n: int) -> int:
    return n if n > 0 else min(8, os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# synth-gen
# ---------------------------------------------------------------------------

def run_synth(cfg: dict, paths: RunPaths) -> None:
    h = config_hash(cfg)
    seed = cfg["seed"]
    sy = cfg["synth"]
    paths.raw_dir.mkdir(parents=True, exist_ok=True)
    profiles = cohort.make_cohort(sy["subjects"], seed)
    rows = cohort.label_tasks(profiles)
    write_labels_csv(paths.labels_csv, rows)
    write_manifest(paths.labels_csv, h, "synth-gen", seed)
    split = make_split(sorted(p.subject_id for p in profiles), rows,
                       cfg["eval"]["val_frac"], cfg["eval"]["test_frac"], seed)
    paths.split_json.write_text(json.dumps(split, indent=2, sort_keys=True) + "\n")
    write_manifest(paths.split_json, h, "synth-gen", seed)
    n_recordings = 0
    for prof in profiles:
        out = paths.raw_dir / f"{prof.subject_id}.hsg1"
        with open(out, "wb") as fh:
            for rec in cohort.synth_recordings(
                    prof, sy["weeks"], sy["scenario"], seed,
                    coverage=sy["coverage"],
                    recording_seconds=sy["recording_seconds"],
                    ppg_hz=sy["ppg_hz"], acc_hz=sy["acc_hz"],
                    tz_offset_min=sy["tz_offset_min"],
                    start_date=sy["start_date"]):
                from .shards import append_recording
                append_recording(fh, rec, h)
                n_recordings += 1
    write_manifest(paths.raw_dir / "recordings", h, "synth-gen", seed,
                   {"subjects": len(profiles), "recordings": n_recordings})
    log.info("synth-gen: %d subjects, %d recordings", len(profiles), n_recordings)


def make_split(subjects: list[str], label_rows: list[dict],
               val_frac: float, test_frac: float, seed: int,
               max_tries: int = 100) -> dict:
    """Subject-level train/val/test split with both classes in train per task."""
    by_task: dict[str, dict[str, int]] = {}
    for r in label_rows:
        by_task.setdefault(r["task"], {})[r["subject_id"]] = r["y"]
    n = len(subjects)
    n_test = int(round(test_frac * n))
    n_val = int(round(val_frac * n))
    for attempt in range(max_tries):
        rng = np.random.default_rng(subseed(seed, "split", attempt))
        order = rng.permutation(n)
        test = [subjects[i] for i in order[:n_test]]
        val = [subjects[i] for i in order[n_test:n_test + n_val]]
        train = [subjects[i] for i in order[n_test + n_val:]]
        ok = all(
            len({labels[s] for s in part if s in labels}) == 2
            for labels in by_task.values()
            for part in (train, val, test))
        if ok:
            return {"train": sorted(train), "val": sorted(val), "test": sorted(test)}
    raise RuntimeError("could not build a split with both classes everywhere")


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------

def _preprocess_subject(args):
    path, sig = args
    segs = []
    tz = 0
    report = {"n_segments": 0, "n_dropped_nan": 0, "n_too_short": 0, "n_degenerate": 0}
    for rec, _ in iter_recordings(path):
        tz = rec.tz_offset_min
        out, rep = preprocessing.segmentize(
            rec, target_hz=sig["target_hz"], segment_seconds=sig["segment_seconds"],
            ppg_band=tuple(sig["ppg_band"]), acc_band=tuple(sig["acc_band"]),
            transition_hz=sig["transition_hz"], stopband_db=sig["stopband_db"])
        for s in out:
            segs.append((s.timestamp, s.data.astype(np.float32).ravel()))
        for k in report:
            report[k] += getattr(rep, k)
    segs.sort(key=lambda t: t[0])
    return Path(path).stem, tz, segs, report


def run_preprocess(cfg: dict, paths: RunPaths) -> None:
    h = config_hash(cfg)
    require(paths.raw_dir, "synth-gen")
    files = sorted(paths.raw_dir.glob("*.hsg1"))
    if not files:
        raise_missing("raw recordings", "synth-gen")
    sig = cfg["sigproc"]
    jobs = [(str(f), sig) for f in files]
    results = _map_jobs(_preprocess_subject, jobs, _workers(sig["workers"]))
    results.sort(key=lambda r: r[0])
    subjects = [(sid, tz) for sid, tz, _, _ in results]
    sub_index = {sid: i for i, (sid, _) in enumerate(subjects)}
    all_idx, all_epochs, all_rows = [], [], []
    totals = {"n_segments": 0, "n_dropped_nan": 0, "n_too_short": 0, "n_degenerate": 0}
    for sid, tz, segs, rep in results:
        for ts, row in segs:
            all_idx.append(sub_index[sid])
            all_epochs.append(ts)
            all_rows.append(row)
        for k in totals:
            totals[k] += rep[k]
    shard = RecordShard(
        kind="SEG1", subjects=subjects,
        subject_idx=np.array(all_idx, dtype=np.int64),
        epochs=np.array(all_epochs, dtype=np.int64),
        data=np.stack(all_rows) if all_rows else np.zeros((0, 3000), np.float32),
        config_hash=h)
    write_record_shard(paths.segments, shard)
    write_manifest(paths.segments, h, "preprocess", cfg["seed"], totals)
    log.info("preprocess: %s", totals)


def _map_jobs(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def raise_missing(what: str, command: str):
    from .config import MissingArtifactError
    raise MissingArtifactError(f"missing {what}; run `hiersig {command}` first")


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def _features_subject(args):
    path, sig, fea = args
    out = []
    tz = 0
    seg_len = int(round(sig["segment_seconds"] * sig["target_hz"]))
    for rec, _ in iter_recordings(path):
        tz = rec.tz_offset_min
        segs, _ = preprocessing.segmentize(
            rec, target_hz=sig["target_hz"], segment_seconds=sig["segment_seconds"],
            ppg_band=tuple(sig["ppg_band"]), acc_band=tuple(sig["acc_band"]),
            transition_hz=sig["transition_hz"], stopband_db=sig["stopband_db"])
        if not segs:
            continue
        axes = np.stack([
            preprocessing.resample_poly(rec.acc[i], rec.acc_hz, sig["target_hz"],
                                        sig["transition_hz"], sig["stopband_db"])
            for i in range(3)])
        for k, seg in enumerate(segs):
            window = axes[:, k * seg_len:(k + 1) * seg_len]
            if window.shape[1] < seg_len:
                continue
            ppg_row = np.zeros(seg_len) if seg.degenerate_ppg else seg.data[0]
            vec, validity = features.segment_features(
                ppg_row, window, fs=sig["target_hz"],
                refractory_s=fea["refractory_s"],
                threshold_frac=fea["threshold_frac"],
                rolling_max_s=fea["rolling_max_s"],
                pnn_threshold_ms=fea["pnn_threshold_ms"],
                entropy_bins=fea["entropy_bins"])
            out.append((seg.timestamp, vec.astype(np.float32), validity))
    out.sort(key=lambda t: t[0])
    return Path(path).stem, tz, out


def run_features(cfg: dict, paths: RunPaths) -> None:
    h = config_hash(cfg)
    require(paths.raw_dir, "synth-gen")
    files = sorted(paths.raw_dir.glob("*.hsg1"))
    jobs = [(str(f), cfg["sigproc"], cfg["features"]) for f in files]
    results = _map_jobs(_features_subject, jobs, _workers(cfg["features"]["workers"]))
    results.sort(key=lambda r: r[0])
    subjects = [(sid, tz) for sid, tz, _ in results]
    idx, epochs, rows, validity = [], [], [], []
    for i, (sid, tz, recs) in enumerate(results):
        for ts, vec, val in recs:
            idx.append(i)
            epochs.append(ts)
            rows.append(vec)
            validity.append(val)
    shard = RecordShard(
        kind="FEA1", subjects=subjects,
        subject_idx=np.array(idx, dtype=np.int64),
        epochs=np.array(epochs, dtype=np.int64),
        data=np.stack(rows) if rows else np.zeros((0, N_FEATURES), np.float32),
        validity=np.array(validity, dtype=np.uint8),
        config_hash=h)
    write_record_shard(paths.features_shard, shard)
    write_manifest(paths.features_shard, h, "features", cfg["seed"],
                   {"records": len(rows)})
    # Weekly 19-dim feature sequences (unstandardized; stats are fitted on
    # the training split when the behavior model trains).
    sequences = []
    valid_mask = (shard.validity & features.PPG_VALID).astype(bool) \
        & (shard.validity & features.ACC_VALID).astype(bool)
    for sid, tz, group in _group_weeks(shard):
        for week_start, sel in group:
            seq = features.aggregate_bins(
                shard.data[sel].astype(np.float64), shard.epochs[sel],
                valid_mask[sel], sid, week_start, tz,
                bin_seconds=cfg["features"]["bin_seconds"])
            sequences.append(seq)
    write_week_shard(paths.feature_weeks, sequences, subjects, h)
    write_manifest(paths.feature_weeks, h, "features", cfg["seed"],
                   {"weeks": len(sequences)})
    log.info("features: %d records, %d feature weeks", len(rows), len(sequences))


def _group_weeks(shard: RecordShard):
    """Yield (subject_id, tz, [(week_start, record_indices)]) per subject."""
    tz_by_idx = {i: tz for i, (_, tz) in enumerate(shard.subjects)}
    for i, (sid, tz) in enumerate(shard.subjects):
        sel = np.flatnonzero(shard.subject_idx == i)
        if sel.size == 0:
            continue
        starts = np.array([week_start_for(int(e), tz) for e in shard.epochs[sel]])
        groups = []
        for ws in np.unique(starts):
            groups.append((int(ws), sel[starts == ws]))
        yield sid, tz, groups


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------

def _train_subject_ids(paths: RunPaths) -> set[str]:
    require(paths.split_json, "synth-gen")
    return set(json.loads(paths.split_json.read_text())["train"])


def run_stage1(cfg: dict, paths: RunPaths, resume: bool = False) -> None:
    h = config_hash(cfg)
    shard = read_record_shard(require(paths.segments, "preprocess"), "SEG1")
    train_ids = _train_subject_ids(paths)
    keep = np.isin(shard.subject_ids(), sorted(train_ids))
    train_shard = RecordShard("SEG1", shard.subjects, shard.subject_idx[keep],
                              shard.epochs[keep], shard.data[keep],
                              config_hash=shard.config_hash)
    s1cfg = s1.Stage1Config.from_mapping(cfg["stage1"])
    resume_state = None
    if resume and paths.stage1_full_ck.exists():
        model, meta = s1.load_stage1(paths.stage1_full_ck)
        resume_state = {"state_dict": model.state_dict(), "step": meta["step"]}
    model, train_log = s1.train_stage1(train_shard, s1cfg, cfg["seed"],
                                       resume_state=resume_state)
    s1.save_stage1(paths.stage1_full_ck, model, h, s1cfg.steps)
    s1.save_stage1_encoder(paths.stage1_ck, model, h, s1cfg.steps)
    paths.stage1_log.write_text(json.dumps(train_log, indent=2) + "\n")
    for p in (paths.stage1_full_ck, paths.stage1_ck):
        write_manifest(p, h, "pretrain-stage1", cfg["seed"])
    first, last = train_log[0]["eval_loss"], train_log[-1]["eval_loss"]
    log.info("stage1: held-out loss %.4f -> %.4f (%.1f%%)",
             first, last, 100 * (1 - last / first))


def run_embed_segments(cfg: dict, paths: RunPaths) -> None:
    h = config_hash(cfg)
    shard = read_record_shard(require(paths.segments, "preprocess"), "SEG1")
    model, _ = s1.load_stage1(require(paths.stage1_ck, "pretrain-stage1"))
    emb = s1.encode_shard(model, shard)
    emb.config_hash = h
    write_record_shard(paths.segment_embeddings, emb)
    write_manifest(paths.segment_embeddings, h, "embed-segments", cfg["seed"])
    # Weekly bin sequences of segment embeddings.
    sequences = []
    for sid, tz, groups in _group_weeks(emb):
        for week_start, sel in groups:
            seq, n_outside = s2.bin_embeddings(
                emb.epochs[sel], emb.data[sel].astype(np.float64), sid,
                week_start, tz)
            sequences.append(seq)
    write_week_shard(paths.weeks, sequences, emb.subjects, h)
    write_manifest(paths.weeks, h, "embed-segments", cfg["seed"],
                   {"weeks": len(sequences)})
    log.info("embed-segments: %d embeddings, %d weeks", len(emb), len(sequences))


# ---------------------------------------------------------------------------
# stage 2 (pipeline and behavior variants, plus ablations)
# ---------------------------------------------------------------------------

def load_bin_weeks(path) -> list[s2.BinSequence]:
    raw, _, _ = read_week_shard(path)
    return [s2.BinSequence(r["subject_id"], r["week_start"], r["tz_offset_min"],
                           r["values"], r["missing"],
                           counts=(~r["missing"]).astype(np.int64))
            for r in raw]


def load_feature_weeks(path) -> list[features.FeatureSequence]:
    raw, _, _ = read_week_shard(path)
    return [features.FeatureSequence(r["subject_id"], r["week_start"],
                                     r["tz_offset_min"], r["values"].astype(np.float64),
                                     r["missing"], (~r["missing"]).astype(np.int64))
            for r in raw]


def _behavior_weeks(cfg: dict, paths: RunPaths, stats=None):
    seqs = load_feature_weeks(require(paths.feature_weeks, "features"))
    if stats is None:
        train_ids = _train_subject_ids(paths)
        train_seqs = [q for q in seqs if q.subject_id in train_ids]
        mean, std = features.fit_standardization(train_seqs)
        paths.feature_stats.write_text(json.dumps(
            {"mean": mean.tolist(), "std": std.tolist()}, indent=2) + "\n")
    else:
        mean, std = np.array(stats["mean"]), np.array(stats["std"])
    return [aggregators.behavior_sequence(q, mean, std) for q in seqs]


def _stage2_cfg(cfg: dict, in_dim: int, overrides: dict | None = None) -> s2.Stage2Config:
    m = dict(cfg["stage2"])
    if overrides:
        m.update(overrides)
    return s2.Stage2Config.from_mapping(m, in_dim=in_dim)


def run_stage2(cfg: dict, paths: RunPaths, variant: str = "pipeline",
               overrides: dict | None = None, resume: bool = False,
               out_path: Path | None = None) -> list[dict]:
    h = config_hash(cfg)
    train_ids = _train_subject_ids(paths)
    if variant == "pipeline":
        weeks = load_bin_weeks(require(paths.weeks, "embed-segments"))
        ck_path, log_path = paths.stage2_ck, paths.stage2_log
        scope = "stage2"
    elif variant == "behavior":
        weeks = _behavior_weeks(cfg, paths)
        ck_path, log_path = paths.behavior_ck, paths.behavior_log
        scope = "stage2_behavior"
    else:
        raise ValueError(f"unknown stage2 variant {variant!r}")
    if out_path is not None:
        out_path = Path(out_path)
        ck_path, log_path = out_path, out_path.with_suffix(".log.json")
        ck_path.parent.mkdir(parents=True, exist_ok=True)
    weeks = [w for w in weeks if w.subject_id in train_ids and not w.missing.all()]
    if not weeks:
        raise_missing("non-empty training weeks", "embed-segments")
    in_dim = weeks[0].values.shape[1]
    s2cfg = _stage2_cfg(cfg, in_dim, overrides)
    resume_state = None
    if resume and ck_path.exists():
        model, meta = s2.load_stage2(ck_path)
        resume_state = {"state_dict": model.state_dict(), "step": meta["step"]}
    try:
        model, train_log = s2.train_stage2(weeks, s2cfg, cfg["seed"], scope=scope,
                                           resume_state=resume_state)
    except NumericalError as err:
        if getattr(err, "last_good_state", None) is not None:
            rescue = s2.WeekModel(s2cfg)
            rescue.load_state_dict(err.last_good_state)
            s2.save_stage2(ck_path, rescue, h, err.step, {"aborted": True})
        raise
    s2.save_stage2(ck_path, model, h, s2cfg.iterations, {"variant": variant})
    log_path.write_text(json.dumps(train_log, indent=2) + "\n")
    write_manifest(ck_path, h, "pretrain-stage2", cfg["seed"])
    first, last = train_log[0]["eval_loss"], train_log[-1]["eval_loss"]
    log.info("stage2[%s]: held-out loss %.4f -> %.4f (%.1f%%)",
             variant, first, last, 100 * (1 - last / first))
    return train_log


def run_stage2_ablations(cfg: dict, paths: RunPaths,
                         cells: dict | None = None) -> dict:
    """Train the ablation grid at the reduced iteration budget.

    All cells share the holdout split, mask-plan stream, and batch order
    (scope "ablation") so their held-out losses are comparable.
    """
    h = config_hash(cfg)
    cells = ABLATION_CELLS if cells is None else cells
    paths.ablations_dir.mkdir(parents=True, exist_ok=True)
    train_ids = _train_subject_ids(paths)
    weeks = [w for w in load_bin_weeks(require(paths.weeks, "embed-segments"))
             if w.subject_id in train_ids and not w.missing.all()]
    in_dim = weeks[0].values.shape[1]
    results = {}
    for name, overrides in cells.items():
        merged = {"iterations": cfg["stage2"]["ablation_iterations"], **overrides}
        s2cfg = _stage2_cfg(cfg, in_dim, merged)
        model, train_log = s2.train_stage2(weeks, s2cfg, cfg["seed"], scope="ablation")
        ck = paths.ablations_dir / f"{name}.ck1"
        s2.save_stage2(ck, model, h, s2cfg.iterations, {"ablation": name})
        write_manifest(ck, h, "pretrain-stage2", cfg["seed"], {"ablation": name})
        final = train_log[-1]
        results[name] = {
            "name": name, "n_ctx": s2cfg.n_ctx,
            "patch_sizes": list(s2cfg.patch_sizes),
            "local_branch": s2cfg.local_branch, "global_branch": s2cfg.global_branch,
            "week_token": s2cfg.week_token,
            "eval_total": final["eval_loss"], "eval_local": final["eval_local"],
            "eval_global": final["eval_global"],
        }
        log.info("ablation %s: eval loss %.4f", name, final["eval_loss"])
    (paths.ablations_dir / "results.json").write_text(
        json.dumps(results, indent=2, sort_keys=True) + "\n")
    return results


# ---------------------------------------------------------------------------
# embed-weeks (week vectors per model and scenario)
# ---------------------------------------------------------------------------

def _write_week_vectors(path, rows, subjects, h):
    sub_index = {sid: i for i, (sid, _) in enumerate(subjects)}
    idx = np.array([sub_index[sid] for sid, _, _ in rows], dtype=np.int64)
    epochs = np.array([ws for _, ws, _ in rows], dtype=np.int64)
    data = (np.stack([v for _, _, v in rows]).astype(np.float32)
            if rows else np.zeros((0, 1), np.float32))
    shard = RecordShard("EMB1", subjects, idx, epochs, data, config_hash=h)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_record_shard(path, shard)


def run_embed_weeks(cfg: dict, paths: RunPaths,
                    scenarios: list[str] | None = None,
                    models: tuple = PROBE_MODELS,
                    checkpoint_override: dict | None = None,
                    tag: str = "") -> None:
    """Subject week vectors for each (model, scenario) cell.

    ``checkpoint_override`` maps model name to an alternative CK1 path (used
    by the ablation harness); ``tag`` prefixes the output file names.
    """
    h = config_hash(cfg)
    scenarios = scenarios or cfg["eval"]["scenarios"]
    paths.week_vectors_dir.mkdir(parents=True, exist_ok=True)

    if "pipeline" in models:
        ck = (checkpoint_override or {}).get("pipeline", paths.stage2_ck)
        model, _ = s2.load_stage2(require(ck, "pretrain-stage2"))
        weeks = load_bin_weeks(require(paths.weeks, "embed-segments"))
        _, subjects, _ = read_week_shard(paths.weeks)
        for scen in scenarios:
            filtered = [evaluation.scenario_filter(w, scen) for w in weeks]
            vecs, _ = s2.embed_weeks_batch(model, filtered)
            rows = [(w.subject_id, w.week_start, v)
                    for w, v in zip(filtered, vecs) if v is not None]
            out = paths.week_vectors(tag + "pipeline", scen)
            _write_week_vectors(out, rows, subjects, h)
            write_manifest(out, h, "embed-weeks", cfg["seed"])

    if "behavior" in models:
        ck = (checkpoint_override or {}).get("behavior", paths.behavior_ck)
        model, _ = s2.load_stage2(require(ck, "pretrain-stage2 --variant behavior"))
        stats = json.loads(require(paths.feature_stats,
                                   "pretrain-stage2 --variant behavior").read_text())
        weeks = _behavior_weeks(cfg, paths, stats=stats)
        _, subjects, _ = read_week_shard(paths.feature_weeks)
        for scen in scenarios:
            filtered = [evaluation.scenario_filter(w, scen) for w in weeks]
            vecs, _ = s2.embed_weeks_batch(model, filtered)
            rows = [(w.subject_id, w.week_start, v)
                    for w, v in zip(filtered, vecs) if v is not None]
            out = paths.week_vectors(tag + "behavior", scen)
            _write_week_vectors(out, rows, subjects, h)
            write_manifest(out, h, "embed-weeks", cfg["seed"])

    if "morphology" in models:
        emb = read_record_shard(require(paths.segment_embeddings, "embed-segments"), "EMB1")
        dow, tod = calendar_indices_vec(emb.epochs, emb.tz_offsets())
        for scen in scenarios:
            keep = scenario_allows_vec(dow, tod, scen)
            rows = []
            for i, (sid, _) in enumerate(emb.subjects):
                sel = keep & (emb.subject_idx == i)
                if sel.any():
                    rows.append((sid, 0, aggregators.morphology_pool(emb.data[sel])))
            out = paths.week_vectors(tag + "morphology", scen)
            _write_week_vectors(out, rows, emb.subjects, h)
            write_manifest(out, h, "embed-weeks", cfg["seed"])
    log.info("embed-weeks: models=%s scenarios=%s", models, scenarios)


# ---------------------------------------------------------------------------
# probing
# ---------------------------------------------------------------------------

def _subject_vectors(path) -> dict[str, np.ndarray]:
    shard = read_record_shard(path, "EMB1")
    ids = shard.subject_ids()
    out: dict[str, np.ndarray] = {}
    for sid in np.unique(ids):
        rows = shard.data[ids == sid].astype(np.float64)
        out[str(sid)] = rows.mean(axis=0)
    return out


def probe_cell(cfg: dict, paths: RunPaths, model: str, task: str,
               scenario: str, vectors: dict[str, np.ndarray] | None = None) -> dict:
    """Fit the linear probe for one (model, task, scenario) cell."""
    labels = {r["subject_id"]: r["y"]
              for r in read_labels_csv(require(paths.labels_csv, "synth-gen"))
              if r["task"] == task}
    split = json.loads(require(paths.split_json, "synth-gen").read_text())
    if vectors is None:
        vectors = _subject_vectors(require(
            paths.week_vectors(model, scenario), "embed-weeks"))

    def take(part):
        subs = [s for s in split[part] if s in vectors and s in labels]
        X = np.stack([vectors[s] for s in subs])
        y = np.array([labels[s] for s in subs])
        return subs, X, y

    tr_subs, X_tr, y_tr = take("train")
    _, X_val, y_val = take("val")
    _, X_te, y_te = take("test")
    probe = evaluation.fit_probe(X_tr, y_tr, X_val, y_val,
                                 l2_grid=cfg["eval"]["l2_grid"])
    scores = probe.decision(X_te)
    boot_seed = subseed(cfg["seed"], "bootstrap", model, task, scenario)
    au = evaluation.bootstrap_metric(evaluation.auroc, scores, y_te,
                                     cfg["eval"]["bootstrap_resamples"], boot_seed)
    pa = evaluation.bootstrap_metric(
        lambda s, l: evaluation.pauc(s, l, cfg["eval"]["pauc_fpr_max"]),
        scores, y_te, cfg["eval"]["bootstrap_resamples"], boot_seed)
    return {"model": model, "task": task, "scenario": scenario,
            "auroc": au, "pauc": pa, "lambda": probe.lam,
            "val_auroc": probe.val_auroc,
            "probe_converged": bool(probe.converged),
            "n_train": len(tr_subs), "n_test": len(y_te),
            "config_hash": config_hash(cfg), "seed": cfg["seed"]}


def run_probe(cfg: dict, paths: RunPaths, scenarios: list[str] | None = None,
              models: tuple = PROBE_MODELS, tasks: tuple = ("morph", "rhythm", "combined")) -> list[dict]:
    scenarios = scenarios or cfg["eval"]["scenarios"]
    paths.cells_dir.mkdir(parents=True, exist_ok=True)
    cells = []
    for model in models:
        for scen in scenarios:
            vectors = _subject_vectors(require(
                paths.week_vectors(model, scen), "embed-weeks"))
            for task in tasks:
                cell = probe_cell(cfg, paths, model, task, scen, vectors)
                out = paths.cells_dir / f"{model}_{task}_{scen}.json"
                out.write_text(json.dumps(cell, indent=2, sort_keys=True) + "\n")
                cells.append(cell)
                log.info("probe %s/%s/%s AUROC=%.3f", model, task, scen,
                         cell["auroc"]["point"])
    return cells


def run_demographics_reference(cfg: dict, paths: RunPaths) -> list[dict]:
    """Logistic reference on (age, sex, bmi) columns when the labels file has them."""
    rows = read_labels_csv(require(paths.labels_csv, "synth-gen"))
    cols = [c for c in ("age", "sex", "bmi") if all(c in r and r[c] != "" for r in rows)]
    if not cols:
        return []
    vectors = {}
    for r in rows:
        vectors[r["subject_id"]] = np.array([float(r[c]) for c in cols])
    cells = []
    paths.cells_dir.mkdir(parents=True, exist_ok=True)
    for task in sorted({r["task"] for r in rows}):
        cell = probe_cell(cfg, paths, "demographics", task, "all", vectors)
        out = paths.cells_dir / f"demographics_{task}_all.json"
        out.write_text(json.dumps(cell, indent=2, sort_keys=True) + "\n")
        cells.append(cell)
    return cells


# ---------------------------------------------------------------------------
# supervised baselines
# ---------------------------------------------------------------------------

def run_train_baselines(cfg: dict, paths: RunPaths,
                        tasks: tuple = ("morph", "rhythm", "combined")) -> list[dict]:
    h = config_hash(cfg)
    weeks = load_bin_weeks(require(paths.weeks, "embed-segments"))
    split = json.loads(require(paths.split_json, "synth-gen").read_text())
    label_rows = read_labels_csv(require(paths.labels_csv, "synth-gen"))
    bl = cfg["baselines"]
    paths.baselines_dir.mkdir(parents=True, exist_ok=True)
    paths.cells_dir.mkdir(parents=True, exist_ok=True)
    in_dim = weeks[0].values.shape[1]
    cells = []
    for task in tasks:
        labels = {r["subject_id"]: r["y"] for r in label_rows if r["task"] == task}
        for kind in SUPERVISED_KINDS:
            model, history = aggregators.train_supervised(
                kind, weeks, labels, split["train"], split["val"],
                cfg["seed"], in_dim, dropout=bl["dropout"],
                lstm_hidden=bl["lstm_hidden"], rope_base=bl["rope_base"],
                heads=bl["attn_heads"], lr=bl["supervised_lr"],
                batch_size=bl["supervised_batch"],
                max_evals=bl["supervised_max_evals"], patience=bl["patience"])
            scores, subs = aggregators.supervised_subject_scores(
                model, weeks, split["test"])
            y = np.array([labels[s] for s in subs])
            boot_seed = subseed(cfg["seed"], "bootstrap", kind, task, "all")
            au = evaluation.bootstrap_metric(
                evaluation.auroc, scores, y, cfg["eval"]["bootstrap_resamples"], boot_seed)
            pa = evaluation.bootstrap_metric(
                lambda s, l: evaluation.pauc(s, l, cfg["eval"]["pauc_fpr_max"]),
                scores, y, cfg["eval"]["bootstrap_resamples"], boot_seed)
            name = f"supervised_{kind}"
            cell = {"model": name, "task": task, "scenario": "all",
                    "auroc": au, "pauc": pa, "best_epoch": len(history),
                    "config_hash": h, "seed": cfg["seed"]}
            (paths.cells_dir / f"{name}_{task}_all.json").write_text(
                json.dumps(cell, indent=2, sort_keys=True) + "\n")
            (paths.baselines_dir / f"history_{kind}_{task}.json").write_text(
                json.dumps(history, indent=2) + "\n")
            import torch
            from .shards import write_checkpoint
            write_checkpoint(paths.baselines_dir / f"{kind}_{task}.ck1",
                             {"kind": f"supervised_{kind}", "task": task,
                              "config_hash": h, "step": len(history)},
                             {k: v.detach().numpy() for k, v in model.state_dict().items()})
            cells.append(cell)
            log.info("supervised %s/%s AUROC=%.3f", kind, task, au["point"])
    return cells
