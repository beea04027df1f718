"""Binary artifact formats shared across the pipeline.

All integers are little-endian.  Strings are UTF-8 with a u16 length prefix.
Every header embeds the 16-hex-char config hash of the producing run so the
reporting stage can refuse to mix artifacts from different configurations.

Formats:

``HSG1``  raw recording blocks, concatenated per subject file.  Block layout:
          magic, subject id, i64 start epoch-seconds (UTC), i32 timezone
          offset minutes, u8 channel count, per channel (f64 rate Hz,
          u32 sample count), config hash, then f32 samples per channel in
          order (ppg, acc_x, acc_y, acc_z).
``SEG1``  preprocessed segments: header (magic, u32 segment length = 1500,
          u8 channels = 2, hash, subject table, u64 count) then records of
          (u32 subject index, i64 epoch-seconds, 3000 f32).  A degenerate
          channel is stored as an all-zero row; no separate flag is needed.
``FEA1``  per-segment feature records (u32 subject index, i64 epoch-seconds,
          19 f32, u8 validity) where validity bit0 = PPG features usable and
          bit1 = ACC features usable.
``EMB1``  embedding records (u32 subject index, i64 epoch-seconds, d f32);
          used both for segment embeddings and week vectors (epoch-seconds
          then holds the week start).
``WK1``   binned week sequences: records of (u32 subject index, i64 week
          start epoch-seconds, 252-byte missing bitmask over 2016 bins, then
          d f32 per non-missing bin in ascending bin order).
``CK1``   checkpoints: magic, u32 JSON length, metadata JSON (kind, config,
          config hash, step), u32 tensor count, then per tensor (name, u8
          ndim, u32 dims, f32 data).

The subject table maps the u32 subject index used in records to the subject
id string and its timezone offset (minutes): u32 count then per subject
(u16 len, id bytes, i32 tz offset).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import WEEK_BINS, MissingArtifactError


class ShardFormatError(Exception):
    """Corrupt or mismatched shard file."""


def _write_str(fh, s: str) -> None:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ShardFormatError("string too long for u16 length prefix")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ShardFormatError("unexpected end of file")
    return buf


def _read_str(fh) -> str:
    (n,) = struct.unpack("<H", _read_exact(fh, 2))
    return _read_exact(fh, n).decode("utf-8")


def _write_hash(fh, config_hash: str) -> None:
    raw = bytes.fromhex(config_hash or "0" * 32)
    if len(raw) != 16:
        raise ShardFormatError("config hash must be 16 hex bytes")
    fh.write(raw)


def _read_hash(fh) -> str:
    return _read_exact(fh, 16).hex()


def _write_subject_table(fh, subjects: list[tuple[str, int]]) -> None:
    fh.write(struct.pack("<I", len(subjects)))
    for sid, tz in subjects:
        _write_str(fh, sid)
        fh.write(struct.pack("<i", tz))


def _read_subject_table(fh) -> list[tuple[str, int]]:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    out = []
    for _ in range(n):
        sid = _read_str(fh)
        (tz,) = struct.unpack("<i", _read_exact(fh, 4))
        out.append((sid, tz))
    return out


def require(path: str | Path, produced_by: str):
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(
            f"missing artifact {path}; run `hiersig {produced_by}` first")
    return path


# ---------------------------------------------------------------------------
# HSG1 raw recordings
# ---------------------------------------------------------------------------

@dataclass
class RawRecording:
    """One contiguous multichannel recording from a single subject."""

    subject_id: str
    start_epoch_s: int
    tz_offset_min: int
    ppg: np.ndarray
    ppg_hz: float
    acc: np.ndarray          # shape (3, n)
    acc_hz: float

    def __post_init__(self):
        self.ppg = np.asarray(self.ppg, dtype=np.float64)
        self.acc = np.asarray(self.acc, dtype=np.float64)
        if self.ppg.ndim != 1 or self.ppg.size == 0:
            raise ValueError("ppg must be a nonempty 1-D array")
        if self.acc.shape[0] != 3 or self.acc.shape[1] == 0:
            raise ValueError("acc must have shape (3, n) with n >= 1")
        if self.ppg_hz <= 0 or self.acc_hz <= 0:
            raise ValueError("sample rates must be positive")
        if not np.isfinite(self.start_epoch_s):
            raise ValueError("start time must be finite")

    @property
    def duration_s(self) -> float:
        return self.ppg.size / self.ppg_hz


def append_recording(fh, rec: RawRecording, config_hash: str = "") -> None:
    fh.write(b"HSG1")
    _write_str(fh, rec.subject_id)
    fh.write(struct.pack("<qi", int(rec.start_epoch_s), int(rec.tz_offset_min)))
    channels = [(rec.ppg_hz, rec.ppg)] + [(rec.acc_hz, rec.acc[i]) for i in range(3)]
    fh.write(struct.pack("<B", len(channels)))
    for rate, samples in channels:
        fh.write(struct.pack("<dI", float(rate), samples.size))
    _write_hash(fh, config_hash)
    for _, samples in channels:
        fh.write(samples.astype("<f4").tobytes())


def iter_recordings(path: str | Path):
    """Yield (RawRecording, config_hash) blocks from a subject file."""
    with open(path, "rb") as fh:
        while True:
            magic = fh.read(4)
            if not magic:
                return
            if magic != b"HSG1":
                raise ShardFormatError(f"bad HSG1 magic in {path}")
            sid = _read_str(fh)
            start, tz = struct.unpack("<qi", _read_exact(fh, 12))
            (n_ch,) = struct.unpack("<B", _read_exact(fh, 1))
            meta = [struct.unpack("<dI", _read_exact(fh, 12)) for _ in range(n_ch)]
            h = _read_hash(fh)
            data = [np.frombuffer(_read_exact(fh, 4 * n), dtype="<f4").astype(np.float64)
                    for _, n in meta]
            if n_ch != 4:
                raise ShardFormatError(f"expected 4 channels, found {n_ch}")
            yield RawRecording(sid, start, tz, data[0], meta[0][0],
                               np.stack(data[1:4]), meta[1][0]), h


def read_recording_csv(path: str | Path, subject_id: str | None = None,
                       tz_offset_min: int = 0) -> RawRecording:
    """Ingest a (timestamp, ppg, ax, ay, az) CSV with uniform sampling."""
    arr = np.genfromtxt(path, delimiter=",", names=True)
    cols = ("timestamp", "ppg", "ax", "ay", "az")
    for c in cols:
        if c not in (arr.dtype.names or ()):
            raise ShardFormatError(f"CSV {path} missing column {c!r}")
    t = np.atleast_1d(arr["timestamp"]).astype(np.float64)
    if t.size < 2:
        raise ShardFormatError("CSV recording needs at least two samples")
    dt = np.diff(t)
    step = np.median(dt)
    if step <= 0 or np.any(np.abs(dt - step) > 0.01 * step):
        raise ShardFormatError("CSV timestamps must be uniformly sampled")
    rate = 1.0 / step
    sid = subject_id or Path(path).stem
    acc = np.stack([np.atleast_1d(arr[c]).astype(np.float64) for c in ("ax", "ay", "az")])
    return RawRecording(sid, int(round(t[0])), tz_offset_min,
                        np.atleast_1d(arr["ppg"]).astype(np.float64), rate, acc, rate)


# ---------------------------------------------------------------------------
# Record shards (SEG1 / FEA1 / EMB1)
# ---------------------------------------------------------------------------

@dataclass
class RecordShard:
    """In-memory view of a flat record shard.

    ``subjects`` maps record subject indices to (id, tz offset);  ``epochs``
    is i64; ``data`` is float32 with one row per record.
    """

    kind: str
    subjects: list[tuple[str, int]]
    subject_idx: np.ndarray
    epochs: np.ndarray
    data: np.ndarray
    validity: np.ndarray | None = None
    config_hash: str = "0" * 32

    def subject_ids(self) -> np.ndarray:
        ids = np.array([s for s, _ in self.subjects])
        return ids[self.subject_idx]

    def tz_offsets(self) -> np.ndarray:
        tz = np.array([t for _, t in self.subjects], dtype=np.int64)
        return tz[self.subject_idx]

    def __len__(self) -> int:
        return len(self.epochs)


_SHARD_MAGIC = {"SEG1": b"SEG1", "FEA1": b"FEA1", "EMB1": b"EMB1"}


def write_record_shard(path: str | Path, shard: RecordShard) -> None:
    magic = _SHARD_MAGIC[shard.kind]
    data = np.ascontiguousarray(shard.data, dtype="<f4")
    n = data.shape[0]
    with open(path, "wb") as fh:
        fh.write(magic)
        if shard.kind == "SEG1":
            fh.write(struct.pack("<IB", data.shape[1] // 2, 2))
        else:
            fh.write(struct.pack("<I", data.shape[1]))
        _write_hash(fh, shard.config_hash)
        _write_subject_table(fh, shard.subjects)
        fh.write(struct.pack("<Q", n))
        subj = np.ascontiguousarray(shard.subject_idx, dtype="<u4")
        epochs = np.ascontiguousarray(shard.epochs, dtype="<i8")
        validity = None
        if shard.kind == "FEA1":
            validity = np.ascontiguousarray(shard.validity, dtype=np.uint8)
        for i in range(n):
            fh.write(subj[i].tobytes())
            fh.write(epochs[i].tobytes())
            fh.write(data[i].tobytes())
            if validity is not None:
                fh.write(validity[i].tobytes())


def read_record_shard(path: str | Path, kind: str) -> RecordShard:
    magic = _SHARD_MAGIC[kind]
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != magic:
            raise ShardFormatError(f"bad {kind} magic in {path}")
        if kind == "SEG1":
            seg_len, n_ch = struct.unpack("<IB", _read_exact(fh, 5))
            width = seg_len * n_ch
        else:
            (width,) = struct.unpack("<I", _read_exact(fh, 4))
        h = _read_hash(fh)
        subjects = _read_subject_table(fh)
        (n,) = struct.unpack("<Q", _read_exact(fh, 8))
        rec_bytes = 4 + 8 + 4 * width + (1 if kind == "FEA1" else 0)
        raw = _read_exact(fh, n * rec_bytes)
    dt = [("subj", "<u4"), ("epoch", "<i8"), ("data", "<f4", (width,))]
    if kind == "FEA1":
        dt.append(("validity", "u1"))
    recs = np.frombuffer(raw, dtype=np.dtype(dt))
    return RecordShard(
        kind=kind,
        subjects=subjects,
        subject_idx=recs["subj"].astype(np.int64),
        epochs=recs["epoch"].astype(np.int64),
        data=np.array(recs["data"], dtype=np.float32),
        validity=(recs["validity"].copy() if kind == "FEA1" else None),
        config_hash=h,
    )


# ---------------------------------------------------------------------------
# WK1 week sequences
# ---------------------------------------------------------------------------

@dataclass
class WeekShard:
    subjects: list[tuple[str, int]]
    records: list  # list of BinSequence-like (duck-typed by temporal module)
    config_hash: str = "0" * 32


def write_week_shard(path: str | Path, sequences, subjects: list[tuple[str, int]],
                     config_hash: str = "") -> None:
    index = {sid: i for i, (sid, _) in enumerate(subjects)}
    with open(path, "wb") as fh:
        fh.write(b"WK1\x00")
        dims = {seq.values.shape[1] for seq in sequences}
        if len(dims) > 1:
            raise ShardFormatError(f"mixed week dims {sorted(dims)}")
        d = dims.pop() if dims else 0
        fh.write(struct.pack("<I", d))
        _write_hash(fh, config_hash)
        _write_subject_table(fh, subjects)
        fh.write(struct.pack("<Q", len(sequences)))
        for seq in sequences:
            if seq.values.shape[0] != WEEK_BINS:
                raise ShardFormatError("week sequence must have 2016 bins")
            fh.write(struct.pack("<Iq", index[seq.subject_id], seq.week_start))
            fh.write(np.packbits(seq.missing.astype(np.uint8)).tobytes())
            present = np.ascontiguousarray(seq.values[~seq.missing], dtype="<f4")
            fh.write(present.tobytes())


def read_week_shard(path: str | Path):
    """Return (list of raw week dicts, subject table, config hash)."""
    mask_bytes = WEEK_BINS // 8
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != b"WK1\x00":
            raise ShardFormatError(f"bad WK1 magic in {path}")
        (d,) = struct.unpack("<I", _read_exact(fh, 4))
        h = _read_hash(fh)
        subjects = _read_subject_table(fh)
        (n,) = struct.unpack("<Q", _read_exact(fh, 8))
        out = []
        for _ in range(n):
            subj, week_start = struct.unpack("<Iq", _read_exact(fh, 12))
            mask = np.unpackbits(
                np.frombuffer(_read_exact(fh, mask_bytes), dtype=np.uint8)
            )[:WEEK_BINS].astype(bool)
            k = int((~mask).sum())
            present = np.frombuffer(_read_exact(fh, 4 * k * d), dtype="<f4")
            values = np.zeros((WEEK_BINS, d), dtype=np.float32)
            values[~mask] = present.reshape(k, d)
            sid, tz = subjects[subj]
            out.append({"subject_id": sid, "tz_offset_min": tz,
                        "week_start": week_start, "values": values, "missing": mask})
    return out, subjects, h


# ---------------------------------------------------------------------------
# CK1 checkpoints
# ---------------------------------------------------------------------------

def write_checkpoint(path: str | Path, meta: dict, tensors: dict) -> None:
    """Persist named f32 tensors with a self-describing JSON header."""
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(b"CK1\x00")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(np.asarray(tensors[name]), dtype="<f4")
            _write_str(fh, name)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != b"CK1\x00":
            raise ShardFormatError(f"bad CK1 magic in {path}")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4))
        meta = json.loads(_read_exact(fh, meta_len).decode("utf-8"))
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors = {}
        for _ in range(n):
            name = _read_str(fh)
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(shape)
            tensors[name] = arr.astype(np.float32)
    return meta, tensors


# ---------------------------------------------------------------------------
# Labels CSV and manifests
# ---------------------------------------------------------------------------

def write_labels_csv(path: str | Path, rows: list[dict]) -> None:
    import csv

    extra = sorted({k for r in rows for k in r} - {"subject_id", "task", "y"})
    cols = ["subject_id", "task", "y", *extra]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for r in rows:
            writer.writerow(r)


def read_labels_csv(path: str | Path) -> list[dict]:
    import csv

    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["y"] = int(r["y"])
    return rows


def write_manifest(artifact: str | Path, config_hash: str, command: str,
                   seed: int, extra: dict | None = None) -> None:
    artifact = Path(artifact)
    doc = {"artifact": artifact.name, "config_hash": config_hash,
           "command": command, "seed": seed}
    if extra:
        doc.update(extra)
    manifest = artifact.with_suffix(artifact.suffix + ".manifest.json")
    manifest.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(artifact: str | Path) -> dict:
    artifact = Path(artifact)
    manifest = artifact.with_suffix(artifact.suffix + ".manifest.json")
    if not manifest.exists():
        raise MissingArtifactError(f"missing manifest for {artifact}")
    return json.loads(manifest.read_text())
