"""Stage I: subject-contrastive segment encoder.

A small 1-D conv stack maps a normalized (2, 1500) segment to a d-vector via
global average pooling.  Training draws batches of S subjects x 2 segments,
projects embeddings through a two-layer MLP head, l2-normalizes, and applies
the subject-contrastive InfoNCE objective: for anchor i the positives are
the other same-subject segments in the batch and the denominator runs over
every other batch element (positives included).  After pretraining the head
is discarded and the frozen encoder exports segment embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .config import NumericalError, subseed
from .shards import RecordShard, read_checkpoint, write_checkpoint

ZERO_NORM_EPS = 1e-12


@dataclass
class Stage1Config:
    embedding_dim: int = 64
    projection_dim: int = 128
    temperature: float = 0.04
    conv_channels: tuple = (16, 32, 64, 64)
    conv_kernels: tuple = (7, 7, 7, 7)
    conv_strides: tuple = (4, 2, 2, 2)
    steps: int = 1500
    batch_size: int = 48
    subjects_per_batch: int = 24
    lr: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 1e-6
    eval_every: int = 100
    holdout_segments: int = 512

    @classmethod
    def from_mapping(cls, m: dict) -> "Stage1Config":
        return cls(
            embedding_dim=m["embedding_dim"], projection_dim=m["projection_dim"],
            temperature=m["temperature"], conv_channels=tuple(m["conv_channels"]),
            conv_kernels=tuple(m["conv_kernels"]), conv_strides=tuple(m["conv_strides"]),
            steps=m["steps"], batch_size=m["batch_size"],
            subjects_per_batch=m["subjects_per_batch"], lr=m["lr"],
            warmup_steps=m["warmup_steps"], weight_decay=m["weight_decay"],
            eval_every=m["eval_every"], holdout_segments=m["holdout_segments"])

    def to_dict(self) -> dict:
        return {
            "embedding_dim": self.embedding_dim, "projection_dim": self.projection_dim,
            "temperature": self.temperature, "conv_channels": list(self.conv_channels),
            "conv_kernels": list(self.conv_kernels), "conv_strides": list(self.conv_strides),
            "steps": self.steps, "batch_size": self.batch_size,
            "subjects_per_batch": self.subjects_per_batch, "lr": self.lr,
            "warmup_steps": self.warmup_steps, "weight_decay": self.weight_decay,
            "eval_every": self.eval_every, "holdout_segments": self.holdout_segments}


class SegmentEncoder(nn.Module):
    """Conv1d blocks ending at the embedding width, then global average pool."""

    def __init__(self, cfg: Stage1Config, in_channels: int = 2):
        super().__init__()
        if cfg.conv_channels[-1] != cfg.embedding_dim:
            raise ValueError("last conv channel count must equal embedding_dim")
        blocks = []
        c_in = in_channels
        for c, k, s in zip(cfg.conv_channels, cfg.conv_kernels, cfg.conv_strides):
            blocks += [nn.Conv1d(c_in, c, k, stride=s, padding=k // 2),
                       nn.GroupNorm(4, c), nn.ReLU()]
            c_in = c
        self.blocks = nn.Sequential(*blocks)
        self.cfg = cfg

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x).mean(dim=2)


class ProjectionHead(nn.Module):
    def __init__(self, d: int, d_proj: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d, d_proj), nn.ReLU(),
                                 nn.Linear(d_proj, d_proj))

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        return self.net(e)


def project_normalize(h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """l2-normalize rows; near-zero rows get a scalar epsilon first, flagged."""
    norms = h.norm(dim=-1, keepdim=True)
    flagged = norms.squeeze(-1) < ZERO_NORM_EPS
    h = torch.where(flagged.unsqueeze(-1), h + ZERO_NORM_EPS, h)
    return h / h.norm(dim=-1, keepdim=True), flagged


def contrastive_loss(q: torch.Tensor, subject_ids, temperature: float):
    """Subject-contrastive InfoNCE averaged over anchors that have positives.

    Returns (loss, n_anchors); loss is None when no anchor has a positive.
    Positives stay in the denominator, which runs over all other elements.
    """
    if isinstance(subject_ids, torch.Tensor):
        ids = subject_ids
    else:
        uniq = {s: i for i, s in enumerate(dict.fromkeys(subject_ids))}
        ids = torch.tensor([uniq[s] for s in subject_ids])
    b = q.shape[0]
    sims = (q @ q.T) / temperature
    eye = torch.eye(b, dtype=torch.bool, device=q.device)
    pos = (ids.unsqueeze(0) == ids.unsqueeze(1)) & ~eye
    has_pos = pos.any(dim=1)
    if not bool(has_pos.any()):
        return None, 0
    log_den = torch.logsumexp(sims.masked_fill(eye, float("-inf")), dim=1)
    log_lik = sims - log_den.unsqueeze(1)
    pos_counts = pos.sum(dim=1).clamp(min=1)
    per_anchor = -(log_lik * pos).sum(dim=1) / pos_counts
    return per_anchor[has_pos].mean(), int(has_pos.sum())


class Stage1Model(nn.Module):
    def __init__(self, cfg: Stage1Config):
        super().__init__()
        self.encoder = SegmentEncoder(cfg)
        self.head = ProjectionHead(cfg.embedding_dim, cfg.projection_dim)
        self.cfg = cfg

    def project(self, x: torch.Tensor) -> torch.Tensor:
        q, _ = project_normalize(self.head(self.encoder(x)))
        return q


def encode_segment(model: Stage1Model, segment: np.ndarray,
                   degenerate: bool = False) -> tuple[np.ndarray, bool]:
    """Embed one (2, 1500) segment; degenerate segments are flagged through."""
    model.eval()
    with torch.no_grad():
        x = torch.as_tensor(np.asarray(segment), dtype=torch.float32).unsqueeze(0)
        e = model.encoder(x).squeeze(0).numpy()
    return e, degenerate


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _segments_by_subject(subject_idx: np.ndarray, usable: np.ndarray) -> dict:
    groups: dict[int, list[int]] = {}
    for i in np.flatnonzero(usable):
        groups.setdefault(int(subject_idx[i]), []).append(i)
    return {s: np.array(v) for s, v in groups.items() if len(v) >= 2}


class PairBatchSampler:
    """S subjects x 2 segments per batch so every anchor has one positive."""

    def __init__(self, groups: dict, subjects_per_batch: int, rng: np.random.Generator):
        if len(groups) < 2:
            raise ValueError("stage1 training needs segments from >= 2 subjects")
        self.groups = groups
        self.subject_keys = np.array(sorted(groups))
        self.s = min(subjects_per_batch, len(groups))
        self.rng = rng

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        subs = self.rng.choice(self.subject_keys, size=self.s, replace=False)
        idx, owners = [], []
        for s in subs:
            pick = self.rng.choice(self.groups[s], size=2, replace=False)
            idx.extend(int(i) for i in pick)
            owners.extend([int(s), int(s)])
        return np.array(idx), np.array(owners)


def _lr_at(step: int, cfg: Stage1Config) -> float:
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    return cfg.lr


def train_stage1(shard: RecordShard, cfg: Stage1Config, master_seed: int,
                 resume_state: dict | None = None):
    """Train the segment encoder on a SEG1 shard.

    Returns (model, log).  The log holds one entry per eval interval with
    train and held-out losses.  Held-out batches are fixed up front and their
    segments removed from the training pool.  NaN loss aborts.
    """
    torch.manual_seed(subseed(master_seed, "stage1", "torch"))
    rng = np.random.default_rng(subseed(master_seed, "stage1", "batches"))

    data = torch.as_tensor(shard.data.reshape(len(shard), 2, -1), dtype=torch.float32)
    degenerate = ~np.abs(shard.data.reshape(len(shard), 2, -1)).max(axis=2).all(axis=1)
    usable = ~degenerate
    groups = _segments_by_subject(shard.subject_idx, usable)

    holdout_rng = np.random.default_rng(subseed(master_seed, "stage1", "holdout"))
    holdout_sampler = PairBatchSampler(groups, cfg.subjects_per_batch, holdout_rng)
    n_hold = max(1, cfg.holdout_segments // cfg.batch_size)
    holdout = [holdout_sampler.next() for _ in range(n_hold)]
    held_idx = {int(i) for idx, _ in holdout for i in idx}
    train_groups = {s: v[~np.isin(v, list(held_idx))] for s, v in groups.items()}
    train_groups = {s: v for s, v in train_groups.items() if len(v) >= 2}
    sampler = PairBatchSampler(train_groups, cfg.subjects_per_batch, rng)

    model = Stage1Model(cfg)
    start_step = 0
    if resume_state is not None:
        model.load_state_dict(resume_state["state_dict"])
        start_step = resume_state.get("step", 0)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr,
                           weight_decay=cfg.weight_decay)

    def eval_holdout() -> float:
        model.eval()
        with torch.no_grad():
            losses = []
            for idx, owners in holdout:
                q = model.project(data[idx])
                loss, _ = contrastive_loss(q, torch.as_tensor(owners), cfg.temperature)
                losses.append(float(loss))
        model.train()
        return float(np.mean(losses))

    log = [{"step": start_step, "lr": 0.0, "train_loss": None,
            "eval_loss": eval_holdout()}]
    model.train()
    for step in range(start_step, cfg.steps):
        lr = _lr_at(step, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        idx, owners = sampler.next()
        q = model.project(data[idx])
        loss, n_anchors = contrastive_loss(q, torch.as_tensor(owners), cfg.temperature)
        if loss is None:
            continue
        if not torch.isfinite(loss):
            raise NumericalError(
                f"stage1 loss diverged at step {step} (lr={lr:.2e}, "
                f"anchors={n_anchors})")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            log.append({"step": step + 1, "lr": lr,
                        "train_loss": float(loss.detach()),
                        "eval_loss": eval_holdout()})
    model.eval()
    return model, log


def encode_shard(model: Stage1Model, shard: RecordShard,
                 batch_size: int = 256) -> RecordShard:
    """Frozen-encoder embeddings for every segment (EMB1 layout)."""
    model.eval()
    outs = []
    data = shard.data.reshape(len(shard), 2, -1)
    with torch.no_grad():
        for i in range(0, len(shard), batch_size):
            x = torch.as_tensor(data[i:i + batch_size], dtype=torch.float32)
            outs.append(model.encoder(x).numpy())
    emb = np.concatenate(outs, axis=0) if outs else np.zeros((0, model.cfg.embedding_dim))
    return RecordShard(kind="EMB1", subjects=shard.subjects,
                       subject_idx=shard.subject_idx.copy(),
                       epochs=shard.epochs.copy(),
                       data=emb.astype(np.float32),
                       config_hash=shard.config_hash)


def save_stage1(path, model: Stage1Model, config_hash: str, step: int,
                extra: dict | None = None) -> None:
    meta = {"kind": "stage1", "config": model.cfg.to_dict(),
            "config_hash": config_hash, "step": step}
    if extra:
        meta.update(extra)
    tensors = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    write_checkpoint(path, meta, tensors)


def save_stage1_encoder(path, model: Stage1Model, config_hash: str, step: int) -> None:
    """Encoder-only checkpoint: the projection head is discarded."""
    meta = {"kind": "stage1_encoder", "config": model.cfg.to_dict(),
            "config_hash": config_hash, "step": step}
    tensors = {f"encoder.{k}": v.detach().numpy()
               for k, v in model.encoder.state_dict().items()}
    write_checkpoint(path, meta, tensors)


def load_stage1(path) -> tuple[Stage1Model, dict]:
    meta, tensors = read_checkpoint(path)
    if meta.get("kind") not in ("stage1", "stage1_encoder"):
        raise ValueError(f"not a stage1 checkpoint: {path}")
    cfg = Stage1Config.from_mapping(meta["config"])
    model = Stage1Model(cfg)
    state = {k: torch.as_tensor(v.copy()) for k, v in tensors.items()}
    model.load_state_dict(state, strict=(meta["kind"] == "stage1"))
    model.eval()
    return model, meta
