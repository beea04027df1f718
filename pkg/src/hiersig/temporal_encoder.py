"""Stage II: masked-embedding prediction over week-long bin sequences.

A week is 2016 five-minute bins; each bin is the mean of the Stage I segment
embeddings falling inside it, or a learnable missing token where no segment
contributed.  Every bin receives two additive learnable positional rows
keyed by its local calendar slot: one of 7 day-of-week rows plus one of 288
time-of-day rows, so bins exactly one week apart share their encoding.

Training samples a sparse context set through the multi-scale patch
protocol (patch size drawn uniformly from {1, 2, 4}, contiguous aligned
patches, |context| fixed), encodes it with a pre-norm transformer stack, and
reconstructs the complementary targets through two branches: a
cross-attention decoder whose queries are the target positional rows, and a
bottleneck decoder that sees the context only through a single pooled week
vector concatenated ahead of the target positional rows.  Both branches
minimize mean squared error over targets that are real (non-missing) bins.

At inference the encoder runs over all 2016 bins and the pooled week vector
is the downstream representation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import BIN_SECONDS, NumericalError, TOD_BINS, WEEK_BINS, subseed
from .shards import read_checkpoint, write_checkpoint


@dataclass
class BinSequence:
    """One subject-week of binned embeddings with its missingness mask."""

    subject_id: str
    week_start: int             # epoch seconds of local Monday 00:00
    tz_offset_min: int
    values: np.ndarray          # (2016, d) float32, zero rows where missing
    missing: np.ndarray         # (2016,) bool
    counts: np.ndarray          # contributing segments per bin

    def anchors(self) -> np.ndarray:
        """Calendar anchor (epoch seconds) of each bin; consecutive anchors
        differ by exactly 300 s."""
        return self.week_start + BIN_SECONDS * np.arange(WEEK_BINS, dtype=np.int64)


def bin_embeddings(timestamps, vectors, subject_id: str, week_start: int,
                   tz_offset_min: int = 0) -> tuple[BinSequence, int]:
    """Average segment embeddings into the week's 2016 bins.

    Embeddings outside [week_start, week_start + 7 days) are ignored and
    counted.  Returns (sequence, n_outside).
    """
    timestamps = np.asarray(timestamps, dtype=np.int64)
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] != timestamps.shape[0]:
        raise ValueError("vectors must be (n, d) aligned with timestamps")
    d = vectors.shape[1]
    rel = timestamps - week_start
    in_week = (rel >= 0) & (rel < WEEK_BINS * BIN_SECONDS)
    idx = rel[in_week] // BIN_SECONDS
    values = np.zeros((WEEK_BINS, d))
    counts = np.zeros(WEEK_BINS, dtype=np.int64)
    np.add.at(values, idx, vectors[in_week])
    np.add.at(counts, idx, 1)
    nonzero = counts > 0
    values[nonzero] /= counts[nonzero, None]
    seq = BinSequence(subject_id, int(week_start), tz_offset_min,
                      values.astype(np.float32), ~nonzero, counts)
    return seq, int((~in_week).sum())


# ---------------------------------------------------------------------------
# Mask plans
# ---------------------------------------------------------------------------

@dataclass
class MaskPlan:
    patch: int
    context: np.ndarray    # sorted bin indices, |context| = n_ctx
    targets: np.ndarray    # sorted complement


def sample_mask_plan(rng: np.random.Generator, m: int = WEEK_BINS,
                     n_ctx: int = 252, patch_sizes=(1, 2, 4)) -> MaskPlan:
    """Draw a patch size uniformly, partition the index set into aligned
    contiguous patches, and sample n_ctx/patch of them as the context."""
    if not 0 < n_ctx < m:
        raise ValueError("n_ctx must lie strictly between 0 and m")
    for p in patch_sizes:
        if n_ctx % p or m % p:
            raise ValueError(f"patch size {p} must divide both n_ctx and m")
    p = int(patch_sizes[rng.integers(len(patch_sizes))])
    chosen = rng.choice(m // p, size=n_ctx // p, replace=False)
    context = (chosen[:, None] * p + np.arange(p)).ravel()
    context.sort()
    keep = np.zeros(m, dtype=bool)
    keep[context] = True
    return MaskPlan(p, context, np.flatnonzero(~keep))


# ---------------------------------------------------------------------------
# Model components
# ---------------------------------------------------------------------------

class FactorizedPE(nn.Module):
    """Additive day-of-week (7 x d) + time-of-day (288 x d) lookup tables."""

    def __init__(self, d: int):
        super().__init__()
        self.dow = nn.Parameter(torch.randn(7, d) * 0.02)
        self.tod = nn.Parameter(torch.randn(TOD_BINS, d) * 0.02)

    def rows(self, dow_idx0: torch.Tensor, tod_idx0: torch.Tensor) -> torch.Tensor:
        return self.dow[dow_idx0] + self.tod[tod_idx0]


def apply_pe(values, pe: FactorizedPE, dow_idx0, tod_idx0) -> torch.Tensor:
    """values[t] + dow_row + tod_row, after any missing-token substitution."""
    x = torch.as_tensor(values)
    return x + pe.rows(torch.as_tensor(dow_idx0), torch.as_tensor(tod_idx0))


def _attend(q, k, v, heads: int):
    b, tq, d = q.shape
    dk = d // heads
    q = q.view(b, tq, heads, dk).transpose(1, 2)
    k = k.view(b, k.shape[1], heads, dk).transpose(1, 2)
    v = v.view(b, v.shape[1], heads, dk).transpose(1, 2)
    out = F.scaled_dot_product_attention(q, k, v)
    return out.transpose(1, 2).reshape(b, tq, d)


class SelfBlock(nn.Module):
    def __init__(self, d: int, heads: int, mlp_dim: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, mlp_dim), nn.GELU(),
                                 nn.Linear(mlp_dim, d))

    def forward(self, x):
        q, k, v = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        x = x + self.proj(_attend(q, k, v, self.heads))
        return x + self.mlp(self.ln2(x))


class CrossBlock(nn.Module):
    def __init__(self, d: int, heads: int, mlp_dim: int):
        super().__init__()
        self.heads = heads
        self.lnq = nn.LayerNorm(d)
        self.lnkv = nn.LayerNorm(d)
        self.q = nn.Linear(d, d)
        self.kv = nn.Linear(d, 2 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, mlp_dim), nn.GELU(),
                                 nn.Linear(mlp_dim, d))

    def forward(self, x, context):
        k, v = self.kv(self.lnkv(context)).chunk(2, dim=-1)
        x = x + self.proj(_attend(self.q(self.lnq(x)), k, v, self.heads))
        return x + self.mlp(self.ln2(x))


@dataclass
class Stage2Config:
    model_dim: int = 64
    encoder_layers: int = 4
    decoder_layers: int = 2
    heads: int = 4
    mlp_dim: int = 192
    n_ctx: int = 252
    patch_sizes: tuple = (1, 2, 4)
    iterations: int = 1200
    batch_size: int = 6
    lr: float = 8e-4
    warmup_frac: float = 0.125
    weight_decay: float = 0.0
    local_branch: bool = True
    global_branch: bool = True
    week_token: str = "pooled"
    allow_missing_in_context: bool = True
    holdout_weeks: int = 16
    eval_every: int = 100
    in_dim: int = 64
    n_bins: int = WEEK_BINS     # reduced only in tiny test configs

    def __post_init__(self):
        if not (self.local_branch or self.global_branch):
            raise ValueError("at least one decoder branch must be enabled")
        if self.week_token not in ("pooled", "learnable"):
            raise ValueError("week_token must be 'pooled' or 'learnable'")

    @classmethod
    def from_mapping(cls, m: dict, in_dim: int | None = None) -> "Stage2Config":
        keys = ["model_dim", "encoder_layers", "decoder_layers", "heads",
                "mlp_dim", "n_ctx", "iterations", "batch_size", "lr",
                "warmup_frac", "weight_decay", "local_branch", "global_branch",
                "week_token", "allow_missing_in_context", "holdout_weeks",
                "eval_every"]
        kw = {k: m[k] for k in keys}
        kw["patch_sizes"] = tuple(m["patch_sizes"])
        kw["in_dim"] = in_dim if in_dim is not None else m.get("in_dim", kw["model_dim"])
        kw["n_bins"] = m.get("n_bins", WEEK_BINS)
        return cls(**kw)

    def to_dict(self) -> dict:
        out = self.__dict__.copy()
        out["patch_sizes"] = list(self.patch_sizes)
        return out


class WeekModel(nn.Module):
    """Temporal encoder plus the dual reconstruction branches."""

    def __init__(self, cfg: Stage2Config):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.input_proj = (nn.Linear(cfg.in_dim, d)
                           if cfg.in_dim != d else None)
        self.missing_token = nn.Parameter(torch.randn(d) * 0.02)
        self.pe = FactorizedPE(d)
        self.encoder = nn.ModuleList(
            SelfBlock(d, cfg.heads, cfg.mlp_dim) for _ in range(cfg.encoder_layers))
        if cfg.week_token == "learnable":
            self.week_query = nn.Parameter(torch.randn(d) * 0.02)
        if cfg.local_branch:
            self.local_decoder = nn.ModuleList(
                CrossBlock(d, cfg.heads, cfg.mlp_dim) for _ in range(cfg.decoder_layers))
            self.local_head = nn.Linear(d, d)
        if cfg.global_branch:
            self.global_decoder = nn.ModuleList(
                SelfBlock(d, cfg.heads, cfg.mlp_dim) for _ in range(cfg.decoder_layers))
            self.global_head = nn.Linear(d, d)
        dow = (torch.arange(cfg.n_bins) // TOD_BINS) % 7
        tod = torch.arange(cfg.n_bins) % TOD_BINS
        self.register_buffer("dow_idx0", dow, persistent=False)
        self.register_buffer("tod_idx0", tod, persistent=False)

    # -- input construction ------------------------------------------------
    def project_values(self, values: torch.Tensor) -> torch.Tensor:
        return self.input_proj(values) if self.input_proj is not None else values

    def prepare_bins(self, values: torch.Tensor, missing: torch.Tensor) -> torch.Tensor:
        """Missing-token substitution first, then the additive calendar rows."""
        x = self.project_values(values)
        x = torch.where(missing.unsqueeze(-1), self.missing_token.expand_as(x), x)
        return x + self.pe.rows(self.dow_idx0, self.tod_idx0)

    def target_pe(self, tgt_idx: torch.Tensor) -> torch.Tensor:
        return self.pe.rows(self.dow_idx0[tgt_idx], self.tod_idx0[tgt_idx])

    # -- encoder -----------------------------------------------------------
    def encode(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Run the transformer stack; returns (per-token outputs, week vector)."""
        h = tokens
        if self.cfg.week_token == "learnable":
            wq = self.week_query.expand(h.shape[0], 1, -1)
            h = torch.cat([wq, h], dim=1)
        for block in self.encoder:
            h = block(h)
        if self.cfg.week_token == "learnable":
            return h[:, 1:], h[:, 0]
        return h, h.mean(dim=1)

    # -- decoders ----------------------------------------------------------
    def decode_local(self, context_h: torch.Tensor, tgt_pe: torch.Tensor) -> torch.Tensor:
        x = tgt_pe
        for block in self.local_decoder:
            x = block(x, context_h)
        return self.local_head(x)

    def decode_global(self, week_vec: torch.Tensor, tgt_pe: torch.Tensor) -> torch.Tensor:
        seq = torch.cat([week_vec.unsqueeze(1), tgt_pe], dim=1)
        for block in self.global_decoder:
            seq = block(seq)
        return self.global_head(seq[:, 1:])

    # -- full passes ---------------------------------------------------------
    def forward_train(self, values: torch.Tensor, missing: torch.Tensor,
                      plans: list[MaskPlan]) -> dict:
        """Masked-reconstruction losses for a batch of weeks.

        Reconstruction targets are the projected bin values (detached so a
        learned input map cannot shrink its own objective); samples whose
        target set holds no real bin are skipped.
        """
        device = values.device
        ctx_idx = torch.as_tensor(np.stack([p.context for p in plans]), device=device)
        tgt_idx = torch.as_tensor(np.stack([p.targets for p in plans]), device=device)
        x = self.prepare_bins(values, missing)
        d = x.shape[-1]
        ctx = torch.gather(x, 1, ctx_idx.unsqueeze(-1).expand(-1, -1, d))
        h, week_vec = self.encode(ctx)
        tgt_pe = self.target_pe(tgt_idx)
        true = self.project_values(values).detach()
        true_tgt = torch.gather(true, 1, tgt_idx.unsqueeze(-1).expand(-1, -1, d))
        real = ~torch.gather(missing, 1, tgt_idx)

        out = {"local": None, "global": None, "n_skipped": 0}
        per_sample = []
        preds = {}
        if self.cfg.local_branch:
            preds["local"] = self.decode_local(h, tgt_pe)
        if self.cfg.global_branch:
            preds["global"] = self.decode_global(week_vec, tgt_pe)
        branch_totals = {k: [] for k in preds}
        for b in range(values.shape[0]):
            mask = real[b]
            m_hat = int(mask.sum())
            if m_hat == 0:
                out["n_skipped"] += 1
                continue
            sample_loss = 0.0
            for name, pred in preds.items():
                err = F.mse_loss(pred[b][mask], true_tgt[b][mask])
                branch_totals[name].append(err)
                sample_loss = sample_loss + err
            per_sample.append(sample_loss)
        if not per_sample:
            out["loss"] = None
            return out
        out["loss"] = torch.stack(per_sample).mean()
        for name, vals in branch_totals.items():
            out[name] = torch.stack(vals).mean()
        return out

    def embed(self, values: torch.Tensor, missing: torch.Tensor):
        """Full-context pass over all 2016 bins; returns (week vec, per-bin)."""
        x = self.prepare_bins(values, missing)
        h, week_vec = self.encode(x)
        return week_vec, h


def reconstruction_loss(true_targets, pred_local, pred_global, real_mask):
    """Dual-branch MSE per the training objective, for one sample.

    Each enabled branch contributes mean((v - v_hat)^2) over the d * |M|
    elements of the real (non-missing) targets; a disabled branch passes
    None.  Returns None when no target is real (sample skipped).
    """
    true_targets = torch.as_tensor(true_targets)
    real_mask = torch.as_tensor(real_mask, dtype=torch.bool)
    if int(real_mask.sum()) == 0:
        return None
    total = None
    for pred in (pred_local, pred_global):
        if pred is None:
            continue
        pred = torch.as_tensor(pred)
        branch = F.mse_loss(pred[real_mask], true_targets[real_mask])
        total = branch if total is None else total + branch
    return total


# ---------------------------------------------------------------------------
# Training and inference
# ---------------------------------------------------------------------------

def _cosine_lr(step: int, total: int, peak: float, warmup_frac: float) -> float:
    warmup = max(1, int(total * warmup_frac))
    if step < warmup:
        return peak * (step + 1) / warmup
    frac = (step - warmup) / max(1, total - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * frac))


def _stack_weeks(weeks: list[BinSequence]):
    values = torch.as_tensor(np.stack([w.values for w in weeks]), dtype=torch.float32)
    missing = torch.as_tensor(np.stack([w.missing for w in weeks]))
    return values, missing


def train_stage2(weeks: list[BinSequence], cfg: Stage2Config, master_seed: int,
                 scope: str = "stage2", resume_state: dict | None = None):
    """Train the week model; returns (model, log).

    A fixed subset of weeks is held out with fixed mask plans; its per-branch
    losses are logged every eval interval.  NaN aborts with the last
    checkpointed state attached to the raised error.
    """
    if len(weeks) < 2:
        raise ValueError("stage2 training needs at least 2 weeks of data")
    torch.manual_seed(subseed(master_seed, scope, "torch"))
    rng = np.random.default_rng(subseed(master_seed, scope, "batches"))
    plan_rng = np.random.default_rng(subseed(master_seed, scope, "plans"))

    n_hold = min(cfg.holdout_weeks, len(weeks) - 1)
    order = np.random.default_rng(subseed(master_seed, scope, "split")).permutation(len(weeks))
    hold_ids, train_ids = order[:n_hold], order[n_hold:]
    hold_values, hold_missing = _stack_weeks([weeks[i] for i in hold_ids])
    hold_plans = [sample_mask_plan(
        np.random.default_rng(subseed(master_seed, scope, "holdplan", int(i))),
        cfg.n_bins, cfg.n_ctx, cfg.patch_sizes) for i in hold_ids]
    train_values, train_missing = _stack_weeks([weeks[i] for i in train_ids])

    model = WeekModel(cfg)
    start_step = 0
    if resume_state is not None:
        model.load_state_dict(resume_state["state_dict"])
        start_step = resume_state.get("step", 0)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr,
                           weight_decay=cfg.weight_decay)

    def eval_holdout() -> dict:
        model.eval()
        with torch.no_grad():
            res = model.forward_train(hold_values, hold_missing, hold_plans)
        model.train()
        return {k: (float(res[k]) if res.get(k) is not None else None)
                for k in ("loss", "local", "global")}

    log = [{"step": start_step, "lr": 0.0, "train_loss": None, **{
        f"eval_{k}": v for k, v in eval_holdout().items()}}]
    last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
    model.train()
    for step in range(start_step, cfg.iterations):
        lr = _cosine_lr(step, cfg.iterations, cfg.lr, cfg.warmup_frac)
        for g in opt.param_groups:
            g["lr"] = lr
        take = min(cfg.batch_size, len(train_ids))
        batch = rng.choice(len(train_ids), size=take, replace=False)
        plans = [sample_mask_plan(plan_rng, cfg.n_bins, cfg.n_ctx, cfg.patch_sizes)
                 for _ in range(take)]
        res = model.forward_train(train_values[batch], train_missing[batch], plans)
        if res["loss"] is None:
            continue
        if not torch.isfinite(res["loss"]):
            err = NumericalError(f"stage2 loss diverged at step {step} (lr={lr:.2e})")
            err.last_good_state = last_good
            err.step = step
            raise err
        opt.zero_grad()
        res["loss"].backward()
        opt.step()
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.iterations:
            entry = {"step": step + 1, "lr": lr,
                     "train_loss": float(res["loss"].detach())}
            entry.update({f"eval_{k}": v for k, v in eval_holdout().items()})
            log.append(entry)
            last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
    model.eval()
    return model, log


def embed_week(model: WeekModel, seq: BinSequence):
    """Week vector for one sequence; all-missing weeks are flagged (None)."""
    if seq.missing.all():
        return None
    model.eval()
    with torch.no_grad():
        values = torch.as_tensor(seq.values, dtype=torch.float32).unsqueeze(0)
        missing = torch.as_tensor(seq.missing).unsqueeze(0)
        week_vec, _ = model.embed(values, missing)
    return week_vec.squeeze(0).numpy()


def embed_weeks_batch(model: WeekModel, weeks: list[BinSequence], batch_size: int = 8):
    """Week vectors and per-bin outputs for many sequences (None if all-missing)."""
    model.eval()
    vecs: list = []
    bins: list = []
    with torch.no_grad():
        for i in range(0, len(weeks), batch_size):
            chunk = weeks[i:i + batch_size]
            values, missing = _stack_weeks(chunk)
            week_vec, h = model.embed(values, missing)
            for j, w in enumerate(chunk):
                if w.missing.all():
                    vecs.append(None)
                    bins.append(None)
                else:
                    vecs.append(week_vec[j].numpy())
                    bins.append(h[j].numpy())
    return vecs, bins


def save_stage2(path, model: WeekModel, config_hash: str, step: int,
                extra: dict | None = None) -> None:
    meta = {"kind": "stage2", "config": model.cfg.to_dict(),
            "config_hash": config_hash, "step": step}
    if extra:
        meta.update(extra)
    tensors = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    write_checkpoint(path, meta, tensors)


def load_stage2(path) -> tuple[WeekModel, dict]:
    meta, tensors = read_checkpoint(path)
    if meta.get("kind") != "stage2":
        raise ValueError(f"not a stage2 checkpoint: {path}")
    cfg = Stage2Config.from_mapping(meta["config"], in_dim=meta["config"]["in_dim"])
    model = WeekModel(cfg)
    model.load_state_dict({k: torch.as_tensor(v.copy()) for k, v in tensors.items()})
    model.eval()
    return model, meta
