"""Comparison models: pooled-morphology, behavior feature adapter, and the
three supervised temporal aggregators (weighted pooling, single-query
cross-attention with rotary positions, missing-aware LSTM).

All three aggregators consume a week-long bin sequence with its validity
mask and are exactly invariant to the content of masked bins: weighted
pooling and cross-attention force masked scores to -inf (zero attention),
and the LSTM propagates hidden/cell state unchanged through missing steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import subseed
from .features import FeatureSequence
from .temporal_encoder import BinSequence


def morphology_pool(embeddings) -> np.ndarray:
    """Mean of all segment embeddings for one subject."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 1:
        raise ValueError("need at least one embedding row")
    return emb.mean(axis=0)


def behavior_sequence(seq: FeatureSequence, mean: np.ndarray,
                      std: np.ndarray) -> BinSequence:
    """Standardized feature week as a Stage II-compatible bin sequence.

    Standardization statistics must come from the training split; the
    19-to-d input map is learned inside the week model.
    """
    if mean is None or std is None:
        raise ValueError("standardization statistics missing; fit on the training split first")
    values = np.where(seq.missing[:, None], 0.0, (seq.values - mean) / std)
    return BinSequence(seq.subject_id, seq.week_start, seq.tz_offset_min,
                       values.astype(np.float32), seq.missing.copy(),
                       seq.counts.copy())


# ---------------------------------------------------------------------------
# Supervised aggregators
# ---------------------------------------------------------------------------

@dataclass
class AggregatorConfig:
    kind: str                      # weighted_pooling | cross_attention | lstm
    in_dim: int
    dropout: float = 0.2
    lstm_hidden: int = 64
    rope_base: float = 10000.0
    heads: int = 4

    def __post_init__(self):
        if self.kind not in ("weighted_pooling", "cross_attention", "lstm"):
            raise ValueError(f"unknown aggregator kind {self.kind!r}")


class WeightedPooling(nn.Module):
    """LayerNorm, scalar gate per bin, masked softmax pool, linear head."""

    def __init__(self, cfg: AggregatorConfig):
        super().__init__()
        self.norm = nn.LayerNorm(cfg.in_dim)
        self.gate = nn.Linear(cfg.in_dim, 1)
        self.drop = nn.Dropout(cfg.dropout)
        self.head = nn.Linear(cfg.in_dim, 1)

    def weights(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        if not valid.any(dim=1).all():
            raise ValueError("weighted pooling needs at least one valid bin per week")
        scores = self.gate(self.norm(x)).squeeze(-1)
        scores = scores.masked_fill(~valid, float("-inf"))
        return F.softmax(scores, dim=1)

    def forward(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        alpha = self.weights(x, valid)
        pooled = torch.einsum("bt,btd->bd", alpha, self.norm(x))
        return self.head(self.drop(pooled)).squeeze(-1)


def rotary_rotate(x: torch.Tensor, positions: torch.Tensor,
                  base: float) -> torch.Tensor:
    """Rotate feature pairs of x by position-dependent angles (RoPE)."""
    dk = x.shape[-1]
    if dk % 2:
        raise ValueError("rotary embedding needs an even head dimension")
    inv = base ** (-torch.arange(0, dk, 2, dtype=x.dtype) / dk)
    ang = positions.to(x.dtype).unsqueeze(-1) * inv
    cos, sin = torch.cos(ang), torch.sin(ang)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


class CrossAttentionAggregator(nn.Module):
    """Learnable classification token attending once over the valid bins.

    Rotary positions enter the query (position 0) and keys (true bin
    indices); an asymmetric boolean mask hides invalid bins from the query.
    """

    def __init__(self, cfg: AggregatorConfig):
        super().__init__()
        d = cfg.in_dim
        if d % cfg.heads:
            raise ValueError("in_dim must be divisible by the head count")
        self.cfg = cfg
        self.norm = nn.LayerNorm(d)
        self.cls = nn.Parameter(torch.randn(d) * 0.02)
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.proj = nn.Linear(d, d)
        self.mlp = nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(),
                                 nn.Dropout(cfg.dropout), nn.Linear(2 * d, 1))

    def attention_weights(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        if not valid.any(dim=1).all():
            raise ValueError("cross-attention needs at least one valid bin per week")
        b, m, d = x.shape
        h, dk = self.cfg.heads, d // self.cfg.heads
        xn = self.norm(x)
        q = self.q(self.cls).view(h, dk)
        q = rotary_rotate(q, torch.zeros(h, dtype=torch.long), self.cfg.rope_base)
        k = self.k(xn).view(b, m, h, dk)
        pos = torch.arange(m).view(1, m, 1).expand(b, m, h)
        k = rotary_rotate(k, pos, self.cfg.rope_base)
        logits = torch.einsum("hk,bmhk->bhm", q, k) / math.sqrt(dk)
        logits = logits.masked_fill(~valid.unsqueeze(1), float("-inf"))
        return F.softmax(logits, dim=-1)

    def forward(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        b, m, d = x.shape
        h, dk = self.cfg.heads, d // self.cfg.heads
        alpha = self.attention_weights(x, valid)
        v = self.v(self.norm(x)).view(b, m, h, dk)
        out = torch.einsum("bhm,bmhk->bhk", alpha, v).reshape(b, d)
        return self.mlp(self.proj(out)).squeeze(-1)


class MissingAwareLSTM(nn.Module):
    """LSTM whose cell update is skipped wherever the step is invalid."""

    def __init__(self, cfg: AggregatorConfig):
        super().__init__()
        self.cell = nn.LSTMCell(cfg.in_dim, cfg.lstm_hidden)
        self.drop = nn.Dropout(cfg.dropout)
        self.head = nn.Linear(cfg.lstm_hidden, 1)
        self.hidden = cfg.lstm_hidden

    def final_state(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        if not valid.any(dim=1).all():
            raise ValueError("LSTM needs at least one valid bin per week")
        b = x.shape[0]
        h = x.new_zeros(b, self.hidden)
        c = x.new_zeros(b, self.hidden)
        for t in range(x.shape[1]):
            # Invalid inputs must not leak: zero them before the (discarded)
            # cell evaluation so arbitrary masked content stays inert.
            step = torch.where(valid[:, t].unsqueeze(1), x[:, t],
                               torch.zeros_like(x[:, t]))
            h_new, c_new = self.cell(step, (h, c))
            keep = valid[:, t].unsqueeze(1)
            h = torch.where(keep, h_new, h)
            c = torch.where(keep, c_new, c)
        return h

    def forward(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        return self.head(self.drop(self.final_state(x, valid))).squeeze(-1)


def build_aggregator(cfg: AggregatorConfig) -> nn.Module:
    return {"weighted_pooling": WeightedPooling,
            "cross_attention": CrossAttentionAggregator,
            "lstm": MissingAwareLSTM}[cfg.kind](cfg)


# ---------------------------------------------------------------------------
# Supervised training
# ---------------------------------------------------------------------------

def _subject_scores(model, weeks: list[BinSequence], batch: int = 16) -> dict:
    """Mean per-subject sigmoid score over that subject's weeks."""
    model.eval()
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    with torch.no_grad():
        for i in range(0, len(weeks), batch):
            chunk = weeks[i:i + batch]
            x = torch.as_tensor(np.stack([w.values for w in chunk]), dtype=torch.float32)
            valid = torch.as_tensor(~np.stack([w.missing for w in chunk]))
            logits = model(x, valid)
            for w, s in zip(chunk, torch.sigmoid(logits)):
                sums[w.subject_id] = sums.get(w.subject_id, 0.0) + float(s)
                counts[w.subject_id] = counts.get(w.subject_id, 0) + 1
    return {s: sums[s] / counts[s] for s in sums}


def train_supervised(kind: str, weeks: list[BinSequence], labels: dict,
                     train_subjects: list[str], val_subjects: list[str],
                     master_seed: int, in_dim: int, dropout: float = 0.2,
                     lstm_hidden: int = 64, rope_base: float = 10000.0,
                     heads: int = 4, lr: float = 1e-3, batch_size: int = 16,
                     max_evals: int = 40, patience: int = 10):
    """Binary cross-entropy training with early stopping on validation AUROC.

    Returns (model, history).  One eval happens per epoch over the training
    weeks; the best-validation state is restored at the end.
    """
    from .evaluation import auroc

    torch.manual_seed(subseed(master_seed, "supervised", kind, "torch"))
    rng = np.random.default_rng(subseed(master_seed, "supervised", kind, "batches"))

    train_weeks = [w for w in weeks if w.subject_id in set(train_subjects)
                   and not w.missing.all()]
    val_weeks = [w for w in weeks if w.subject_id in set(val_subjects)
                 and not w.missing.all()]
    y_train = np.array([labels[w.subject_id] for w in train_weeks], dtype=np.float32)
    if len(set(y_train.tolist())) < 2:
        raise ValueError("supervised training split must contain both classes")

    cfg = AggregatorConfig(kind=kind, in_dim=in_dim, dropout=dropout,
                           lstm_hidden=lstm_hidden, rope_base=rope_base, heads=heads)
    model = build_aggregator(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    lossfn = nn.BCEWithLogitsLoss()

    def val_auroc() -> float:
        scores = _subject_scores(model, val_weeks)
        subs = sorted(scores)
        return auroc(np.array([scores[s] for s in subs]),
                     np.array([labels[s] for s in subs]))

    best = {"auroc": -1.0, "state": None, "epoch": -1}
    history = []
    since_best = 0
    for epoch in range(max_evals):
        model.train()
        order = rng.permutation(len(train_weeks))
        epoch_loss = 0.0
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            x = torch.as_tensor(np.stack([train_weeks[j].values for j in idx]),
                                dtype=torch.float32)
            valid = torch.as_tensor(~np.stack([train_weeks[j].missing for j in idx]))
            target = torch.as_tensor(y_train[idx])
            loss = lossfn(model(x, valid), target)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach()) * len(idx)
        va = val_auroc()
        history.append({"epoch": epoch, "train_loss": epoch_loss / len(order),
                        "val_auroc": va})
        if va > best["auroc"]:
            best = {"auroc": va, "epoch": epoch,
                    "state": {k: v.detach().clone() for k, v in model.state_dict().items()}}
            since_best = 0
        else:
            since_best += 1
            if since_best >= patience:
                break
    if best["state"] is not None:
        model.load_state_dict(best["state"])
    model.eval()
    return model, history


def supervised_subject_scores(model, weeks: list[BinSequence],
                              subjects: list[str]) -> tuple[np.ndarray, list[str]]:
    scores = _subject_scores(model, [w for w in weeks
                                     if w.subject_id in set(subjects)
                                     and not w.missing.all()])
    present = [s for s in subjects if s in scores]
    return np.array([scores[s] for s in present]), present
