"""Subject-level probing and metrics.

Frozen embeddings are scored with an l2-regularized logistic probe whose
regularization strength is tuned by validation AUROC over a fixed grid.
AUROC uses the Mann-Whitney formulation with half-credit ties; partial AUROC
restricts the ROC to FPR <= 0.1 and is standardized so that a perfect
classifier maps to 1.0 and chance to 0.5.  Confidence intervals come from
subject-level bootstrap resampling (resamples missing a class are redrawn).

Also here: the five missingness scenarios, the pairwise win-rate matrix, the
cosine-similarity-versus-lag circadian analysis, and the positional-table
similarity matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .config import TOD_BINS, WEEK_BINS
from .timeutil import SCENARIOS, scenario_bin_mask

L2_GRID_DEFAULT = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3, 1e4)
PROBE_GRAD_TOL = 1e-8


class MetricUndefined(ValueError):
    """Metric has no value for the given inputs (e.g. a single class)."""


def _check_classes(labels: np.ndarray) -> tuple[int, int]:
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefined("metric needs both classes present")
    return n_pos, n_neg


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos, n_neg = _check_classes(labels)
    ranks = rankdata(scores)
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """ROC vertices (fpr, tpr) from (0,0) to (1,1), one step per unique score."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos, n_neg = _check_classes(labels)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    boundaries = np.flatnonzero(np.diff(s)) + 1
    cut = np.concatenate([boundaries, [len(s)]])
    tps = np.cumsum(y == 1)[cut - 1]
    fps = np.cumsum(y == 0)[cut - 1]
    fpr = np.concatenate([[0.0], fps / n_neg])
    tpr = np.concatenate([[0.0], tps / n_pos])
    return fpr, tpr


def pauc(scores, labels, fpr_max: float = 0.1) -> float:
    """Standardized partial AUROC over FPR in [0, fpr_max].

    The raw trapezoid area A is mapped through 0.5 * (1 + (A - A_min) /
    (A_max - A_min)) where A_min is the chance-diagonal area and A_max the
    full strip, so chance scores 0.5 and a perfect ranking 1.0.
    """
    if not 0 < fpr_max <= 1:
        raise ValueError("fpr_max must lie in (0, 1]")
    fpr, tpr = roc_points(scores, labels)
    tpr_at = float(np.interp(fpr_max, fpr, tpr))
    keep = fpr <= fpr_max
    fx = np.concatenate([fpr[keep], [fpr_max]])
    fy = np.concatenate([tpr[keep], [tpr_at]])
    area = float(np.trapezoid(fy, fx))
    a_min = float(np.trapezoid([0.0, fpr_max], [0.0, fpr_max]))
    a_max = float(np.trapezoid([1.0, 1.0], [0.0, fpr_max]))
    return 0.5 * (1.0 + (area - a_min) / (a_max - a_min))


def bootstrap_metric(metric_fn, scores, labels, n_resamples: int = 1000,
                     seed: int = 0) -> dict:
    """Subject-level bootstrap: mean and 2.5/97.5 percentile interval.

    Resamples that lack one of the classes are redrawn (count reported) so
    the effective resample count stays at n_resamples.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    _check_classes(labels)
    rng = np.random.default_rng(seed)
    n = len(scores)
    values = np.empty(n_resamples)
    redrawn = 0
    for i in range(n_resamples):
        while True:
            idx = rng.integers(0, n, size=n)
            sub = labels[idx]
            if (sub == 1).any() and (sub == 0).any():
                break
            redrawn += 1
        values[i] = metric_fn(scores[idx], labels[idx])
    lo, hi = np.percentile(values, [2.5, 97.5])
    return {"point": float(metric_fn(scores, labels)),
            "mean": float(values.mean()), "ci_low": float(lo),
            "ci_high": float(hi), "n_redrawn": redrawn}


# ---------------------------------------------------------------------------
# Logistic probe
# ---------------------------------------------------------------------------

@dataclass
class LogisticProbe:
    weights: np.ndarray
    bias: float
    lam: float
    mean: np.ndarray
    std: np.ndarray
    converged: bool
    grad_norm: float
    val_auroc: float | None = None

    def decision(self, X) -> np.ndarray:
        Xs = (np.asarray(X, dtype=np.float64) - self.mean) / self.std
        return Xs @ self.weights + self.bias


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _penalized_nll(X, y, w, b, lam) -> float:
    z = X @ w + b
    # log(1 + exp(-m)) with the stable split, m = (2y-1) * z
    m = np.where(y == 1, z, -z)
    nll = np.sum(np.logaddexp(0.0, -m))
    return float(nll + 0.5 * lam * np.dot(w, w))


def fit_logreg(X, y, lam: float, tol: float = PROBE_GRAD_TOL,
               max_iter: int = 200) -> tuple[np.ndarray, float, bool, float]:
    """Damped Newton for l2-penalized logistic regression (bias unpenalized).

    Iterates until the penalized-objective gradient norm drops below tol.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    w = np.zeros(p)
    b = 0.0
    obj = _penalized_nll(X, y, w, b, lam)
    grad_norm = np.inf
    for _ in range(max_iter):
        z = X @ w + b
        prob = _sigmoid(z)
        r = prob - y
        g_w = X.T @ r + lam * w
        g_b = r.sum()
        grad_norm = float(np.sqrt(g_w @ g_w + g_b * g_b))
        if grad_norm < tol:
            return np.append(w, b), grad_norm, True, obj
        s = np.clip(prob * (1.0 - prob), 1e-12, None)
        Xa = np.hstack([X, np.ones((n, 1))])
        H = (Xa * s[:, None]).T @ Xa
        H[:p, :p] += lam * np.eye(p)
        H += 1e-12 * np.eye(p + 1)
        step = np.linalg.solve(H, np.append(g_w, g_b))
        t = 1.0
        for _ in range(50):
            w_new = w - t * step[:p]
            b_new = b - t * step[p]
            obj_new = _penalized_nll(X, y, w_new, b_new, lam)
            if obj_new <= obj + 1e-12:
                break
            t *= 0.5
        w, b, obj = w_new, b_new, obj_new
    return np.append(w, b), grad_norm, grad_norm < tol, obj


def fit_probe(X_train, y_train, X_val=None, y_val=None,
              l2_grid=L2_GRID_DEFAULT) -> LogisticProbe:
    """Standardize on train, fit one model per grid value, select by
    validation AUROC (first best wins ties); falls back to the smallest
    penalty when no validation set is supplied."""
    X_train = np.asarray(X_train, dtype=np.float64)
    y_train = np.asarray(y_train)
    _check_classes(y_train)
    mean = X_train.mean(axis=0)
    std = X_train.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    Xs = (X_train - mean) / std
    best: LogisticProbe | None = None
    for lam in l2_grid:
        beta, grad_norm, ok, _ = fit_logreg(Xs, y_train, lam)
        probe = LogisticProbe(weights=beta[:-1], bias=float(beta[-1]), lam=lam,
                              mean=mean, std=std, converged=ok, grad_norm=grad_norm)
        if X_val is None:
            return probe
        try:
            probe.val_auroc = auroc(probe.decision(X_val), y_val)
        except MetricUndefined:
            probe.val_auroc = 0.5
        if best is None or probe.val_auroc > best.val_auroc:
            best = probe
    return best


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------

def scenario_filter(seq, scenario: str):
    """Mask bins outside the scenario's local-time window as missing.

    The "all" scenario returns the input object unchanged so downstream
    embeddings are bitwise identical to the unfiltered run.  Masked bins
    have their values and contributor counts zeroed.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    if scenario == "all":
        return seq
    keep = scenario_bin_mask(scenario)
    import copy

    out = copy.copy(seq)
    out.missing = seq.missing | ~keep
    out.values = np.where(out.missing[:, None], 0.0, seq.values)
    out.counts = np.where(out.missing, 0, seq.counts)
    return out


def winrate_matrix(auroc_by_model: dict) -> tuple[list[str], np.ndarray]:
    """Entry (A, B): fraction of tasks where A's AUROC beats B's; ties 0.5."""
    models = sorted(auroc_by_model)
    task_sets = {m: frozenset(auroc_by_model[m]) for m in models}
    if len(set(task_sets.values())) != 1:
        raise ValueError(f"models disagree on task sets: { {m: sorted(t) for m, t in task_sets.items()} }")
    tasks = sorted(next(iter(task_sets.values())))
    mat = np.zeros((len(models), len(models)))
    for i, a in enumerate(models):
        for j, b in enumerate(models):
            wins = 0.0
            for t in tasks:
                ai, bi = auroc_by_model[a][t], auroc_by_model[b][t]
                wins += 1.0 if ai > bi else (0.5 if ai == bi else 0.0)
            mat[i, j] = wins / len(tasks)
    return models, mat


# ---------------------------------------------------------------------------
# Latent-space analyses
# ---------------------------------------------------------------------------

def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms == 0.0, 1.0, norms)


def similarity_vs_lag(per_bin_list: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Mean cosine similarity of same-week bin pairs, binned by lag.

    per_bin_list holds (outputs (2016, d), missing mask) per subject-week.
    Returns a length-2015 curve (lag 1..2015); lags with no valid pair are NaN.
    """
    sums = np.zeros(WEEK_BINS - 1)
    counts = np.zeros(WEEK_BINS - 1, dtype=np.int64)
    for outputs, missing in per_bin_list:
        ok = ~missing
        xn = _normalize_rows(np.asarray(outputs, dtype=np.float64))
        sim = xn @ xn.T
        valid = np.outer(ok, ok)
        for lag in range(1, WEEK_BINS):
            diag_v = np.diagonal(valid, offset=lag)
            if diag_v.any():
                sums[lag - 1] += np.diagonal(sim, offset=lag)[diag_v].sum()
                counts[lag - 1] += int(diag_v.sum())
    curve = np.full(WEEK_BINS - 1, np.nan)
    nz = counts > 0
    curve[nz] = sums[nz] / counts[nz]
    return curve


def lag_autocorrelation(curve: np.ndarray, lag: int = TOD_BINS) -> float:
    """Pearson correlation between the curve and its lag-shifted self."""
    a, b = curve[:-lag], curve[lag:]
    ok = np.isfinite(a) & np.isfinite(b)
    if ok.sum() < 3:
        raise MetricUndefined("too few finite lags for autocorrelation")
    a, b = a[ok], b[ok]
    sa, sb = a.std(), b.std()
    if sa == 0.0 or sb == 0.0:
        return 0.0
    return float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))


MONDAY_9AM_BINS = np.arange(108, 120)  # Monday 09:00-10:00, twelve 5-min bins


def reference_similarity(per_bin_list: list[tuple[np.ndarray, np.ndarray]],
                         reference_bins: np.ndarray = MONDAY_9AM_BINS) -> np.ndarray:
    """Mean cosine similarity of every weekly slot to the reference window.

    The reference is each week's mean over the (non-missing) reference bins;
    weeks whose reference window is entirely missing are skipped.
    """
    sums = np.zeros(WEEK_BINS)
    counts = np.zeros(WEEK_BINS, dtype=np.int64)
    for outputs, missing in per_bin_list:
        ok = ~missing
        ref_ok = ok[reference_bins]
        if not ref_ok.any():
            continue
        xn = _normalize_rows(np.asarray(outputs, dtype=np.float64))
        ref = xn[reference_bins][ref_ok].mean(axis=0)
        ref = ref / (np.linalg.norm(ref) or 1.0)
        sims = xn @ ref
        sums[ok] += sims[ok]
        counts[ok] += 1
    curve = np.full(WEEK_BINS, np.nan)
    nz = counts > 0
    curve[nz] = sums[nz] / counts[nz]
    return curve


def cosine_matrix(table: np.ndarray) -> np.ndarray:
    xn = _normalize_rows(np.asarray(table, dtype=np.float64))
    return xn @ xn.T


def gap_standardize(matrix: np.ndarray) -> np.ndarray:
    """Subtract from each entry the mean similarity over equal |i - j| gaps."""
    n = matrix.shape[0]
    out = matrix.copy()
    idx = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    for gap in range(n):
        mask = idx == gap
        if mask.any():
            out[mask] -= matrix[mask].mean()
    return out


def pe_similarity(dow_table: np.ndarray, tod_table: np.ndarray) -> dict:
    dow_raw = cosine_matrix(dow_table)
    tod_raw = cosine_matrix(tod_table)
    return {"dow_raw": dow_raw, "tod_raw": tod_raw,
            "dow_standardized": gap_standardize(dow_raw),
            "tod_standardized": gap_standardize(tod_raw)}
