"""Agreement statistics between predicted and reference cellularity scores."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

BIN_EDGES = (0.25, 0.5, 0.75)
DEFAULT_N_BOOT = 2000


@dataclass(frozen=True)
class ScorePairSet:
    predicted: np.ndarray
    reference: np.ndarray
    ids: tuple | None = None

    def __post_init__(self):
        p = np.asarray(self.predicted, dtype=np.float64).ravel()
        r = np.asarray(self.reference, dtype=np.float64).ravel()
        if p.shape != r.shape:
            raise ValueError(f"{p.size} predictions vs {r.size} references")
        for name, arr in (("predicted", p), ("reference", r)):
            if not np.all((arr >= 0.0) & (arr <= 1.0)):
                raise ValueError(f"{name} scores must lie in [0, 1]")
        if self.ids is not None and len(self.ids) != p.size:
            raise ValueError("ids length does not match the number of pairs")
        object.__setattr__(self, "predicted", p)
        object.__setattr__(self, "reference", r)
        if self.ids is not None:
            object.__setattr__(self, "ids", tuple(self.ids))

    def __len__(self) -> int:
        return self.predicted.size

    def take(self, index) -> "ScorePairSet":
        return ScorePairSet(self.predicted[index], self.reference[index])


def _require(s: ScorePairSet, n: int = 1) -> None:
    if len(s) < n:
        raise ValueError(f"need at least {n} score pair(s), got {len(s)}")


def mse(s: ScorePairSet) -> float:
    _require(s)
    d = s.predicted - s.reference
    return math.fsum((d * d).tolist()) / len(s)


def bin4(score: float) -> int:
    """Cellularity category 1..4 with right-closed bins: [0, .25], (.25, .5], (.5, .75], (.75, 1]."""
    score = float(score)
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"score {score} outside [0, 1]")
    return 1 + sum(score > e for e in BIN_EDGES)


def bin4_array(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all((scores >= 0.0) & (scores <= 1.0)):
        raise ValueError("scores must lie in [0, 1]")
    return 1 + np.searchsorted(np.array(BIN_EDGES), scores, side="left")


def cohens_kappa(a, b) -> float:
    """Cohen's kappa of two equally long label sequences.

    Returns 1.0 when chance agreement is already certain (both raters use a
    single, identical category).
    """
    a, b = list(a), list(b)
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    n = len(a)
    if n < 2:
        raise ValueError("kappa needs at least 2 rated items")
    agree = sum(1 for x, y in zip(a, b) if x == y)
    ca, cb = Counter(a), Counter(b)
    chance = sum(ca[k] * cb[k] for k in ca)  # n**2 * p_e, exact in integers
    if chance == n * n:
        return 1.0
    return (n * agree - chance) / (n * n - chance)


def kappa4(s: ScorePairSet) -> float:
    return cohens_kappa(bin4_array(s.predicted).tolist(), bin4_array(s.reference).tolist())


def icc21(ratings) -> float:
    """ICC(2,1) of an ``(n_items, n_raters)`` rating matrix.

    Two-way random effects, absolute agreement, single rater:
    ``(MSR - MSE) / (MSR + (k-1) MSE + k (MSC - MSE) / n)``.
    """
    x = np.asarray(ratings, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ValueError(f"need an (n_items, n_raters>=2) matrix, got shape {x.shape}")
    n, k = x.shape
    if n < 3:
        raise ValueError(f"ICC needs at least 3 items, got {n}")
    if np.ptp(x) == 0.0:
        return 1.0
    row_means = x.mean(axis=1)
    col_means = x.mean(axis=0)
    grand = col_means.mean()
    # residuals are formed directly (not by subtraction of sums of squares) so
    # that identical raters give exactly zero error and column variance
    resid = (x - row_means[:, None]) - (col_means - grand)[None, :]
    ss_rows = k * float(((row_means - grand) ** 2).sum())
    ss_cols = n * float(((col_means - grand) ** 2).sum())
    ss_err = float((resid ** 2).sum())
    if ss_err == 0.0 and ss_cols == 0.0:
        return 1.0  # perfect absolute agreement, even if row variance underflows
    ms_rows = ss_rows / (n - 1)
    ms_cols = ss_cols / (k - 1)
    ms_err = ss_err / ((n - 1) * (k - 1))
    denom = ms_rows + (k - 1) * ms_err + k * (ms_cols - ms_err) / n
    if denom <= 0.0:
        raise ValueError("ICC undefined: degenerate variance components")
    return (ms_rows - ms_err) / denom


def icc(s: ScorePairSet) -> float:
    _require(s, 3)
    return icc21(np.column_stack([s.predicted, s.reference]))


def bootstrap_ci(metric, s: ScorePairSet, n_boot: int = DEFAULT_N_BOOT, seed: int = 0,
                 level: float = 0.95) -> tuple:
    """Percentile bootstrap interval of ``metric`` over resampled pairs.

    Resamples on which the metric is undefined (raises ``ValueError`` or
    returns a non-finite value) are redrawn, up to ``10 * n_boot`` draws.
    """
    _require(s)
    if n_boot < 100:
        raise ValueError(f"n_boot must be >= 100, got {n_boot}")
    rng = np.random.default_rng(seed)
    n = len(s)
    stats = []
    draws = 0
    while len(stats) < n_boot:
        if draws >= 10 * n_boot:
            raise RuntimeError(f"metric undefined on too many resamples ({draws} draws)")
        draws += 1
        idx = rng.integers(0, n, size=n)
        try:
            value = metric(s.take(idx))
        except ValueError:
            continue
        if math.isfinite(value):
            stats.append(value)
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(np.asarray(stats), [tail, 1.0 - tail])
    return float(lo), float(hi)


METRICS = {"mse": mse, "kappa4": kappa4, "icc21": icc}


def evaluation_report(s: ScorePairSet, n_boot: int = DEFAULT_N_BOOT, seed: int = 0) -> dict:
    """Point estimates and 95% percentile intervals of every metric.

    Each metric's bootstrap uses its own generator derived from ``seed``.
    """
    report = {"n": len(s)}
    children = np.random.SeedSequence(seed).spawn(len(METRICS))
    for (name, fn), child in zip(METRICS.items(), children):
        lo, hi = bootstrap_ci(fn, s, n_boot, int(child.generate_state(1)[0]))
        report[name] = {"point": fn(s), "ci95": [lo, hi]}
    return report
