"""Calibration and selective-generation metrics over scored predictions.

The unit of account is a `ScoredPair`: a confidence in (0, 1] plus a
correctness flag.  Sequence-level pairs treat a prediction as correct only
on exact token match with the reference; token-level pairs compare
positionally up to the shorter length and report how many hypothesis
positions that skips.

Expected calibration error partitions (0, 1] into K equal bins
((k-1)/K, k/K] and sums |confidence - accuracy| gaps weighted by bin mass.
Bin membership is decided by direct comparison against the k/K boundary
values so that independent implementations agree on boundary cases.

Uncertainty-vs-quality agreement is summarized three ways: Spearman rank
correlation (average ranks on ties, undefined on zero rank variance),
ROC-AUC for separating good from bad outputs at a quality threshold
(Mann-Whitney form, ties count one half), and abstention curves that drop
the most uncertain fraction of records and track mean quality of the rest.
Means over retained qualities use math.fsum, so their value does not
depend on summation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigurationError,
    MetricError,
    UndefinedCorrelationError,
)

QUALITY_KEYS = ("rouge1", "rouge2", "rougeL")


@dataclass(frozen=True)
class ScoredPair:
    confidence: float
    correct: bool


@dataclass(frozen=True)
class EceConfig:
    """Bin count for expected calibration error plus the reporting level.

    `level` only labels report rows; the caller chooses which pairs to
    feed (sequence_pairs or token_pairs output).
    """

    bins: int = 15
    level: str = "sequence"

    def __post_init__(self):
        if self.bins < 1:
            raise ConfigurationError(f"ece bins must be >= 1, got {self.bins}")
        if self.level not in ("sequence", "token"):
            raise ConfigurationError(
                f"ece level must be 'sequence' or 'token', got {self.level!r}"
            )


@dataclass(frozen=True)
class RocConfig:
    """Per-metric quality thresholds separating good from bad outputs."""

    thresholds: dict = field(
        default_factory=lambda: {"rouge1": 40.0, "rouge2": 15.0, "rougeL": 30.0}
    )

    def __post_init__(self):
        for key, theta in self.thresholds.items():
            if key not in QUALITY_KEYS:
                raise ConfigurationError(f"unknown quality metric {key!r} in roc thresholds")
            if not 0.0 <= float(theta) <= 100.0:
                raise ConfigurationError(
                    f"roc threshold for {key} must lie in [0, 100], got {theta}"
                )


@dataclass(frozen=True)
class AbstentionCurve:
    alphas: tuple[float, ...]
    values: tuple[float, ...]


@dataclass(frozen=True)
class TokenPairResult:
    pairs: tuple[ScoredPair, ...]
    positions_total: int
    positions_used: int

    @property
    def coverage(self) -> float:
        if self.positions_total == 0:
            return 0.0
        return self.positions_used / self.positions_total


@dataclass(frozen=True)
class BootstrapResult:
    rho: float
    std: float
    resamples_used: int
    resamples_failed: int


def _check_pairs(pairs):
    pairs = list(pairs)
    if not pairs:
        raise MetricError("ece needs at least one scored pair")
    for p in pairs:
        if not (0.0 < p.confidence <= 1.0):
            raise MetricError(
                f"pair confidence {p.confidence} outside the half-open interval (0, 1]"
            )
    return pairs


def ece(pairs, config: EceConfig) -> float:
    """Expected calibration error over equal-width bins ((k-1)/K, k/K]."""
    pairs = _check_pairs(pairs)
    k = config.bins
    conf = np.array([p.confidence for p in pairs], dtype=float)
    corr = np.array([1.0 if p.correct else 0.0 for p in pairs])
    bounds = np.arange(1, k + 1) / k
    # side='left' puts p in the first bin whose upper edge satisfies p <= k/K,
    # using the same float comparisons a scan over the edges would use.
    idx = np.searchsorted(bounds, conf, side="left")
    counts = np.bincount(idx, minlength=k)
    conf_sums = np.bincount(idx, weights=conf, minlength=k)
    corr_sums = np.bincount(idx, weights=corr, minlength=k)
    n = len(pairs)
    total = 0.0
    for b in range(k):
        if counts[b] == 0:
            continue
        gap = abs(conf_sums[b] / counts[b] - corr_sums[b] / counts[b])
        total += counts[b] / n * gap
    return float(total)


def sequence_pairs(records) -> list[ScoredPair]:
    """One pair per prediction: joint confidence and exact-match correctness.

    Confidence is exp of the summed per-token log-probabilities; hypotheses
    and references are stored without terminal eos, so plain tuple equality
    is the eos-stripped exact match.
    """
    out = []
    for rec in records:
        conf = math.exp(math.fsum(rec.token_logp))
        out.append(ScoredPair(confidence=conf, correct=tuple(rec.hypothesis) == tuple(rec.reference)))
    return out


def token_pairs(records) -> TokenPairResult:
    """Positional token pairs up to min(|hyp|, |ref|), with coverage stats."""
    pairs = []
    total = 0
    used = 0
    for rec in records:
        hyp = tuple(rec.hypothesis)
        ref = tuple(rec.reference)
        total += len(hyp)
        limit = min(len(hyp), len(ref))
        used += limit
        for t in range(limit):
            pairs.append(
                ScoredPair(
                    confidence=math.exp(rec.token_logp[t]),
                    correct=hyp[t] == ref[t],
                )
            )
    return TokenPairResult(pairs=tuple(pairs), positions_total=total, positions_used=used)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties getting the average rank of their run."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=float)
    i = 0
    n = len(values)
    while i < n:
        j = i
        while j + 1 < n and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        ranks[order[i : j + 1]] = avg
        i = j + 1
    return ranks


def spearman(u, q) -> float:
    """Spearman rank correlation with average ranks on ties.

    Raises UndefinedCorrelationError when either side has zero rank
    variance (all values tied), and on length mismatch or n < 2.
    """
    u = np.asarray(u, dtype=float)
    q = np.asarray(q, dtype=float)
    if u.shape != q.shape or u.ndim != 1:
        raise MetricError(f"spearman needs two equal-length vectors, got {u.shape} and {q.shape}")
    if len(u) < 2:
        raise UndefinedCorrelationError(f"spearman needs n >= 2, got n={len(u)}")
    ru = _average_ranks(u)
    rq = _average_ranks(q)
    ru_c = ru - ru.mean()
    rq_c = rq - rq.mean()
    var_u = float(np.dot(ru_c, ru_c))
    var_q = float(np.dot(rq_c, rq_c))
    if var_u == 0.0 or var_q == 0.0:
        side = "first" if var_u == 0.0 else "second"
        raise UndefinedCorrelationError(
            f"rank correlation undefined: {side} argument has zero rank variance"
        )
    return float(np.dot(ru_c, rq_c) / math.sqrt(var_u * var_q))


def bootstrap_std(u, q, n_resamples: int, seed: int) -> BootstrapResult:
    """Full-sample Spearman rho plus its bootstrap standard deviation.

    Resamples records with replacement; resamples on which the correlation
    is undefined are skipped and counted, never silently zeroed.  The std
    is the ddof=1 standard deviation over successful resamples.
    """
    from .rng import stream

    if n_resamples < 2:
        raise ConfigurationError(f"bootstrap needs >= 2 resamples, got {n_resamples}")
    u = np.asarray(u, dtype=float)
    q = np.asarray(q, dtype=float)
    rho = spearman(u, q)  # propagate undefined-correlation errors directly
    rng = stream(seed, "bootstrap")
    n = len(u)
    idx = rng.integers(0, n, size=(n_resamples, n))
    values = []
    failed = 0
    for row in idx:
        try:
            values.append(spearman(u[row], q[row]))
        except UndefinedCorrelationError:
            failed += 1
    if len(values) < 2:
        raise MetricError(
            f"bootstrap produced {len(values)} usable resamples "
            f"({failed} failed); cannot estimate a standard deviation"
        )
    std = float(np.std(np.asarray(values), ddof=1))
    return BootstrapResult(
        rho=rho, std=std, resamples_used=len(values), resamples_failed=failed
    )


def roc_auc(u, quality, theta: float) -> float:
    """AUC for `u` separating good (quality > theta) from bad outputs.

    Mann-Whitney form over average ranks, so tied u values contribute one
    half.  Raises MetricError naming the class counts when either class is
    empty.
    """
    u = np.asarray(u, dtype=float)
    quality = np.asarray(quality, dtype=float)
    if u.shape != quality.shape or u.ndim != 1:
        raise MetricError(
            f"roc_auc needs two equal-length vectors, got {u.shape} and {quality.shape}"
        )
    good = quality > theta
    n_good = int(good.sum())
    n_bad = len(u) - n_good
    if n_good == 0 or n_bad == 0:
        raise MetricError(
            f"roc_auc requires both classes at theta={theta}: "
            f"{n_good} good, {n_bad} bad"
        )
    ranks = _average_ranks(u)
    r_good = float(ranks[good].sum())
    return (r_good - n_good * (n_good + 1) / 2.0) / (n_good * n_bad)


def abstention_curve(records, quality_key: str, alphas) -> AbstentionCurve:
    """Mean retained quality after dropping the most uncertain records.

    Records are ordered by uncertainty ascending (lowest u = most
    uncertain), ties broken by record id; at each alpha the floor(alpha*n)
    lowest-u records are removed.  Alphas must be sorted ascending and lie
    in [0, 1).
    """
    records = list(records)
    if not records:
        raise MetricError("abstention curve needs at least one record")
    if quality_key not in QUALITY_KEYS:
        raise ConfigurationError(f"unknown quality metric {quality_key!r}")
    alphas = tuple(float(a) for a in alphas)
    if not alphas:
        raise ConfigurationError("abstention needs at least one alpha")
    for a in alphas:
        if not 0.0 <= a < 1.0:
            raise ConfigurationError(f"abstention alpha must lie in [0, 1), got {a}")
    if list(alphas) != sorted(alphas):
        raise ConfigurationError("abstention alphas must be sorted ascending")
    ordered = sorted(records, key=lambda r: (r.uncertainty, r.id))
    qualities = [r.quality[quality_key] for r in ordered]
    n = len(qualities)
    values = []
    for a in alphas:
        drop = int(math.floor(a * n))
        kept = qualities[drop:]
        values.append(math.fsum(kept) / len(kept))
    return AbstentionCurve(alphas=alphas, values=tuple(values))


def _fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def _write_csv(path, header: str, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header)
        fh.write("\n")
        for row in rows:
            fh.write(",".join(str(c) for c in row))
            fh.write("\n")


def write_ece_csv(rows, path) -> None:
    """Rows of (method, level, K, ece)."""
    _write_csv(
        path,
        "method,level,K,ece",
        ((m, lvl, k, _fmt_float(e)) for m, lvl, k, e in rows),
    )


def write_corr_csv(rows, path) -> None:
    """Rows of (method, metric, rho, boot_std, B, seed)."""
    _write_csv(
        path,
        "method,metric,rho,boot_std,B,seed",
        ((m, met, _fmt_float(r), _fmt_float(s), b, seed) for m, met, r, s, b, seed in rows),
    )


def write_roc_csv(rows, path) -> None:
    """Rows of (method, metric, theta, auc)."""
    _write_csv(
        path,
        "method,metric,theta,auc",
        ((m, met, _fmt_float(t), _fmt_float(a)) for m, met, t, a in rows),
    )


def write_abstention_csv(rows, path) -> None:
    """Rows of (method, metric, alpha, mean_quality)."""
    _write_csv(
        path,
        "method,metric,alpha,mean_quality",
        ((m, met, _fmt_float(a), _fmt_float(v)) for m, met, a, v in rows),
    )
