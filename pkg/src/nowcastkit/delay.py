"""Onset-to-report delay distribution estimation.

Retrospective estimation is a windowed empirical lag distribution smoothed
by a moment-matched gamma fit.  Real-time estimation must additionally
undo right truncation: at nowcast date t, records with recent onsets are
visible only if they were already reported, so their lags are draws from
the delay distribution conditioned on being small.  The sequential
truncation adjustment below rebuilds the unconditional distribution from
brackets of progressively less-truncated data, working from the fully
observed tail downward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import DegenerateDistributionError, InsufficientDataError, ValidationError

DEFAULT_MAX_DELAY = 45  # reports assumed to land within this many days

_PROB_TOL = 1e-10


@dataclass
class DelayDistribution:
    """Discrete delay distribution on lags {1..d}.

    probs[k-1] is the probability of a k-day lag between symptom onset and
    case report.  Lag 0 is excluded by construction.
    """

    probs: np.ndarray
    t: int = 0  # reference day the estimate is pinned to

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if self.probs.ndim != 1 or len(self.probs) == 0:
            raise ValidationError("probs must be a nonempty 1-d vector")
        if np.any(self.probs < -_PROB_TOL):
            raise ValidationError("negative delay probability")
        if abs(self.probs.sum() - 1.0) > 1e-8:
            raise ValidationError(f"probs sum to {self.probs.sum()}, not 1")
        self.probs = np.clip(self.probs, 0.0, None)
        self.probs = self.probs / self.probs.sum()

    @property
    def d(self):
        return len(self.probs)

    def cdf(self, k):
        """P(lag <= k); cdf(0) == 0."""
        k = int(k)
        if k <= 0:
            return 0.0
        return float(self.probs[: min(k, self.d)].sum())

    def survival(self, k):
        """P(lag > k); survival(0) == 1."""
        return 1.0 - self.cdf(k)

    def cdf_vector(self):
        return np.cumsum(self.probs)

    def mean(self):
        return float(np.arange(1, self.d + 1) @ self.probs)

    def median(self):
        return int(np.searchsorted(np.cumsum(self.probs), 0.5) + 1)


@dataclass
class TruncatedSampleSet:
    """Datasets of lag draws with strictly increasing truncation limits.

    Dataset i holds draws from the delay distribution conditioned on the
    lag being at most z_i; the last dataset must be untruncated (z_N = d).
    Stored internally as per-dataset lag-count vectors over {1..d}.
    """

    counts: np.ndarray  # shape (N, d); counts[i, k-1] = draws of lag k in dataset i
    limits: np.ndarray  # shape (N,); z_i
    d: int

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.limits = np.asarray(self.limits, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[1] != self.d:
            raise ValidationError("counts must be (N, d)")
        if len(self.limits) != len(self.counts):
            raise ValidationError("one truncation limit per dataset")
        if np.any(np.diff(self.limits) <= 0):
            raise ValidationError("truncation limits must be strictly increasing")
        if self.limits[-1] != self.d:
            raise ValidationError("last dataset must be untruncated (z_N = d)")
        if self.limits[0] < 1:
            raise ValidationError("truncation limits must be >= 1")
        for i, z in enumerate(self.limits):
            if self.counts[i, z:].any():
                raise ValidationError(f"dataset {i} has draws above its limit {z}")

    @classmethod
    def from_samples(cls, datasets, d):
        """Build from (samples, z) pairs.

        Degenerate entries are tolerated: a limit below 1 defines no
        bracket and must be empty; datasets sharing a limit are merged.
        """
        cleaned = []  # [counts, z] pairs with strictly increasing z
        for samples, z in sorted(datasets, key=lambda p: p[1]):
            z = int(z)
            counts = _lag_counts(samples, d)
            if z < 1:
                if counts.any():
                    raise ValidationError(f"nonempty dataset with limit {z} < 1")
                continue
            if counts[z:].any():
                raise ValidationError(f"samples exceed truncation limit {z}")
            if cleaned and cleaned[-1][1] == z:
                cleaned[-1][0] += counts
            else:
                cleaned.append([counts, z])
        if not cleaned:
            raise InsufficientDataError("no usable truncated datasets")
        if cleaned[-1][1] != d:
            raise ValidationError("last dataset must have limit d")
        counts = np.stack([c for c, _ in cleaned])
        limits = np.array([z for _, z in cleaned], dtype=np.int64)
        return cls(counts, limits, d)


def _lag_counts(samples, d):
    samples = np.asarray(list(samples), dtype=np.int64)
    counts = np.zeros(d, dtype=np.int64)
    if len(samples):
        if samples.min() < 1 or samples.max() > d:
            raise ValidationError("lag samples must lie in [1, d]")
        counts = np.bincount(samples, minlength=d + 1)[1 : d + 1]
    return counts


def empirical_lag_dist(ll, t, d=DEFAULT_MAX_DELAY, w=None):
    """Windowed empirical lag distribution at day t.

    Uses records with onset in (t-w, t]; lags outside [1, d] are excluded
    from numerator and denominator.
    """
    if w is None:
        w = 2 * d
    onset = ll.onset
    lags = ll.lags
    in_window = (onset > t - w) & (onset <= t)
    lags = lags[in_window]
    lags = lags[(lags >= 1) & (lags <= d)]
    if len(lags) == 0:
        raise InsufficientDataError(
            f"no records with onset in ({t - w}, {t}] and lag in [1, {d}]"
        )
    counts = np.bincount(lags, minlength=d + 1)[1 : d + 1]
    return counts / counts.sum()


def gamma_mom_discretize(pbar, t=0):
    """Smooth an empirical lag vector by a moment-matched gamma fit.

    Fits shape/scale from the mean and variance of ``pbar``, assigns lag k
    the gamma mass on (k-1, k] with the upper tail folded into lag d, and
    renormalizes.
    """
    pbar = np.asarray(pbar, dtype=float)
    if np.any(pbar < 0) or pbar.sum() <= 0:
        raise ValidationError("pbar must be a nonnegative vector with positive mass")
    pbar = pbar / pbar.sum()
    d = len(pbar)
    lags = np.arange(1, d + 1, dtype=float)
    m = float(lags @ pbar)
    v = float(((lags - m) ** 2) @ pbar)
    if v <= 1e-12:
        raise DegenerateDistributionError(
            f"empirical lag distribution has zero variance (mean {m})"
        )
    shape = m * m / v
    scale = v / m
    grid = np.arange(0, d + 1, dtype=float)
    cdf = special.gammainc(shape, grid / scale)  # regularized lower incomplete gamma
    probs = np.diff(cdf)
    probs[-1] = 1.0 - cdf[d - 1]  # fold tail mass into the last lag
    probs = np.clip(probs, 0.0, None)
    probs = probs / probs.sum()
    return DelayDistribution(probs, t=t)


def km_adjust(ts):
    """Sequential-truncation adjustment of the empirical lag distribution.

    Works down from the untruncated top bracket: the probability of each
    lag bracket (z_{i-1}, z_i] is the empirical distribution of all data
    truncated at or above z_i, rescaled by the estimated probability mass
    at or below z_i.
    """
    d = ts.d
    limits = ts.limits
    counts = ts.counts
    n_datasets = len(limits)
    pbar = np.zeros(d)
    surv = 0.0  # running estimate of P(lag > z_i)
    for i in range(n_datasets - 1, -1, -1):
        z = int(limits[i])
        z_prev = int(limits[i - 1]) if i > 0 else 0
        pooled = counts[i:, :z].sum(axis=0)  # datasets j >= i, lags <= z_i
        total = pooled.sum()
        if total == 0:
            raise InsufficientDataError(
                f"no pooled data for bracket ({z_prev}, {z}] (datasets {i + 1}..{n_datasets})"
            )
        bracket = slice(z_prev, z)
        pbar[bracket] = pooled[bracket] / total * (1.0 - surv)
        surv += pbar[bracket].sum()
    total = pbar.sum()
    if not np.isfinite(total) or abs(total - 1.0) > 1e-8:
        raise InsufficientDataError(f"adjusted distribution sums to {total}")
    return pbar / total


def delay_realtime(ll, t, s, d=DEFAULT_MAX_DELAY, w=None):
    """Estimate the delay distribution for onset day s from data as of day t.

    ``ll`` must already be restricted to records reported before t.  Onsets
    older than t-d are unaffected by truncation and fall back to the
    retrospective estimator; more recent onsets are handled by bracketing
    each onset day at its maximal observable lag and applying the
    sequential-truncation adjustment before gamma smoothing.
    """
    if w is None:
        w = 2 * d
    if len(ll) and int(ll.report.max()) >= t:
        raise ValidationError("line list contains records reported at or after t")
    if s >= t:
        raise ValidationError(f"onset day s={s} must precede nowcast day t={t}")
    if s < t - d:
        pbar = empirical_lag_dist(ll, s, d=d, w=w)
        return gamma_mom_discretize(pbar, t=s)

    onset = ll.onset
    lags = ll.lags
    n_brackets = d - (t - s) + 2
    datasets = []
    for i in range(1, n_brackets):
        a = s - i + 1
        z = t - s + i - 2
        if z < 1:
            continue  # unobservable onset day: every lag would exceed its cap
        sel = lags[(onset == a) & (lags >= 1) & (lags <= z)]
        datasets.append((sel, z))
    tail_sel = (onset > s - w) & (onset < t - d) & (lags >= 1) & (lags <= d)
    tail = lags[tail_sel]
    if len(tail) == 0:
        raise InsufficientDataError(
            f"no untruncated records with onset in ({s - w}, {t - d}) as of t={t}; "
            f"tail of the delay distribution is unidentifiable (s={s})"
        )
    datasets.append((tail, d))
    try:
        ts = TruncatedSampleSet.from_samples(datasets, d)
        pbar = km_adjust(ts)
    except InsufficientDataError as e:
        raise InsufficientDataError(f"delay estimation failed at (t={t}, s={s}): {e}") from e
    return gamma_mom_discretize(pbar, t=s)


@dataclass
class DelayOracle:
    """Caching front end for delay estimation over a line-list archive.

    Estimates are cached per (as-of day, onset day); retrospective
    estimates depend only on the onset day and are shared across as-of
    days, since all their records are fully reported.
    """

    linelist: "LineList"
    d: int = DEFAULT_MAX_DELAY
    w: int | None = None
    _retro: dict = field(default_factory=dict)
    _realtime: dict = field(default_factory=dict)
    _visible: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.w is None:
            self.w = 2 * self.d

    def _list_as_of(self, t):
        if t not in self._visible:
            self._visible[t] = self.linelist.as_of(t)
        return self._visible[t]

    def at(self, t, s):
        """Delay distribution for onset day s using data as of day t."""
        if s < t - self.d:
            if s not in self._retro:
                pbar = empirical_lag_dist(self._list_as_of(s + self.d + 1), s, d=self.d, w=self.w)
                self._retro[s] = gamma_mom_discretize(pbar, t=s)
            return self._retro[s]
        key = (t, s)
        if key not in self._realtime:
            self._realtime[key] = delay_realtime(self._list_as_of(t), t, s, d=self.d, w=self.w)
        return self._realtime[key]
