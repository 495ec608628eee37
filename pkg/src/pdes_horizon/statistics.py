"""Per-step and ensemble statistics of the virtual time horizon."""

from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np

from .errors import ConfigError, InsufficientDataError
from .horizon import SimConfig

# column order of per-step statistic rows, shared with the trial kernel
FIELDS = (
    "u",
    "w2",
    "w",
    "wa",
    "mean_tau",
    "min_tau",
    "max_tau",
    "max_above",
    "max_below",
    "f_S",
    "f_F",
    "w2_S",
    "w2_F",
    "wa_S",
    "wa_F",
)
INDEX = {name: i for i, name in enumerate(FIELDS)}
N_FIELDS = len(FIELDS)

MIN_STEADY_STEPS = 100
STEADY_FRACTION = 0.25
STEADY_DRIFT_TOL = 0.05
STEADY_SLOPE_TOL = 1e-3


@dataclass(frozen=True)
class StepStats:
    t: int
    u: float
    w2: float
    w_a: float
    mean_tau: float
    min_tau: float
    max_tau: float
    max_above: float
    max_below: float


@dataclass(frozen=True)
class GroupDecomposition:
    f_S: float
    f_F: float
    w2_S: float
    w2_F: float
    wa_S: float
    wa_F: float


def _centred(tau):
    """Deviations from the mean, accumulated relative to ``tau[0]``.

    Working relative to one of the values keeps the sums small when all
    times share a large offset, and makes equal times give exactly zero.
    """
    ref = tau[0]
    d = tau - ref
    m = d.sum() / tau.shape[0]
    return ref, m, d - m


def step_stats(horizon, outcome=None):
    """Utilization, widths and extremes of one horizon snapshot.

    ``u`` is NaN when no ``outcome`` is given (e.g. the initial horizon).
    """
    tau = np.asarray(horizon.tau, dtype=float)
    L = tau.shape[0]
    if outcome is None:
        u = float("nan")
    else:
        if outcome.updated.shape[0] != L:
            raise ConfigError("outcome length does not match horizon")
        u = np.count_nonzero(outcome.updated) / L
    ref, m, dev = _centred(tau)
    lo, hi = float(tau.min()), float(tau.max())
    return StepStats(
        t=horizon.t,
        u=u,
        w2=float(np.dot(dev, dev) / L),
        w_a=float(np.abs(dev).sum() / L),
        mean_tau=float(ref + m),
        min_tau=lo,
        max_tau=hi,
        max_above=max(float((hi - ref) - m), 0.0),
        max_below=max(float(m - (lo - ref)), 0.0),
    )


def slow_fast_decompose(horizon):
    """Split the PEs into slow (tau <= mean) and fast (tau > mean) groups.

    Group widths are measured from the global mean, so that
    ``f_S*w2_S + f_F*w2_F == w2`` and likewise for the absolute width.
    An empty group contributes zero.
    """
    tau = np.asarray(horizon.tau, dtype=float)
    L = tau.shape[0]
    _, _, dev = _centred(tau)
    slow = dev <= 0.0
    n_s = int(np.count_nonzero(slow))
    n_f = L - n_s

    def widths(mask, n):
        if n == 0:
            return 0.0, 0.0
        d = dev[mask]
        return float(np.dot(d, d) / n), float(np.abs(d).sum() / n)

    w2_s, wa_s = widths(slow, n_s)
    w2_f, wa_f = widths(~slow, n_f)
    return GroupDecomposition(n_s / L, n_f / L, w2_s, w2_f, wa_s, wa_f)


@numba.njit(cache=True)
def fill_row(tau, n_up, row):
    """Kernel counterpart of step_stats + slow_fast_decompose, in FIELDS order."""
    L = tau.shape[0]
    ref = tau[0]
    total = 0.0
    lo = tau[0]
    hi = tau[0]
    for k in range(L):
        x = tau[k]
        total += x - ref
        if x < lo:
            lo = x
        if x > hi:
            hi = x
    m = total / L
    sq_s = 0.0
    sq_f = 0.0
    ab_s = 0.0
    ab_f = 0.0
    n_s = 0
    for k in range(L):
        d = (tau[k] - ref) - m
        slow = d <= 0.0
        d2 = d * d
        n_s += slow
        sq_s += d2 * slow
        sq_f += d2 * (not slow)
        ab_s -= d * slow
        ab_f += d * (not slow)
    n_f = L - n_s
    w2 = (sq_s + sq_f) / L
    row[0] = n_up / L
    row[1] = w2
    row[2] = np.sqrt(w2)
    row[3] = (ab_s + ab_f) / L
    row[4] = ref + m
    row[5] = lo
    row[6] = hi
    row[7] = max((hi - ref) - m, 0.0)
    row[8] = max(m - (lo - ref), 0.0)
    row[9] = n_s / L
    row[10] = n_f / L
    row[11] = sq_s / n_s if n_s > 0 else 0.0
    row[12] = sq_f / n_f if n_f > 0 else 0.0
    row[13] = ab_s / n_s if n_s > 0 else 0.0
    row[14] = ab_f / n_f if n_f > 0 else 0.0


@dataclass
class SteadyState:
    mean: float
    stderr: float
    window: tuple
    saturated: bool
    drift: float = 0.0
    drift_stderr: float = float("nan")


@dataclass
class EnsembleSeries:
    """Per-step ensemble mean and standard error of every statistic.

    ``mean`` and ``stderr`` have shape ``(steps, len(FIELDS))``; row ``i``
    describes step ``t[i]``. ``tail_mean``/``tail_stderr`` summarise per-trial
    time averages over steps ``t >= tail_start``, which gives honest error bars
    for steady-state values despite time correlations within a trial.
    ``drift_mean``/``drift_stderr`` do the same for twice the difference
    between the second-half and first-half averages of that window.
    """

    config: SimConfig
    n_trials: int
    t: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    tail_start: int
    tail_mean: Optional[np.ndarray] = None
    tail_stderr: Optional[np.ndarray] = None
    drift_mean: Optional[np.ndarray] = None
    drift_stderr: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return self.t.shape[0]

    def get(self, name):
        return self.mean[:, INDEX[name]]

    def err(self, name):
        return self.stderr[:, INDEX[name]]


def default_tail_start(steps, burn_in=0):
    """First step of the steady-state window: the trailing quarter, never
    earlier than the burn-in."""
    return max(steps - int(steps * STEADY_FRACTION) + 1, int(burn_in) + 1, 1)


def tail_midpoint(steps, tail_start):
    """First step of the second half of the window ``[tail_start, steps]``."""
    return tail_start + (steps - tail_start + 1) // 2


def tail_averages(rows, tail_start):
    """Window average and the averages of its two halves, shape ``(3, fields)``."""
    steps = rows.shape[0]
    mid = tail_midpoint(steps, tail_start)
    out = np.full((3, rows.shape[1]), np.nan)
    for h, (a, b) in enumerate(((tail_start, steps), (tail_start, mid - 1), (mid, steps))):
        if b >= a:
            out[h] = _offset_mean(rows[a - 1 : b])
    return out


def _offset_mean(x):
    """Column means taken about the first row; exact for constant columns."""
    return x[0] + (x - x[0]).mean(axis=0)


class Accumulator:
    """Streaming per-step mean/variance over trials (Welford updates).

    Trials must be added in a fixed order for bit-stable results.
    """

    def __init__(self, steps, tail_start):
        self.n = 0
        self.steps = steps
        self.tail_start = tail_start
        self._mean = np.zeros((steps, N_FIELDS))
        self._m2 = np.zeros((steps, N_FIELDS))
        self._tails = []

    def add(self, rows, tails=None):
        """Add one trial; ``tails`` are its window and half-window averages."""
        if rows.shape != self._mean.shape:
            raise ConfigError(
                f"trial has shape {rows.shape}, expected {self._mean.shape}"
            )
        self.n += 1
        delta = rows - self._mean
        self._mean += delta / self.n
        self._m2 += delta * (rows - self._mean)
        if tails is None:
            tails = tail_averages(rows, self.tail_start)
        self._tails.append(np.asarray(tails, dtype=float))

    def result(self, config):
        n = self.n
        if n == 0:
            raise ConfigError("no trials accumulated")
        tails = np.array(self._tails)
        drift = 2.0 * (tails[:, 2] - tails[:, 1])
        if n > 1:
            stderr = np.sqrt(np.maximum(self._m2, 0.0) / (n - 1) / n)
            tail_stderr = tails[:, 0].std(axis=0, ddof=1) / np.sqrt(n)
            drift_stderr = drift.std(axis=0, ddof=1) / np.sqrt(n)
        else:
            stderr = np.full_like(self._mean, np.nan)
            tail_stderr = np.full(N_FIELDS, np.nan)
            drift_stderr = np.full(N_FIELDS, np.nan)
        return EnsembleSeries(
            config=config,
            n_trials=n,
            t=np.arange(1, self.steps + 1),
            mean=self._mean.copy(),
            stderr=stderr,
            tail_start=self.tail_start,
            tail_mean=_offset_mean(tails[:, 0]),
            tail_stderr=tail_stderr,
            drift_mean=drift.mean(axis=0),
            drift_stderr=drift_stderr,
        )


def aggregate(trials, config=None, tail_start=None):
    """Ensemble mean and standard error over per-trial stat arrays.

    ``trials`` is a sequence of arrays of shape ``(steps, len(FIELDS))``, or of
    lists of ``(StepStats, GroupDecomposition)`` pairs. ``config`` may be a
    single SimConfig or one per trial; they must agree apart from the seed.
    """
    trials = list(trials)
    if len(trials) < 2:
        raise ConfigError("aggregate needs at least two trials")
    if isinstance(config, (list, tuple)):
        if len(config) != len(trials):
            raise ConfigError("one config per trial required")
        unseeded = {c.with_seed(0) for c in config}
        if len(unseeded) != 1:
            raise ConfigError("trials have mismatched configurations")
        config = unseeded.pop()
    elif config is not None:
        config = config.with_seed(0)
    arrays = [_as_rows(tr) for tr in trials]
    steps = arrays[0].shape[0]
    if any(a.shape != arrays[0].shape for a in arrays):
        raise ConfigError("trials have mismatched lengths")
    if tail_start is None:
        tail_start = default_tail_start(steps)
    acc = Accumulator(steps, tail_start)
    for a in arrays:
        acc.add(a)
    return acc.result(config)


def _as_rows(trial):
    if isinstance(trial, np.ndarray):
        return np.asarray(trial, dtype=float)
    rows = np.empty((len(trial), N_FIELDS))
    for i, (s, g) in enumerate(trial):
        rows[i] = (
            s.u, s.w2, np.sqrt(s.w2), s.w_a, s.mean_tau, s.min_tau, s.max_tau,
            s.max_above, s.max_below, g.f_S, g.f_F, g.w2_S, g.w2_F, g.wa_S, g.wa_F,
        )
    return rows


def steady_state_mean(series, name, slope_tol=STEADY_SLOPE_TOL,
                      drift_tol=STEADY_DRIFT_TOL, nsigma=3.0):
    """Plateau value of one statistic.

    The window is the series' tail (trailing 25% of steps by default). Two
    tests must pass. The regression slope over the window, divided by the
    window mean, must stay below ``slope_tol`` per step. The drift across the
    window (twice the difference between its second-half and first-half
    averages, per trial when available) must be at most ``drift_tol`` of the
    mean or else not significant at ``nsigma`` standard errors. On failure
    the tail mean is still returned, with ``saturated=False``.
    """
    T = len(series)
    if T < MIN_STEADY_STEPS:
        raise InsufficientDataError(
            f"steady state needs at least {MIN_STEADY_STEPS} steps, series has {T}"
        )
    i0 = int(np.searchsorted(series.t, series.tail_start))
    if T - i0 < 2:
        raise InsufficientDataError("steady-state window holds fewer than two steps")
    t = series.t[i0:]
    y = series.get(name)[i0:]
    j = INDEX[name]
    mean = float(y[0] + (y - y[0]).mean())
    if series.tail_mean is not None and np.isfinite(series.tail_mean[j]):
        mean = float(series.tail_mean[j])
    drift_se = float("nan")
    if series.drift_mean is not None and np.isfinite(series.drift_mean[j]):
        drift = float(series.drift_mean[j])
        drift_se = float(series.drift_stderr[j])
    else:
        mid = np.searchsorted(t, tail_midpoint(int(t[-1]), int(t[0])))
        drift = 2.0 * float(y[mid:].mean() - y[:mid].mean())
    slope = np.polyfit(t - t.mean(), y, 1)[0] if np.ptp(y) > 0 else 0.0
    flat = abs(slope) <= slope_tol * abs(mean)
    settled = abs(drift) <= drift_tol * abs(mean) or (
        np.isfinite(drift_se) and abs(drift) <= nsigma * drift_se
    )
    saturated = flat and settled
    if series.tail_stderr is not None and np.isfinite(series.tail_stderr[j]):
        stderr = float(series.tail_stderr[j])
    else:
        stderr = float(np.mean(series.err(name)[i0:]))
    return SteadyState(mean, stderr, (int(t[0]), int(t[-1])), bool(saturated), drift, drift_se)


def progress_rate(series):
    """Average advance of the global virtual time per step over the tail window."""
    i0 = int(np.searchsorted(series.t, series.tail_start))
    t = series.t[i0:].astype(float)
    g = series.get("min_tau")[i0:]
    if t.shape[0] < 2:
        raise InsufficientDataError("tail window too short for a progress rate")
    return float(np.polyfit(t, g, 1)[0])
