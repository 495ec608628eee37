"""Fast trial execution: fused sweep + statistics + wait-episode counters."""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

from . import rng
from .horizon import init_horizon, kernel_args, sweep
from .statistics import N_FIELDS, Accumulator, default_tail_start, fill_row, tail_midpoint

# layout of the raw counter vector
N_OK, N_W, N_DELTA, WAIT_W, WAIT_DELTA = range(5)
N_COUNTERS = 5


@numba.njit(cache=True)
def _run(tau, sites, k0, k1, t0, steps, n_v, conservative, windowed, delta, redraw,
         count_from, tail_start, mid, rows, tail, counters, instrument):
    L = tau.shape[0]
    tau = tau.copy()
    new = np.empty(L)
    reason = np.empty(L, dtype=np.int8)
    no_sites = np.empty(0, dtype=np.int8)
    ep_reason = np.zeros(L, dtype=np.int8)
    ep_len = np.zeros(L, dtype=np.int64)
    n_tail = np.zeros(3, dtype=np.int64)
    ref = np.zeros(rows.shape[1])
    for i in range(steps):
        t = t0 + i
        n_up = sweep(tau, new, sites, reason, no_sites, k0, k1, t, n_v, conservative,
                     windowed, delta, redraw)
        counting = t + 1 > count_from
        for k in range(L if instrument else 0):
            r = reason[k]
            if r == 0:
                er = ep_reason[k]
                if counting:
                    if er == 0:
                        counters[0] += 1
                    elif er == 1:
                        counters[1] += 1
                        counters[3] += ep_len[k]
                    else:
                        counters[2] += 1
                        counters[4] += ep_len[k]
                ep_reason[k] = 0
                ep_len[k] = 0
            else:
                if ep_reason[k] == 0:
                    ep_reason[k] = r
                ep_len[k] += 1
        tau, new = new, tau
        fill_row(tau, n_up, rows[i])
        if t + 1 >= tail_start:
            if n_tail[0] == 0:
                ref[:] = rows[i]
            half = 1 if t + 1 < mid else 2
            for j in range(rows.shape[1]):
                d = rows[i, j] - ref[j]
                tail[0, j] += d
                tail[half, j] += d
            n_tail[0] += 1
            n_tail[half] += 1
    # sums are taken about the first tail row, so a constant field averages exactly
    for h in range(3):
        if n_tail[h] > 0:
            for j in range(tail.shape[1]):
                tail[h, j] = ref[j] + tail[h, j] / n_tail[h]
    return tau


@numba.njit(cache=True)
def _record(tau, sites, k0, k1, t0, steps, n_v, conservative, windowed, delta, redraw,
            hist, used, reasons):
    hist[0] = tau
    for i in range(steps):
        sweep(hist[i], hist[i + 1], sites, reasons[i], used[i], k0, k1, t0 + i,
              n_v, conservative, windowed, delta, redraw)


@dataclass
class TrialResult:
    rows: np.ndarray
    tail: np.ndarray
    counters: np.ndarray
    tau: np.ndarray


def run_trial(config, burn_in=0, tail_start=None, spread=None, instrument=False):
    """Run one trial of ``config.steps`` steps from the initial horizon.

    Returns per-step statistic rows (in ``statistics.FIELDS`` order), their
    time averages over the tail window ``t >= tail_start`` and over its two
    halves (rows 0, 1, 2 of ``tail``), wait-episode counters for advances
    after ``burn_in`` and the final horizon.
    """
    horizon = init_horizon(config, spread)
    if tail_start is None:
        tail_start = default_tail_start(config.steps, burn_in)
    k0, k1, n_v, conservative, windowed, delta, redraw = kernel_args(config)
    rows = np.empty((config.steps, N_FIELDS))
    tail = np.zeros((3, N_FIELDS))
    counters = np.zeros(N_COUNTERS, dtype=np.int64)
    tau = _run(horizon.tau, horizon.sites.copy(), k0, k1, horizon.t, config.steps, n_v,
               conservative, windowed, delta, redraw, int(burn_in), int(tail_start),
               int(tail_midpoint(config.steps, tail_start)), rows, tail, counters,
               bool(instrument))
    return TrialResult(rows, tail, counters, tau)


def trajectory(config, steps=None, horizon=None):
    """Full recorded history: horizons ``(steps+1, L)``, attempted sites and
    wait reasons ``(steps, L)`` of every transition."""
    steps = config.steps if steps is None else steps
    if horizon is None:
        horizon = init_horizon(config)
    k0, k1, n_v, conservative, windowed, delta, redraw = kernel_args(config)
    L = config.L
    hist = np.empty((steps + 1, L))
    used = np.empty((steps, L), dtype=np.int8)
    reasons = np.empty((steps, L), dtype=np.int8)
    _record(horizon.tau, horizon.sites.copy(), k0, k1, horizon.t, steps, n_v, conservative,
            windowed, delta, redraw, hist, used, reasons)
    return hist, used, reasons


@dataclass
class EnsembleRun:
    series: object
    counters: np.ndarray


def trial_seeds(master_seed, n_trials, *path):
    return [rng.derive_seed(master_seed, *path, i) for i in range(n_trials)]


def _trial_job(args):
    r = run_trial(*args)
    return r.rows, r.tail, r.counters


def run_ensemble(config, n_trials, seeds=None, burn_in=0, tail_start=None,
                 workers=1, spread=None, instrument=False, pool=None):
    """Run ``n_trials`` independent trials and aggregate them in trial order.

    Seeds default to children of ``config.seed``. Results are bit-identical for
    any ``workers``.
    """
    if seeds is None:
        seeds = trial_seeds(config.seed, n_trials)
    if len(seeds) != n_trials:
        raise ValueError("need one seed per trial")
    if tail_start is None:
        tail_start = default_tail_start(config.steps, burn_in)
    jobs = [(config.with_seed(s), burn_in, tail_start, spread, instrument) for s in seeds]
    acc = Accumulator(config.steps, tail_start)
    counters = np.zeros(N_COUNTERS, dtype=np.int64)

    def consume(results):
        for rows, tail, c in results:
            acc.add(rows, tail)
            counters[:] += c

    if pool is not None:
        consume(pool.map(_trial_job, jobs))
    elif workers > 1 and n_trials > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            consume(ex.map(_trial_job, jobs))
    else:
        consume(map(_trial_job, jobs))
    series = acc.result(config.with_seed(0))
    return EnsembleRun(series, counters)
