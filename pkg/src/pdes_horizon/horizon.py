"""Virtual time horizon of a conservative PDES on a ring of L processing elements.

Each PE carries ``n_v`` sites and a local virtual time ``tau[k]`` at which
its pending update attempt, on one randomly picked site, is scheduled. At
every parallel step all PEs attempt that update against a frozen snapshot of
the horizon: a border site requires the PE not to be ahead of the neighbour
on that side, and with a finite window ``delta`` no PE may be more than
``delta`` ahead of the global minimum. Successful PEs advance by a unit-mean
exponential increment and pick the site of their next attempt; blocked PEs
keep their pending attempt (``site_policy="persist"``). With
``site_policy="redraw"`` every PE picks a fresh site at every step instead.
"""

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numba
import numpy as np

from . import rng
from .errors import ConfigError


class Mode(enum.Enum):
    CONSERVATIVE = "conservative"
    RANDOM_DEPOSITION = "random_deposition"


class Site(enum.IntEnum):
    INTERIOR = 0
    LEFT_BORDER = 1
    RIGHT_BORDER = 2
    BOTH_BORDERS = 3


SITE_POLICIES = ("persist", "redraw")


class WaitReason(enum.IntEnum):
    DID_NOT_WAIT = 0
    CAUSALITY_WAIT = 1
    WINDOW_WAIT = 2


@dataclass(frozen=True)
class SimConfig:
    """Parameters of one trial.

    ``delta=None`` means no moving window at all; any float, including a very
    large one, is a finite window.
    """

    L: int
    n_v: int = 1
    delta: Optional[float] = None
    mode: Mode = Mode.CONSERVATIVE
    steps: int = 1000
    seed: int = 0
    site_policy: str = "persist"

    def __post_init__(self):
        if int(self.L) != self.L or self.L < 1:
            raise ConfigError(f"L must be a positive integer, got {self.L!r}")
        if int(self.n_v) != self.n_v or self.n_v < 1:
            raise ConfigError(f"n_v must be a positive integer, got {self.n_v!r}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigError(f"steps must be a positive integer, got {self.steps!r}")
        if self.delta is not None:
            d = float(self.delta)
            if not d >= 0 or math.isinf(d):
                raise ConfigError(
                    f"delta must be a finite nonnegative number or None, got {self.delta!r}"
                )
            object.__setattr__(self, "delta", d)
        if not isinstance(self.mode, Mode):
            object.__setattr__(self, "mode", Mode(self.mode))
        if self.site_policy not in SITE_POLICIES:
            raise ConfigError(f"site_policy must be one of {SITE_POLICIES}")
        rng.split_seed(self.seed)

    @property
    def constrained(self):
        return self.delta is not None

    @property
    def conservative(self):
        return self.mode is Mode.CONSERVATIVE

    def with_seed(self, seed):
        return replace(self, seed=seed)


@dataclass
class Horizon:
    tau: np.ndarray
    t: int = 0
    # pending site class of each PE (Site values)
    sites: np.ndarray = None

    def __post_init__(self):
        if self.sites is None:
            self.sites = np.full(self.tau.shape[0], Site.BOTH_BORDERS, dtype=np.int8)

    @property
    def L(self):
        return self.tau.shape[0]


@dataclass
class UpdateOutcome:
    updated: np.ndarray
    wait_reason: np.ndarray
    # site each PE attempted; recorded so a step can be replayed
    sites: np.ndarray = field(repr=False)

    @property
    def utilization(self):
        return float(np.count_nonzero(self.updated)) / self.updated.shape[0]


def init_horizon(config, spread=None):
    """Horizon at t = 0.

    By default every PE starts at virtual time zero. With ``spread`` the local
    times are drawn i.i.d. uniform on ``[0, spread)`` from the trial seed. The
    first pending sites are drawn from the trial seed as well.
    """
    if spread is not None and not spread > 0:
        raise ConfigError(f"spread must be positive, got {spread!r}")
    k0, k1 = rng.split_seed(config.seed)
    tau = np.zeros(config.L)
    sites = np.empty(config.L, dtype=np.int8)
    _initial_state(tau, sites, config.n_v, -1.0 if spread is None else float(spread), k0, k1)
    return Horizon(tau, 0, sites)


@numba.njit(cache=True)
def _initial_state(tau, sites, n_v, spread, k0, k1):
    for k in range(tau.shape[0]):
        c0, c1, c2, c3 = rng.block(k0, k1, k, 0, rng.TAG_INIT)
        if spread > 0:
            tau[k] = spread * rng.open_unit(c0, c1)
        sites[k] = site_from_uniform(rng.open_unit(c2, c3), n_v)


@numba.njit(inline="always", cache=True)
def increment_from_uniform(u):
    """Inverse CDF of the unit-mean exponential; ``u = 0`` maps to the
    increment of the smallest uniform ``open_unit`` yields, so the result is > 0."""
    if u <= 0.0:
        u = 1.1102230246251565e-16
    return -math.log1p(-u)


@numba.njit(inline="always", cache=True)
def site_from_uniform(u, n_v):
    """Site class as bit flags: bit 0 = left border, bit 1 = right border."""
    if n_v == 1:
        return 3
    i = int(u * n_v)
    if i >= n_v:
        i = n_v - 1
    return (i == 0) * 1 + (i == n_v - 1) * 2


def draw_increment(stream):
    """Unit-mean exponential increment drawn from a numpy ``Generator``."""
    return increment_from_uniform(stream.random())


def pick_site(stream, n_v):
    if n_v < 1:
        raise ConfigError(f"n_v must be >= 1, got {n_v}")
    return Site(site_from_uniform(stream.random(), n_v))


def global_min(horizon):
    """The global virtual time, min_k tau_k."""
    return float(horizon.tau.min())


@numba.njit(cache=True)
def sweep(tau, new_tau, sites, reason, used, k0, k1, t, n_v, conservative, windowed,
          delta, redraw):
    """One parallel update attempt from snapshot ``tau`` at step ``t``.

    Writes the next horizon into ``new_tau``, updates the pending ``sites`` in
    place and returns the number of PEs that updated. ``used`` receives the
    site each PE attempted, unless it is an empty array.
    """
    L = tau.shape[0]
    s = np.uint64(t)
    s_lo = s & rng.LO32
    s_hi = s >> rng.S32
    tag = np.uint64(rng.TAG_STEP)
    g = tau[0]
    for k in range(1, L):
        g = min(g, tau[k])
    bound = delta + g
    if redraw:
        for k in range(L):
            c0, c1, c2, c3 = rng.philox4x32(np.uint64(k), s_lo, s_hi, tag, k0, k1)
            sites[k] = site_from_uniform(rng.open_unit(c0, c1), n_v)
    if used.shape[0] == L:
        used[:] = sites
    # decision pass: branchless, compacts the PEs that update into ``upd``
    upd = np.empty(L, dtype=np.int64)
    n_up = 0
    for k in range(L):
        tk = tau[k]
        site = sites[k]
        left = tau[k - 1] if k > 0 else tau[L - 1]
        right = tau[k + 1] if k < L - 1 else tau[0]
        causal = (not conservative) | (
            (((site & 1) == 0) | (tk <= left)) & (((site & 2) == 0) | (tk <= right))
        )
        win = (not windowed) | (tk <= bound)
        # window wait takes precedence when both conditions fail
        reason[k] = (not win) * 2 + (win & (not causal))
        new_tau[k] = tk
        upd[n_up] = k
        n_up += causal & win
    # draw pass: only PEs that update consume randomness
    for i in range(n_up):
        k = upd[i]
        c0, c1, c2, c3 = rng.philox4x32(np.uint64(k), s_lo, s_hi, tag, k0, k1)
        if not redraw:
            sites[k] = site_from_uniform(rng.open_unit(c0, c1), n_v)
        new_tau[k] = tau[k] + increment_from_uniform(rng.open_unit(c2, c3))
    return n_up


def kernel_args(config):
    """Positional arguments shared by every sweep of a trial."""
    k0, k1 = rng.split_seed(config.seed)
    delta = 0.0 if config.delta is None else config.delta
    return (k0, k1, config.n_v, config.conservative, config.constrained, delta,
            config.site_policy == "redraw")


def step(horizon, config):
    """Advance ``horizon`` by one parallel step; returns ``(new_horizon, outcome)``."""
    L = horizon.L
    if L != config.L:
        raise ConfigError(f"horizon has {L} PEs but config.L = {config.L}")
    new_tau = np.empty(L)
    sites = horizon.sites.copy()
    reason = np.empty(L, dtype=np.int8)
    used = np.empty(L, dtype=np.int8)
    k0, k1, n_v, conservative, windowed, delta, redraw = kernel_args(config)
    sweep(horizon.tau, new_tau, sites, reason, used, k0, k1, horizon.t, n_v, conservative,
          windowed, delta, redraw)
    outcome = UpdateOutcome(updated=reason == 0, wait_reason=reason, sites=used)
    return Horizon(new_tau, horizon.t + 1, sites), outcome
