"""Closed-form utilization models and the mean-field waiting relations.

``u(N_V, delta) = u_RD(delta) * u_KPZ(N_V) ** p(delta, N_V)`` where each
factor is a rational fit ``1 / (1 + c/x^e -/+ c'/x^e')``.
"""

import configparser
import io
import math
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np
from scipy.optimize import least_squares

from .engine import N_DELTA, N_OK, N_W, WAIT_DELTA, WAIT_W, run_ensemble
from .errors import ConfigError, FitError, InsufficientDataError
from .statistics import steady_state_mean

REGIMES = ("large", "small", "mid")
VARIANTS = ("four_point", "two_point")
MIN_REFIT_POINTS = 6


def regime(n_v):
    """Parameter regime of the exponent fit: N_V >= 100, N_V < 10, or between."""
    if n_v >= 100:
        return "large"
    if n_v < 10:
        return "small"
    return "mid"


@dataclass(frozen=True)
class FitParams:
    rd: tuple
    kpz: tuple
    p: dict
    variant: str = "custom"
    version: int = 1

    def __post_init__(self):
        for name in ("rd", "kpz"):
            if len(getattr(self, name)) != 4:
                raise ConfigError(f"{name} needs four constants")
        if set(self.p) != set(REGIMES) or any(len(v) != 4 for v in self.p.values()):
            raise ConfigError(f"p needs four constants for each of {REGIMES}")

    @classmethod
    def published(cls, variant="four_point"):
        text = resources.files("pdes_horizon").joinpath("data/published_params.txt").read_text()
        return cls.from_text(text, variant)

    @classmethod
    def from_text(cls, text, variant="four_point"):
        cp = configparser.ConfigParser()
        cp.read_string(text)
        if variant not in cp:
            raise ConfigError(f"no [{variant}] section; have {[s for s in cp if s != 'DEFAULT']}")
        sec = cp[variant]
        try:
            get = lambda key: sec.getfloat(key)
            rd = tuple(get(f"rd.{k}") for k in ("c3", "e3", "c4", "e4"))
            kpz = tuple(get(f"kpz.{k}") for k in ("c1", "e1", "c2", "e2"))
            p = {r: tuple(get(f"p.{r}.{k}") for k in ("c5", "e5", "c6", "e6")) for r in REGIMES}
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"malformed parameter table: {exc}") from exc
        version = cp.getint("meta", "version", fallback=1)
        return cls(rd, kpz, p, variant, version)

    def to_text(self, variant=None):
        variant = variant or self.variant
        cp = configparser.ConfigParser()
        cp["meta"] = {"version": str(self.version)}
        sec = {}
        for k, v in zip(("c3", "e3", "c4", "e4"), self.rd):
            sec[f"rd.{k}"] = repr(float(v))
        for k, v in zip(("c1", "e1", "c2", "e2"), self.kpz):
            sec[f"kpz.{k}"] = repr(float(v))
        for r in REGIMES:
            for k, v in zip(("c5", "e5", "c6", "e6"), self.p[r]):
                sec[f"p.{r}.{k}"] = repr(float(v))
        cp[variant] = sec
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def vector(self):
        return np.array([*self.rd, *self.kpz, *(x for r in REGIMES for x in self.p[r])])

    def from_vector(self, v):
        v = [float(x) for x in v]
        p = {r: tuple(v[8 + 4 * i : 12 + 4 * i]) for i, r in enumerate(REGIMES)}
        return replace(self, rd=tuple(v[:4]), kpz=tuple(v[4:8]), p=p)


def _is_infinite(x):
    return x is None or math.isinf(x)


def _rational(c, e, c_, e_, x, sign):
    try:
        den = 1.0 + c / x**e + sign * c_ / x**e_
    except (ZeroDivisionError, OverflowError):
        raise FitError(f"fit is not defined at {x:g}") from None
    if not den > 0:
        raise FitError(f"fit denominator {den:.4g} is not positive at {x:g}")
    return 1.0 / den


def eval_u_rd(delta, params=None):
    """Random-deposition limit u_RD(delta); 0 at delta = 0, 1 without a window."""
    params = params or FitParams.published()
    if _is_infinite(delta):
        return 1.0
    if delta < 0:
        raise ConfigError(f"delta must be nonnegative, got {delta}")
    if delta == 0:
        return 0.0
    c3, e3, c4, e4 = params.rd
    return min(max(_rational(c3, e3, c4, e4, float(delta), -1.0), 0.0), 1.0)


def eval_u_kpz(n_v, params=None):
    """Unconstrained limit u_KPZ(N_V)."""
    params = params or FitParams.published()
    if _is_infinite(n_v):
        return 1.0
    if n_v < 1:
        raise ConfigError(f"n_v must be >= 1, got {n_v}")
    c1, e1, c2, e2 = params.kpz
    return _rational(c1, e1, c2, e2, float(n_v), 1.0)


def eval_p(delta, n_v, params=None):
    """Exponent p(delta, N_V), with p(0) = 0 and p(inf) = 1."""
    params = params or FitParams.published()
    if _is_infinite(delta):
        return 1.0
    if delta == 0:
        return 0.0
    key = "large" if _is_infinite(n_v) else regime(n_v)
    c5, e5, c6, e6 = params.p[key]
    return _rational(c5, e5, c6, e6, float(delta), -1.0)


def eval_composite(n_v, delta, params=None):
    """Composite utilization u_RD(delta) * u_KPZ(N_V)^p(delta, N_V)."""
    params = params or FitParams.published()
    if not _is_infinite(delta) and delta == 0:
        return 0.0
    u = eval_u_rd(delta, params) * eval_u_kpz(n_v, params) ** eval_p(delta, n_v, params)
    return min(max(u, 0.0), 1.0)


@dataclass
class MeanFieldCounters:
    """Wait-episode counters of instrumented runs.

    ``n_OK`` advances came without waiting, ``n_w`` after a causality wait and
    ``n_Delta`` after a window wait. ``idle_w``/``idle_Delta`` are the idle
    steps spent in those episodes, so ``delta_bar`` and ``kappa_bar`` are
    average idle steps per episode.
    """

    n_OK: int = 0
    n_w: int = 0
    n_Delta: int = 0
    idle_w: int = 0
    idle_Delta: int = 0
    u: float = float("nan")
    u_stderr: float = float("nan")

    @classmethod
    def from_array(cls, c, **kw):
        return cls(int(c[N_OK]), int(c[N_W]), int(c[N_DELTA]), int(c[WAIT_W]),
                   int(c[WAIT_DELTA]), **kw)

    def __add__(self, other):
        return MeanFieldCounters(
            self.n_OK + other.n_OK,
            self.n_w + other.n_w,
            self.n_Delta + other.n_Delta,
            self.idle_w + other.idle_w,
            self.idle_Delta + other.idle_Delta,
        )

    @property
    def n_tot(self):
        return self.n_OK + self.n_w + self.n_Delta

    @property
    def delta_bar(self):
        return self.idle_w / self.n_w if self.n_w else 0.0

    @property
    def kappa_bar(self):
        return self.idle_Delta / self.n_Delta if self.n_Delta else 0.0

    @property
    def p_w(self):
        return self.n_w / self.n_tot if self.n_tot else 0.0

    @property
    def p_Delta(self):
        return self.n_Delta / self.n_tot if self.n_tot else 0.0

    @property
    def p_OK(self):
        return self.n_OK / self.n_tot if self.n_tot else 0.0

    @property
    def u_from_counts(self):
        """Advances per attempt over the completed episodes."""
        steps = self.n_tot + self.idle_w + self.idle_Delta
        return self.n_tot / steps if steps else float("nan")


def mean_field_u(counters, n_v, regime="unconstrained"):
    """Mean-field utilization from measured waiting statistics (N_V >= 3).

    ``regime`` is ``"unconstrained"`` (causality waits only) or
    ``"large_delta"`` (adds the window-wait term).
    """
    if n_v < 3:
        raise ConfigError(f"the mean-field relation needs n_v >= 3, got {n_v}")
    c = counters
    rhs = (c.delta_bar - 2.0 / n_v) * c.p_w
    if regime == "large_delta":
        rhs += (c.kappa_bar - 1.0 + 2.0 / n_v * c.p_w) * c.p_Delta
    elif regime != "unconstrained":
        raise ConfigError(f"unknown regime {regime!r}")
    if not 1.0 + rhs > 0:
        raise FitError(f"mean-field denominator {1.0 + rhs:.4g} is not positive")
    return 1.0 / (1.0 + rhs)


def measure_counters(config, n_trials, burn_in, seeds=None, workers=1):
    """Run an instrumented ensemble; counters only cover advances after ``burn_in``."""
    if not config.conservative:
        raise ConfigError("wait counters are defined for the conservative scheme")
    if burn_in >= config.steps:
        raise InsufficientDataError("burn_in leaves no measurement steps")
    run = run_ensemble(config, n_trials, seeds=seeds, burn_in=burn_in, workers=workers,
                       instrument=True)
    kw = {}
    if len(run.series) >= 100 and n_trials > 1:
        ss = steady_state_mean(run.series, "u")
        kw = {"u": ss.mean, "u_stderr": ss.stderr}
    return MeanFieldCounters.from_array(run.counters, **kw)


@dataclass
class RefitResult:
    params: FitParams
    converged: bool
    cost: float
    nfev: int
    stages: list = field(default_factory=list)


def _composite_vec(v, n_v, delta):
    """Composite fit for arrays, NaN where a denominator is not positive."""
    out = np.empty(n_v.shape[0])
    for i in range(n_v.shape[0]):
        nv, d = n_v[i], delta[i]
        if d == 0:
            out[i] = 0.0
            continue
        with np.errstate(all="ignore"):
            if math.isinf(d):
                rd, p = 1.0, 1.0
            else:
                den = 1 + v[0] / d ** v[1] - v[2] / d ** v[3]
                rd = 1.0 / den if den > 0 else np.nan
                j = 8 + 4 * REGIMES.index("large" if math.isinf(nv) else regime(nv))
                den = 1 + v[j] / d ** v[j + 1] - v[j + 2] / d ** v[j + 3]
                p = 1.0 / den if den > 0 else np.nan
            if math.isinf(nv):
                kpz = 1.0
            else:
                den = 1 + v[4] / nv ** v[5] + v[6] / nv ** v[7]
                kpz = 1.0 / den if den > 0 else np.nan
            out[i] = rd * kpz**p
    return out


def refit_params(data, initial=None, ftol=1e-8, max_nfev=500):
    """Refit the composite constants to ``(N_V, delta, u[, stderr])`` data.

    Stages run in order: the RD factor, the KPZ factor, then the exponent
    constants of every regime present in the data, each with the other
    constants held fixed. A last stage refines all of them together. ``delta`` may be None or inf for unconstrained data
    and ``N_V`` may be inf for the RD limit. Starts from the published
    constants unless ``initial`` is given.
    """
    rows = list(data)
    if len(rows) < MIN_REFIT_POINTS:
        raise InsufficientDataError(
            f"refit needs at least {MIN_REFIT_POINTS} points, got {len(rows)}"
        )
    n_v = np.array([math.inf if _is_infinite(r[0]) else float(r[0]) for r in rows])
    delta = np.array([math.inf if _is_infinite(r[1]) else float(r[1]) for r in rows])
    u = np.array([float(r[2]) for r in rows])
    err = np.array([float(r[3]) if len(r) > 3 else 1.0 for r in rows])
    if np.unique(n_v).shape[0] < 2 or np.unique(delta).shape[0] < 2:
        raise InsufficientDataError("refit data must span both N_V and delta")
    if not np.all(err > 0):
        raise ConfigError("standard errors must be positive")
    params = initial or FitParams.published()
    v = params.vector()
    present = {"large" if math.isinf(x) else regime(x) for x in n_v[np.isfinite(delta) & (delta > 0)]}
    stages = [("rd", list(range(4))), ("kpz", list(range(4, 8)))]
    for r in REGIMES:
        if r in present:
            j = 8 + 4 * REGIMES.index(r)
            stages.append((f"p.{r}", list(range(j, j + 4))))
    stages.append(("joint", sorted(i for _, idx in stages for i in idx)))

    def residual(free, idx):
        w = v.copy()
        w[idx] = free
        model = _composite_vec(w, n_v, delta)
        res = (model - u) / err
        return np.where(np.isfinite(res), res, 1e3)

    converged = True
    nfev = 0
    log = []
    for name, idx in stages:
        r = least_squares(residual, v[idx], args=(idx,), method="trf", ftol=ftol, x_scale="jac",
                          xtol=1e-12, gtol=1e-12, max_nfev=max_nfev)
        v[idx] = r.x
        nfev += r.nfev
        ok = r.status > 0
        converged &= ok
        log.append({"stage": name, "cost": float(r.cost), "nfev": int(r.nfev), "converged": ok})
    cost = float(log[-1]["cost"])
    return RefitResult(params.from_vector(v), bool(converged), cost, nfev, log)
