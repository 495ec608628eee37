"""Scaling exponents and infinite-size extrapolation of ensemble data."""

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import least_squares

from .errors import FitError, InsufficientDataError, NotSaturatedError
from .statistics import steady_state_mean

MIN_FIT_POINTS = 5
GROWTH_T_MIN = 10
PLATEAU_BAND = 0.05
POINTS_PER_DECADE = 20


@dataclass
class Estimate:
    value: float
    stderr: float

    def __iter__(self):
        return iter((self.value, self.stderr))


@dataclass
class ScalingResult:
    beta: Estimate
    alpha: Estimate
    t_cross: Optional[float] = None
    fit_window: tuple = ()

    @property
    def z(self):
        return self.alpha.value / self.beta.value

    @property
    def z_stderr(self):
        a, sa = self.alpha
        b, sb = self.beta
        return abs(a / b) * np.hypot(sa / a if a else 0.0, sb / b)


@dataclass
class ExtrapolationResult:
    u_inf: float
    stderr: float
    method: str
    coefficients: dict = field(default_factory=dict)
    degrees: Optional[tuple] = None


def weighted_line(x, y, sigma=None):
    """Weighted least-squares line ``y = a + b x``.

    Returns ``(a, b, cov)``. The covariance is the inverse normal matrix,
    inflated by the reduced chi-square when it exceeds one.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.shape[0]
    if sigma is None:
        sigma = np.ones(n)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(~(sigma > 0)):
        sigma = np.where(sigma > 0, sigma, np.min(sigma[sigma > 0], initial=1.0))
    w = 1.0 / sigma
    A = np.column_stack([np.ones(n), x]) * w[:, None]
    b = y * w
    coef, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    if rank < 2:
        raise FitError("degenerate design matrix")
    cov = np.linalg.inv(A.T @ A)
    dof = n - 2
    if dof > 0:
        chi2 = float(np.sum((A @ coef - b) ** 2)) / dof
        cov = cov * max(chi2, 1.0)
    return coef[0], coef[1], cov


def log_spaced_indices(t, t_lo, t_hi, per_decade=POINTS_PER_DECADE):
    """Indices into ``t`` at roughly log-uniform spacing within [t_lo, t_hi]."""
    t = np.asarray(t)
    lo = max(t_lo, t[0])
    hi = min(t_hi, t[-1])
    if hi <= lo:
        return np.array([], dtype=int)
    n = max(int(np.ceil(np.log10(hi / lo) * per_decade)) + 1, 2)
    targets = np.unique(np.round(np.geomspace(lo, hi, n)))
    idx = np.searchsorted(t, targets)
    idx = idx[(idx < t.shape[0])]
    return np.unique(idx[(t[idx] >= lo) & (t[idx] <= hi)])


def power_law_fit(x, y, sigma=None):
    """Fit ``y = A x^p`` by weighted regression in log-log space.

    ``sigma`` are standard errors of ``y``; they become ``sigma/y`` in log
    space. Returns ``(p, p_stderr, A)``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x <= 0) or np.any(y <= 0):
        raise FitError("power-law fit needs positive data")
    ls = None if sigma is None else np.asarray(sigma, dtype=float) / y
    a, b, cov = weighted_line(np.log(x), np.log(y), ls)
    return b, float(np.sqrt(cov[1, 1])), float(np.exp(a))


def log_bins(t, y, per_decade=POINTS_PER_DECADE):
    """Average ``y`` over log-uniform bins of ``t``; returns bin starts and means.

    Early steps keep their own bins while late bins pool many steps, which
    suppresses per-step sampling noise where the series is flat.
    """
    t = np.asarray(t)
    y = np.asarray(y, dtype=float)
    edges = np.unique(np.floor(np.geomspace(t[0], t[-1] + 1,
                                            int(np.log10((t[-1] + 1) / t[0]) * per_decade) + 2)))
    starts = np.searchsorted(t, edges[:-1])
    starts = np.unique(starts[starts < t.shape[0]])
    means = np.add.reduceat(y, starts) / np.diff(np.append(starts, t.shape[0]))
    return t[starts], means


def plateau_start(series, name="w", band=PLATEAU_BAND):
    """First step from which ``name`` stays within ``band`` of its plateau.

    The test runs on log-binned averages (see ``log_bins``) so that sampling
    noise in the flat part does not push the onset to the end of the run.
    Raises NotSaturatedError when the series has no plateau.
    """
    ss = steady_state_mean(series, name)
    if not ss.saturated:
        raise NotSaturatedError(f"{name} is not saturated (drift {ss.drift:.3g})")
    tb, yb = log_bins(series.t, series.get(name))
    outside = np.nonzero(np.abs(yb - ss.mean) > band * abs(ss.mean))[0]
    if outside.shape[0] == 0:
        return int(tb[0])
    last = outside[-1]
    if last + 1 >= tb.shape[0]:
        raise NotSaturatedError(f"{name} never settles within {band:.0%} of its plateau")
    return int(tb[last + 1])


def growth_exponent(series, window=None):
    """Growth exponent from ``<w2(t)> ~ t^(2 beta)``.

    ``window`` is an inclusive ``(t_min, t_max)`` range; by default it runs
    from t = 10 to a quarter of the plateau onset (or to the end of the series
    when there is no plateau). Returns an Estimate of beta.
    """
    if window is None:
        try:
            t_hi = plateau_start(series, "w") / 4
        except (NotSaturatedError, InsufficientDataError):
            t_hi = series.t[-1]
        window = (GROWTH_T_MIN, t_hi)
    idx = log_spaced_indices(series.t, window[0], window[1])
    if idx.shape[0] < MIN_FIT_POINTS:
        raise InsufficientDataError(
            f"growth window {window} holds {idx.shape[0]} points, need {MIN_FIT_POINTS}"
        )
    t = series.t[idx]
    w2 = series.get("w2")[idx]
    err = series.err("w2")[idx]
    sigma = None if not np.all(np.isfinite(err)) or np.all(err == 0) else err
    p, sp, _ = power_law_fit(t, w2, sigma)
    return Estimate(p / 2, sp / 2)


def roughness_exponent(saturated_widths):
    """Roughness exponent from saturated ``<w2> ~ L^(2 alpha)``.

    ``saturated_widths`` holds ``(L, w2, stderr)`` triples, or ``(L, w2,
    stderr, saturated)`` where a False flag refuses the fit.
    """
    pts = list(saturated_widths)
    if any(len(p) > 3 and not p[3] for p in pts):
        raise NotSaturatedError("roughness fit given unsaturated widths")
    Ls = np.array([p[0] for p in pts], dtype=float)
    if np.unique(Ls).shape[0] < 3:
        raise InsufficientDataError("roughness fit needs at least three distinct L")
    w2 = np.array([p[1] for p in pts], dtype=float)
    err = np.array([p[2] for p in pts], dtype=float)
    sigma = err if np.all(err > 0) else None
    p, sp, _ = power_law_fit(Ls, w2, sigma)
    return Estimate(p / 2, sp / 2)


def crossover_time(series, constrained=False, growth_window=None):
    """Crossover time of the width.

    Unconstrained runs: the time at which the fitted growth law
    ``A t^(2 beta)`` reaches the plateau of ``<w2>``. Constrained runs: the
    plateau onset t_p of ``<w>`` (first step after which it stays within 5% of
    the plateau mean).
    """
    if constrained:
        return float(plateau_start(series, "w"))
    ss = steady_state_mean(series, "w2")
    if not ss.saturated:
        raise NotSaturatedError("width has no plateau")
    if growth_window is None:
        growth_window = (GROWTH_T_MIN, plateau_start(series, "w") / 4)
    idx = log_spaced_indices(series.t, *growth_window)
    if idx.shape[0] < MIN_FIT_POINTS:
        raise InsufficientDataError("growth window too short for a crossover estimate")
    p, _, A = power_law_fit(series.t[idx], series.get("w2")[idx])
    return float((ss.mean / A) ** (1.0 / p))


def krug_meakin_extrapolate(points, alpha=0.5):
    """``u_L = u_inf + c L^(-2(1-alpha))`` by weighted least squares.

    ``points`` are ``(L, u_L, stderr)``; the intercept is the infinite-size
    utilization.
    """
    pts = sorted(points, key=lambda p: p[0])
    if len(pts) < 3:
        raise InsufficientDataError("Krug-Meakin extrapolation needs at least three L")
    expo = 2.0 * (1.0 - alpha)
    L = np.array([p[0] for p in pts], dtype=float)
    u = np.array([p[1] for p in pts], dtype=float)
    err = np.array([p[2] for p in pts], dtype=float)
    sigma = err if np.all(err > 0) else None
    a, b, cov = weighted_line(L ** -expo, u, sigma)
    return ExtrapolationResult(
        u_inf=float(a),
        stderr=float(np.sqrt(cov[0, 0])),
        method="krug_meakin",
        coefficients={"u_inf": float(a), "const": float(b), "exponent": expo},
    )


def rational_value(coef, kn, kd, x):
    a = coef[: kn + 1]
    b = coef[kn + 1 :]
    x = np.asarray(x, dtype=float)
    num = np.polyval(a[::-1], x)
    den = 1.0 + x * np.polyval(b[::-1], x) if kd else np.ones_like(x)
    return num / den


def _denominator_has_pole(b, x_max):
    if len(b) == 0:
        return False
    # 1 + b1 x + ... + bk x^k, highest power first for np.roots
    poly = np.concatenate([np.asarray(b)[::-1], [1.0]])
    for r in np.roots(poly):
        if abs(r.imag) <= 1e-12 * max(1.0, abs(r.real)) and 0.0 <= r.real <= x_max:
            return True
    grid = np.linspace(0.0, x_max, 257)
    den = 1.0 + grid * np.polyval(np.asarray(b)[::-1], grid)
    return bool(np.any(den <= 0))


def _fit_rational(x, u, sigma, kn, kd):
    n_par = kn + kd + 1
    w = 1.0 / sigma
    # linearised start: a(x) - u * (b(x) - 1) = u
    cols = [x**k for k in range(kn + 1)] + [-u * x**k for k in range(1, kd + 1)]
    A = np.column_stack(cols) * w[:, None]
    start, *_ = np.linalg.lstsq(A, u * w, rcond=None)
    if x.shape[0] == n_par or kd == 0:
        coef = start
        J = A
        resid = A @ coef - u * w
    else:
        res = least_squares(
            lambda c: (rational_value(c, kn, kd, x) - u) * w, start, method="lm",
            xtol=1e-14, ftol=1e-14,
        )
        coef, J, resid = res.x, res.jac, res.fun
    dof = x.shape[0] - n_par
    try:
        cov = np.linalg.pinv(J.T @ J)
    except np.linalg.LinAlgError as exc:
        raise FitError("singular rational fit") from exc
    if dof > 0:
        cov = cov * max(float(resid @ resid) / dof, 1.0)
    return coef, cov


def rational_extrapolate(points, degrees=None, max_degree=3):
    """Extrapolate ``u(x)``, ``x = 1/L``, to ``x = 0`` with a rational function.

    ``points`` are ``(x, u)`` or ``(x, u, stderr)``. With explicit ``degrees =
    (K_n, K_d)`` the rational form ``(a0 + ... + a_Kn x^Kn) / (1 + b1 x + ...
    + b_Kd x^Kd)`` is fitted by least squares and ``a0`` is returned. Without
    degrees, every pair with ``1 <= K_n <= max_degree`` and ``0 <= K_d <=
    max_degree`` that leaves one point for validation is tried, and the pair
    with the smallest leave-one-out prediction error wins. Fits with a pole in
    ``[0, max x]`` are rejected.
    """
    pts = sorted(points, key=lambda p: p[0])
    x = np.array([p[0] for p in pts], dtype=float)
    u = np.array([p[1] for p in pts], dtype=float)
    if np.unique(x).shape[0] != x.shape[0]:
        raise FitError("rational extrapolation needs distinct 1/L values")
    sigma = np.array([p[2] if len(p) > 2 else 1.0 for p in pts], dtype=float)
    if not np.all(sigma > 0):
        sigma = np.ones_like(x)
    n = x.shape[0]
    if degrees is not None:
        kn, kd = degrees
        if kn + kd + 1 > n:
            raise InsufficientDataError(f"degrees {degrees} need {kn + kd + 1} points, have {n}")
        if n < 2:
            raise InsufficientDataError("need at least two points")
        return _rational_result(x, u, sigma, kn, kd)
    if n < 3:
        raise InsufficientDataError("rational extrapolation needs at least three points")
    best = None
    for kn, kd in itertools.product(range(1, max_degree + 1), range(0, max_degree + 1)):
        if kn + kd + 1 > n - 1:
            continue
        score = _loo_error(x, u, sigma, kn, kd)
        if score is None:
            continue
        if best is None or score < best[0]:
            best = (score, kn, kd)
    if best is None:
        raise FitError("no pole-free rational fit found for any degree pair")
    result = _rational_result(x, u, sigma, best[1], best[2])
    result.coefficients["loo_error"] = best[0]
    return result


def _rational_result(x, u, sigma, kn, kd):
    coef, cov = _fit_rational(x, u, sigma, kn, kd)
    b = coef[kn + 1 :]
    if _denominator_has_pole(b, float(x.max())):
        raise FitError(f"rational fit ({kn},{kd}) has a pole in [0, {x.max():.3g}]")
    return ExtrapolationResult(
        u_inf=float(coef[0]),
        stderr=float(np.sqrt(max(cov[0, 0], 0.0))),
        method="rational",
        coefficients={"a": [float(c) for c in coef[: kn + 1]], "b": [float(c) for c in b]},
        degrees=(kn, kd),
    )


def _loo_error(x, u, sigma, kn, kd):
    errs = []
    for i in range(x.shape[0]):
        keep = np.arange(x.shape[0]) != i
        try:
            coef, _ = _fit_rational(x[keep], u[keep], sigma[keep], kn, kd)
        except (FitError, np.linalg.LinAlgError, ValueError):
            return None
        if _denominator_has_pole(coef[kn + 1 :], float(x.max())):
            return None
        pred = rational_value(coef, kn, kd, x[i])
        errs.append(((pred - u[i]) / sigma[i]) ** 2)
    # the full-data fit must be pole-free as well
    try:
        coef, _ = _fit_rational(x, u, sigma, kn, kd)
    except (FitError, np.linalg.LinAlgError, ValueError):
        return None
    if _denominator_has_pole(coef[kn + 1 :], float(x.max())):
        return None
    return float(np.mean(errs))


def rational_interpolate(xs, ys, x):
    """Diagonal rational interpolation through all points, evaluated at ``x``.

    Bulirsch-Stoer tableau (as in Numerical Recipes ``ratint``). Returns
    ``(value, error_estimate)``.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    n = xs.shape[0]
    tiny = 1e-300
    hh = np.abs(x - xs)
    ns = int(np.argmin(hh))
    if hh[ns] == 0.0:
        return float(ys[ns]), 0.0
    c = ys.copy()
    d = ys.copy() + tiny
    y = ys[ns]
    ns -= 1
    dy = 0.0
    for m in range(1, n):
        for i in range(n - m):
            w = c[i + 1] - d[i]
            h = xs[i + m] - x
            t = (xs[i] - x) * d[i] / h
            dd = t - c[i + 1]
            if dd == 0.0:
                raise FitError("rational interpolation hit a pole")
            dd = w / dd
            d[i] = c[i + 1] * dd
            c[i] = t * dd
        if 2 * (ns + 1) < n - m:
            dy = c[ns + 1]
        else:
            dy = d[ns]
            ns -= 1
        y += dy
    return float(y), float(abs(dy))


def rational_interpolation_extrapolate(points):
    """Exact diagonal rational interpolation of ``(x, u)`` evaluated at x = 0."""
    pts = sorted(points, key=lambda p: p[0])
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    if len(set(xs)) != len(xs) or len(xs) < 2:
        raise FitError("interpolation needs at least two distinct points")
    value, err = rational_interpolate(xs, ys, 0.0)
    return ExtrapolationResult(u_inf=value, stderr=err, method="rational_interp",
                               degrees=None, coefficients={})


@dataclass
class PeakStructure:
    """Growth maximum, undershoot and recovery of a width trace."""

    t_peak: int
    t_dip: int
    t_recover: int
    plateau: float
    sigma: float
    present: bool


def peak_structure(series, name="wa", t_max=500, nsigma=3.0):
    """Locate a double-peak approach to the plateau in the first ``t_max`` steps.

    The first peak is the global maximum of the growth phase; the trace then
    dips below the plateau and climbs to a second maximum. The structure is
    ``present`` when the dip lies more than ``nsigma`` below both the plateau
    and the second maximum, with sigma the larger of the point stderr at the
    dip and the step-to-step scatter of the plateau.
    """
    ss = steady_state_mean(series, name)
    n = int(np.searchsorted(series.t, t_max, side="right"))
    y = series.get(name)[:n]
    e = series.err(name)[:n]
    i0 = int(np.searchsorted(series.t, series.tail_start))
    scatter = float(np.std(series.get(name)[i0:], ddof=1)) if len(series) - i0 > 1 else 0.0
    i_peak = int(np.argmax(y))
    if i_peak >= n - 2:
        return PeakStructure(int(series.t[i_peak]), -1, -1, ss.mean, scatter, False)
    i_dip = i_peak + int(np.argmin(y[i_peak:]))
    i_rec = i_dip + int(np.argmax(y[i_dip:]))
    err = e[i_dip] if np.isfinite(e[i_dip]) else 0.0
    sigma = max(err, scatter)
    present = bool(
        i_peak < i_dip < i_rec
        and ss.mean - y[i_dip] > nsigma * sigma
        and y[i_rec] - y[i_dip] > nsigma * sigma
    )
    t = series.t
    return PeakStructure(int(t[i_peak]), int(t[i_dip]), int(t[i_rec]), ss.mean, sigma, present)
