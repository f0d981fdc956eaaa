"""Exact total-variation curves for finite chains and checks of their decay."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy import stats

from ._validation import check_probability_vector, check_state
from .errors import DomainError, UniformizationOverflow
from .models import Ctmc, stationary_distribution
from .rates import RateProfile
from .reports import CheckReport, rows_to_csv


def tv_distance(mu, nu) -> float:
    """``(1/2) sum |mu_i - nu_i|``."""
    mu = check_probability_vector(mu, name="mu")
    nu = check_probability_vector(nu, len(mu), name="nu")
    return float(min(0.5 * np.abs(mu - nu).sum(), 1.0))


@dataclass(frozen=True)
class TvCurve:
    times: np.ndarray
    tv: np.ndarray
    rate_value: np.ndarray
    model_id: str
    x0: int

    @property
    def rate_product(self) -> np.ndarray:
        return self.rate_value * self.tv

    def to_csv(self) -> str:
        return rows_to_csv(["t", "tv", "rate_value", "rate_product"],
                           zip(self.times, self.tv, self.rate_value, self.rate_product))

    def write(self, path):
        Path(path).write_text(self.to_csv())


class _Propagator:
    """Advances ``p P_t`` by uniformization in increments with ``rate * dt <= cap``."""

    def __init__(self, model: Ctmc, cap: float, tol: float):
        self.lam = float(model.exit_rates.max())
        self.cap = cap
        self.tol = tol
        n = model.n_states
        self.PT = (sp.identity(n, format="csr") + model.sparse / self.lam).T.tocsr() if self.lam > 0 else None

    def advance(self, p, dt, tol):
        if dt == 0.0 or self.PT is None:
            return p
        m = self.lam * dt
        if m > self.cap:
            raise UniformizationOverflow(f"uniformization rate*t = {m:g} exceeds cap {self.cap:g}")
        K = int(stats.poisson.isf(tol, m)) + 1
        weights = stats.poisson.pmf(np.arange(K + 1), m)
        v = p
        acc = weights[0] * v
        for k in range(1, K + 1):
            v = self.PT @ v
            acc = acc + weights[k] * v
        return acc


def tv_curve(model: Ctmc, x0, profile: RateProfile, times, cap: float = 1e5, tol: float = 1e-12) -> TvCurve:
    """``tv(t) = TV(P_t(x0, .), pi)`` and the rate product on increasing ``times``.

    Each time is reached from the previous one, so no single uniformization
    step exceeds ``cap``; the Poisson tail mass dropped per time point is at
    most ``tol`` in total.
    """
    x0 = check_state(x0, model.n_states)
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or np.any(times < 0) or np.any(np.diff(times) <= 0):
        raise DomainError("times must be increasing and >= 0")
    pi = stationary_distribution(model)
    prop = _Propagator(model, cap, tol)
    p = np.zeros(model.n_states)
    p[x0] = 1.0
    tv = np.empty(len(times))
    prev = 0.0
    for k, t in enumerate(times):
        gap = t - prev
        n_sub = max(1, math.ceil(prop.lam * gap / cap)) if gap > 0 else 1
        for _ in range(n_sub):
            p = prop.advance(p, gap / n_sub, tol / (n_sub * len(times)))
        prev = t
        tv[k] = min(0.5 * np.abs(p - pi).sum(), 1.0)
    rate = np.asarray(profile.rate_curve(times), dtype=float)
    return TvCurve(times, tv, rate, model.model_id, x0)


def check_vanishing(curve: TvCurve, burn_in: float, window: int, factor: float = 10.0,
                    rtol: float = 1e-9, tv_floor: float = 1e-12) -> CheckReport:
    """Windowed decay gate on the rate product past ``burn_in``.

    Consecutive ``window``-point averages must be non-increasing and the last
    must be below the first divided by ``factor``.

    Parameters
    ----------
    tv_floor : float
        Absolute accuracy of the computed TV values. A rise counts only when
        it exceeds ``rtol`` relative plus ``tv_floor`` times the window's mean
        rate value, so round-off once TV reaches machine precision is ignored.
    """
    mask = curve.times >= burn_in
    prod = curve.rate_product[mask]
    if window < 1 or prod.size < 2 * window:
        raise ValueError(f"need at least {2 * window} points beyond burn_in, have {prod.size}")
    n_win = prod.size // window
    avgs = prod[: n_win * window].reshape(n_win, window).mean(axis=1)
    t_mid = curve.times[mask][: n_win * window].reshape(n_win, window).mean(axis=1)
    rate_avgs = curve.rate_value[mask][: n_win * window].reshape(n_win, window).mean(axis=1)
    rises = np.nonzero(np.diff(avgs) > rtol * avgs[:-1] + tv_floor * rate_avgs[1:])[0]
    violations = [{"window_t": float(t_mid[i + 1]), "previous": float(avgs[i]), "average": float(avgs[i + 1])}
                  for i in rises]
    ratio = float(avgs[-1] / avgs[0]) if avgs[0] > 0 else 0.0
    if not ratio < 1.0 / factor:
        violations.append({"final_over_first": ratio, "required_below": 1.0 / factor})
    return CheckReport(
        name="vanishing",
        passed=not violations,
        margin=1.0 / factor - ratio,
        worst=float(t_mid[rises[0] + 1]) if rises.size else float(t_mid[-1]),
        constants={"burn_in": burn_in, "window": window, "final_over_first": ratio, "n_windows": int(n_win)},
        violations=violations,
        rows=list(zip(t_mid.tolist(), avgs.tolist())),
    )


def fit_polynomial_rate(curve: TvCurve, t_range) -> float:
    """Least-squares slope of ``log tv`` against ``log t`` over ``t_range``."""
    lo, hi = t_range
    mask = (curve.times >= lo) & (curve.times <= hi)
    t, tv = curve.times[mask], curve.tv[mask]
    if t.size < 2 or t.min() <= 0 or t.max() == t.min():
        raise ValueError(f"degenerate fit range {t_range}")
    if np.any(tv <= 0):
        raise ValueError("tv must be positive on the fit range")
    slope, _ = np.polyfit(np.log(t), np.log(tv), 1)
    return float(slope)


def check_polynomial_rate(curve: TvCurve, t_range, alpha: float, margin: float = 0.2) -> CheckReport:
    """Fitted slope against the polynomial prediction ``-alpha / (1 - alpha)``."""
    slope = fit_polynomial_rate(curve, t_range)
    target = -alpha / (1.0 - alpha) + margin
    return CheckReport(
        name="polynomial_rate",
        passed=slope <= target,
        margin=target - slope,
        worst=list(t_range),
        constants={"slope": slope, "predicted": -alpha / (1.0 - alpha), "allowed": target},
    )


def truncation_shift(curve: TvCurve, other: TvCurve) -> float:
    """Largest TV difference between two curves on the same time grid."""
    if not np.array_equal(curve.times, other.times):
        raise ValueError("curves must share their time grid")
    return float(np.max(np.abs(curve.tv - other.tv)))
