"""Drift certificates and time-space Lyapunov functions.

A certificate records, per state or grid point, the residual
``LV(x) + phi(V(x)) - K 1_C(x)`` of the subgeometric drift inequality. From a
passing certificate, :func:`build_psi_from_v` produces the function
``psi(t, x) = 2 H^{-1}(H(V(x)) + t) - H^{-1}(t)`` whose space-time drift is then
verified by :func:`check_condition2`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import optimize

from ._validation import check_vector
from .errors import AutoTargetError, ConfigError
from .models import Ctmc, Diffusion1d, TargetSet, generator_apply, generator_apply_diffusion
from .rates import HInvMethod, RateFunction, RateProfile
from .reports import CheckReport, fmt, rows_to_csv


@dataclass(frozen=True)
class LyapunovCandidate:
    """``V >= 1``: a vector over chain states or a vectorised callable on the line."""

    values: np.ndarray | None = None
    fn: Callable | None = field(default=None, compare=False)
    label: str = "V"

    def __post_init__(self):
        if (self.values is None) == (self.fn is None):
            raise ValueError("give exactly one of values or fn")
        if self.values is not None:
            v = np.asarray(self.values, dtype=float)
            if v.ndim != 1 or not np.all(np.isfinite(v)):
                raise ValueError("V must be a finite vector")
            if np.any(v < 1.0):
                raise ValueError(f"V must be >= 1, found {v.min()!r}")
            v.setflags(write=False)
            object.__setattr__(self, "values", v)

    @classmethod
    def from_expression(cls, expr: str, n_states: int | None = None) -> "LyapunovCandidate":
        """``expr`` in the variable ``n`` (chain state index) or ``x`` (position)."""
        from .rates import _EXPR_NAMESPACE

        code = compile(expr, "<V>", "eval")
        if n_states is not None:
            n = np.arange(n_states, dtype=float)
            vals = eval(code, {"__builtins__": {}}, {**_EXPR_NAMESPACE, "n": n, "x": n})
            return cls(values=np.broadcast_to(np.asarray(vals, dtype=float), (n_states,)).copy(), label=expr)

        def fn(x):
            x = np.asarray(x, dtype=float)
            return np.broadcast_to(eval(code, {"__builtins__": {}}, {**_EXPR_NAMESPACE, "x": x}), x.shape) * 1.0

        return cls(fn=fn, label=expr)

    def __call__(self, x):
        if self.values is not None:
            return self.values[np.asarray(x, dtype=np.int64)]
        out = np.asarray(self.fn(np.asarray(x, dtype=float)), dtype=float)
        if np.any(out < 1.0):
            raise ValueError("V must be >= 1")
        return out


@dataclass
class DriftCertificate:
    target_set: TargetSet
    K: float
    points: np.ndarray
    generator: np.ndarray
    phi_v: np.ndarray
    residuals: np.ndarray
    passed: bool
    tolerance: float
    bound: object = None
    model_id: str = ""
    rate_label: str = ""
    V: LyapunovCandidate | None = None

    def __bool__(self):
        return self.passed

    def report(self) -> CheckReport:
        i = int(np.argmax(self.residuals))
        bad = np.nonzero(self.residuals > self.tolerance)[0]
        return CheckReport(
            name="subgeometric_drift",
            passed=self.passed,
            margin=float(-self.residuals[i]),
            worst=self.points[i].item(),
            constants={"C": self.target_set.describe(), "K": self.K},
            violations=[{"x": self.points[j].item(), "residual": float(self.residuals[j])} for j in bad[:20]],
        )

    def to_csv(self) -> str:
        in_c = self.target_set.contains(self.points)
        rows = zip(self.points, self.V(self.points) if self.V else self.phi_v, self.generator, self.phi_v,
                   in_c, self.residuals)
        return rows_to_csv(["x", "V", "LV", "phi_V", "in_C", "residual"], rows)

    def write(self, path, extra: dict | None = None):
        """Header comments, residual CSV rows, then the extracted constants."""
        lines = [f"# model: {self.model_id}", f"# phi: {self.rate_label}", f"# tolerance: {fmt(self.tolerance)}"]
        body = self.to_csv()
        consts = {"C": " ".join(fmt(v) for v in self.target_set.describe()), "K": fmt(self.K),
                  "passed": str(self.passed)}
        consts.update({k: fmt(v) for k, v in (extra or {}).items()})
        tail = [f"# {k}: {v}" for k, v in consts.items()]
        Path(path).write_text("\n".join(lines) + "\n" + body + "\n".join(tail) + "\n")


@dataclass
class PsiFunction:
    """A time-space function ``psi(t, x)`` with its constants.

    ``kappa_sup`` bounds ``psi(0, .)`` on C, ``kappa_drift`` is the coefficient
    of ``H^{-1}(t) 1_C`` in the space-time drift bound; ``kappa`` is the larger.
    Monte Carlo sources also expose per-cell standard errors through
    :meth:`moments`.
    """

    source: str
    evaluator: Callable
    kappa_sup: float
    kappa_drift: float
    eta: float
    dt_evaluator: Callable | None = None
    states: tuple | None = None
    moments: Callable | None = None
    t_grid: np.ndarray | None = None
    table: np.ndarray | None = None
    se_table: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def kappa(self) -> float:
        return max(self.kappa_sup, self.kappa_drift)

    def __call__(self, t, x):
        return self.evaluator(float(t), np.asarray(x))

    def dt(self, t, x):
        if self.dt_evaluator is None:
            raise NotImplementedError("no analytic time derivative")
        return self.dt_evaluator(float(t), np.asarray(x))

    def constants(self) -> dict:
        return {"kappa_sup": self.kappa_sup, "kappa_drift": self.kappa_drift, "kappa": self.kappa, "eta": self.eta}


# -- drift checks -----------------------------------------------------------------


def _chain_values(model: Ctmc, V: LyapunovCandidate):
    if V.values is None:
        raise ConfigError("chain drift checks need V as a vector over states")
    v = check_vector(V.values, model.n_states, "V")
    return v, generator_apply(model, v)


def check_geometric_drift(model: Ctmc, V: LyapunovCandidate, C: TargetSet, beta: float, b: float,
                          tolerance: float = 1e-9) -> CheckReport:
    """``(QV)(x) <= -beta V(x) + b 1_C(x)`` at every state."""
    if not (beta > 0 and b > 0):
        raise ValueError("beta and b must be positive")
    v, lv = _chain_values(model, V)
    in_c = C.mask(model.n_states)
    slack = -beta * v + b * in_c - lv
    bad = np.nonzero(slack < -tolerance * np.maximum(1.0, np.abs(v)))[0]
    i = int(np.argmin(slack))
    return CheckReport(
        name="geometric_drift",
        passed=bad.size == 0,
        margin=float(slack[i]),
        worst=i,
        constants={"beta": beta, "b": b, "C": C.describe()},
        violations=[{"x": int(j), "LV": float(lv[j]), "bound": float(-beta * v[j] + b * in_c[j])} for j in bad],
    )


def _auto_target(points, raw, tol, bound, interval):
    viol = raw > tol
    if not np.any(viol):
        viol = raw == raw.max()
    if interval:
        lo, hi = float(points[viol].min()), float(points[viol].max())
        if bound is not None and (lo < bound[0] or hi > bound[1]):
            raise AutoTargetError(f"violating set [{lo:g}, {hi:g}] leaves the bound {tuple(bound)}")
        return TargetSet.of_interval(lo, hi)
    states = points[viol]
    if bound is not None and states.max() > bound:
        raise AutoTargetError(f"violating states reach {int(states.max())} beyond the bound {bound}; "
                              "V is not a Lyapunov function at this truncation")
    return TargetSet.of_states(states)


def _default_bound(model):
    # birth-death truncations: C must stay clear of the cut-off state
    if isinstance(model, Ctmc):
        return int(model.params["N"]) - 1 if "N" in model.params else None
    return None


def check_subgeometric_drift(model, V: LyapunovCandidate, profile: RateProfile, C="auto", K="auto",
                             bound="default", grid=None, h: float = 1e-4, tolerance: float = 1e-9
                             ) -> DriftCertificate:
    """Certificate for ``LV <= -phi(V) + K 1_C``.

    With ``C="auto"`` the target set is every point where ``LV + phi(V) > 0``
    (for diffusions: the interval hull of those grid points); it must stay
    inside ``bound`` (a largest state index, or an interval). With
    ``K="auto"``, ``K`` is the largest ``LV + phi(V)`` over C.
    """
    if bound == "default":
        bound = _default_bound(model)
    if isinstance(model, Ctmc):
        points = np.arange(model.n_states)
        v, lv = _chain_values(model, V)
    elif isinstance(model, Diffusion1d):
        if grid is None:
            raise ConfigError("diffusion drift checks need an evaluation grid")
        points = np.asarray(grid, dtype=float)
        lo, hi = model.domain
        points = points[(points - h >= lo) & (points + h <= hi)]
        v = V(points)
        lv = generator_apply_diffusion(model, V, points, h)
    else:
        raise TypeError(f"unsupported model {model!r}")
    phi_v = np.asarray(profile.phi(v), dtype=float)
    raw = lv + phi_v
    interval = isinstance(model, Diffusion1d)
    if isinstance(C, str):
        if C != "auto":
            raise ConfigError(f"unknown target spec {C!r}")
        C = _auto_target(points, raw, tolerance, bound, interval)
    in_c = C.contains(points)
    if isinstance(K, str):
        if K != "auto":
            raise ConfigError(f"unknown K spec {K!r}")
        K = float(max(raw[in_c].max(), 0.0)) if np.any(in_c) else 0.0
    residuals = raw - K * in_c
    scale = tolerance * np.maximum(1.0, np.abs(lv) + np.abs(phi_v))
    return DriftCertificate(
        target_set=C, K=float(K), points=points, generator=lv, phi_v=phi_v, residuals=residuals,
        passed=bool(np.all(residuals <= scale)), tolerance=tolerance, bound=bound,
        model_id=model.model_id, rate_label=profile.rate.label, V=V,
    )


def max_feasible_alpha(model: Ctmc, V: LyapunovCandidate, scale: float = 1.0, bound="default",
                       lo: float = 1e-3, hi: float = 1.0 - 1e-3, xtol: float = 1e-6) -> float:
    """Largest polynomial exponent for which the auto drift certificate exists.

    Bisects on ``alpha`` for ``phi(v) = scale * v**alpha``; feasibility is
    monotone because ``v**alpha`` increases with ``alpha`` when ``v >= 1``.
    """

    def feasible(a):
        try:
            check_subgeometric_drift(model, V, RateProfile(RateFunction.polynomial(a, scale)), bound=bound)
            return True
        except AutoTargetError:
            return False

    if not feasible(lo):
        raise AutoTargetError(f"no feasible alpha above {lo}")
    if feasible(hi):
        return hi
    while hi - lo > xtol:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo


# -- time-space functions ---------------------------------------------------------


def build_psi_from_v(V: LyapunovCandidate, profile: RateProfile, cert: DriftCertificate) -> PsiFunction:
    """``psi(t, x) = 2 H^{-1}(H(V(x)) + t) - H^{-1}(t)``, with ``kappa`` and ``eta = 2 phi(1)``."""
    if not cert.passed:
        raise ValueError("drift certificate did not pass")
    h_of_v = {}

    def hv(x):
        key = x.tobytes() + str(x.dtype).encode()
        if key not in h_of_v:
            h_of_v[key] = np.asarray(profile.h(V(x)), dtype=float)
        return h_of_v[key]

    def psi(t, x):
        return 2.0 * profile.h_inv(hv(x) + t) - profile.h_inv(t)

    def dpsi(t, x):
        return 2.0 * profile.rate_curve(hv(x) + t) - profile.rate_curve(t)

    in_c = cert.target_set.contains(cert.points)
    kappa_sup = float(np.max(2.0 * V(cert.points[in_c]) - 1.0))
    analytic = profile.method is HInvMethod.CLOSED_FORM
    return PsiFunction(
        source="from_v",
        evaluator=psi,
        dt_evaluator=dpsi if analytic else None,
        kappa_sup=kappa_sup,
        kappa_drift=2.0 * cert.K,
        eta=2.0 * profile.phi1,
        meta={"V": V.label},
    )


def _third_difference(psi, t, x, dt):
    lo = max(t - 2 * dt, 0.0)
    ts = lo + dt * np.arange(5)
    vals = np.array([psi(s, x) for s in ts])
    return np.abs(vals[4] - 2 * vals[3] + 2 * vals[1] - vals[0]) / (2 * dt**3)


def check_condition2(model: Ctmc, psi: PsiFunction, profile: RateProfile, C: TargetSet | None, t_grid,
                     dt: float = 1e-4, states=None, z: float = 3.0, rtol: float = 1e-9) -> CheckReport:
    """Grid check of the space-time drift of ``psi``.

    At each ``(t, x)`` verifies ``(d/dt + L) psi <= kappa H^{-1}(t) 1_C(x) - phi(H^{-1}(t))``,
    then ``psi(0, x) <= kappa`` on C, ``L psi(0, x) <= kappa 1_C(x) - eta``,
    ``psi >= H^{-1}`` and monotonicity in ``t``. ``d/dt`` is analytic when the
    source provides it, otherwise a central difference whose ``O(dt^2)`` error
    is added to the tolerance. Monte Carlo sources add ``z`` standard errors.
    ``states`` restricts the check (all of them must have their neighbours
    evaluable by ``psi``).
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or np.any(np.diff(t_grid) <= 0) or t_grid[0] < 0:
        raise ValueError("t_grid must be increasing and >= 0")
    n = model.n_states
    states = np.arange(n) if states is None else np.asarray(states, dtype=np.int64)
    support = np.arange(n) if psi.states is None else np.asarray(psi.states, dtype=np.int64)
    Q = model.rate_matrix
    cols = np.nonzero(np.any(Q[states] != 0, axis=0))[0]
    cols = np.union1d(cols, states)
    missing = np.setdiff1d(cols, support)
    if missing.size:
        raise ValueError(f"psi is not available at neighbouring states {missing[:10].tolist()}")
    if len(t_grid) > 1 and dt > np.min(np.diff(t_grid)) / 4:
        raise ValueError("dt must be at most a quarter of the grid spacing")
    in_c = np.zeros(n, dtype=bool) if C is None else C.mask(n)
    Qs = Q[np.ix_(states, cols)]
    kappa, eta = psi.kappa, psi.eta
    rows, violations = [], []
    worst, worst_at = -math.inf, None

    def add(clause, t, x, lhs, rhs, tol):
        nonlocal worst, worst_at
        res = lhs - rhs
        if clause == "space_time_drift" and res > worst:
            worst, worst_at = float(res), (float(t), int(x))
        if res > tol:
            violations.append({"clause": clause, "t": float(t), "x": int(x), "lhs": float(lhs),
                               "rhs": float(rhs), "tolerance": float(tol)})
        rows.append((clause, t, int(x), lhs, rhs, tol))

    prev = None
    for t in t_grid:
        vals = np.asarray(psi(t, cols), dtype=float)
        lpsi = Qs @ vals
        own = vals[np.searchsorted(cols, states)]
        if psi.dt_evaluator is not None:
            dpsi = np.asarray(psi.dt(t, states), dtype=float)
            fd_tol = 0.0
        else:
            if t >= dt:
                dpsi = (np.asarray(psi(t + dt, states)) - np.asarray(psi(t - dt, states))) / (2 * dt)
            else:
                # second-order one-sided stencil, psi is undefined for t < 0
                f0, f1, f2 = (np.asarray(psi(t + k * dt, states)) for k in range(3))
                dpsi = (-3.0 * f0 + 4.0 * f1 - f2) / (2 * dt)
            fd_tol = dt**2 / 6.0 * _third_difference(psi, t, states, dt)
        hinv = float(profile.h_inv(t))
        rate = float(profile.rate.phi(hinv))
        rhs = kappa * hinv * in_c[states] - rate
        lhs = dpsi + lpsi
        scale = np.abs(dpsi) + np.abs(Qs) @ np.abs(vals) + np.abs(rhs)
        tol = rtol * scale + 10.0 * fd_tol
        if psi.moments is not None:
            tol = tol + z * _residual_se(psi, t, states, cols, Qs)
        for k, x in enumerate(states):
            add("space_time_drift", t, x, lhs[k], rhs[k], tol[k])
            add("lower_envelope", t, x, hinv, own[k], rtol * hinv)
        if prev is not None:
            for k, x in enumerate(states):
                add("non_decreasing_in_t", t, x, prev[k], own[k], rtol * abs(own[k]))
        prev = own
        if t == t_grid[0] and t == 0.0:
            se0 = np.zeros(len(states))
            if psi.moments is not None:
                se0 = _residual_se(psi, 0.0, states, cols, Qs, lonly=True)
            for k, x in enumerate(states):
                tol0 = rtol * (np.abs(Qs[k]) @ np.abs(vals) + kappa) + z * se0[k]
                add("generator_at_zero", 0.0, x, lpsi[k], kappa * in_c[x] - eta, tol0)
                if in_c[x]:
                    add("sup_on_C", 0.0, x, own[k], kappa, rtol * kappa)

    passed = not violations
    return CheckReport(
        name="condition2",
        passed=passed,
        margin=-worst,
        worst=worst_at,
        constants={**psi.constants(), "worst_residual": worst, "source": psi.source,
                   "n_points": int(len(t_grid) * len(states))},
        violations=violations,
        rows=rows,
    )


def _residual_se(psi, t, states, cols, Qs, lonly=False):
    """Standard error of ``(d/dt + L) psi`` (or of ``L psi`` alone) at ``states``."""
    m = psi.moments(t)
    pos = {int(s): i for i, s in enumerate(psi.states)}
    idx = [pos[int(c)] for c in cols]
    var_h = m["var_h"][idx] / m["n"][idx]
    var_d = m["var_d"][idx] / m["n"][idx]
    cov = m["cov_hd"][idx] / m["n"][idx]
    out = np.empty(len(states))
    for k, x in enumerate(states):
        j = int(np.searchsorted(cols, x))
        q = Qs[k]
        # the own-state term shares samples with d/dt psi; neighbours are independent
        others = np.sum(np.delete(q, j) ** 2 * np.delete(var_h, j))
        if lonly:
            own = q[j] ** 2 * var_h[j]
        else:
            own = var_d[j] + q[j] ** 2 * var_h[j] + 2.0 * q[j] * cov[j]
        out[k] = math.sqrt(max(own + others, 0.0))
    return out
