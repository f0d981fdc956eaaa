"""Concave rate functions phi, the clock H_phi and its inverse.

``H_phi(u) = int_1^u ds / phi(s)`` maps ``[1, inf)`` onto ``[0, inf)``; its
inverse solves ``y' = phi(y), y(0) = 1`` and sets the subgeometric rate
``r(t) = phi(H_phi^{-1}(t))``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, interpolate, optimize

from .errors import ConfigError, DomainError, QuadratureError
from .reports import CheckReport

_QUAD_EPSREL = 1e-11


class HInvMethod(str, enum.Enum):
    CLOSED_FORM = "closed_form"
    ODE = "ode"
    BISECT = "bisect"


@dataclass(frozen=True)
class RateFunction:
    """A rate function ``phi`` on ``[1, inf)`` together with its derivative.

    Build one with :meth:`polynomial`, :meth:`log_smoothed` or :meth:`custom`.
    """

    kind: str
    alpha: float = math.nan
    scale: float = 1.0
    phi_fn: Callable | None = field(default=None, compare=False, repr=False)
    dphi_fn: Callable | None = field(default=None, compare=False, repr=False)
    label: str = ""

    @classmethod
    def polynomial(cls, alpha: float, scale: float = 1.0) -> "RateFunction":
        alpha = float(alpha)
        scale = float(scale)
        if not 0.0 < alpha < 1.0:
            raise ConfigError(f"polynomial rate needs alpha in (0, 1), got {alpha}")
        if not scale > 0.0:
            raise ConfigError(f"polynomial rate needs scale > 0, got {scale}")
        return cls(kind="polynomial", alpha=alpha, scale=scale, label=f"{scale}*x**{alpha}")

    @classmethod
    def log_smoothed(cls) -> "RateFunction":
        return cls(kind="log_smoothed", label="1+log(x)")

    @classmethod
    def custom(cls, phi: Callable, dphi: Callable, label: str = "custom") -> "RateFunction":
        if dphi is None:
            raise ConfigError("custom rate functions must supply their derivative")
        return cls(kind="custom", phi_fn=phi, dphi_fn=dphi, label=label)

    @classmethod
    def from_spec(cls, spec: dict) -> "RateFunction":
        """Parse ``{"kind": "polynomial", "alpha": .5, "scale": 1}`` style dicts."""
        if not isinstance(spec, dict) or "kind" not in spec:
            raise ConfigError(f"rate spec must be a dict with a 'kind': {spec!r}")
        kind = spec["kind"]
        if kind == "polynomial":
            try:
                return cls.polynomial(float(spec["alpha"]), float(spec.get("scale", 1.0)))
            except (KeyError, TypeError, ValueError) as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(f"bad polynomial rate spec {spec!r}") from exc
        if kind == "log_smoothed":
            return cls.log_smoothed()
        if kind == "custom":
            try:
                phi_src, dphi_src = spec["phi"], spec["dphi"]
            except KeyError as exc:
                raise ConfigError("custom rate spec needs 'phi' and 'dphi' expressions in x") from exc
            return cls.custom(_compile_expr(phi_src), _compile_expr(dphi_src), label=phi_src)
        raise ConfigError(f"unknown rate kind {kind!r}")

    def spec(self) -> dict:
        if self.kind == "polynomial":
            return {"kind": "polynomial", "alpha": self.alpha, "scale": self.scale}
        if self.kind == "log_smoothed":
            return {"kind": "log_smoothed"}
        return {"kind": "custom", "label": self.label}

    def phi(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "polynomial":
            return self.scale * x**self.alpha
        if self.kind == "log_smoothed":
            return 1.0 + np.log(x)
        return np.asarray(self.phi_fn(x), dtype=float) * np.ones_like(x)

    def dphi(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "polynomial":
            return self.scale * self.alpha * x ** (self.alpha - 1.0)
        if self.kind == "log_smoothed":
            return 1.0 / x
        return np.asarray(self.dphi_fn(x), dtype=float) * np.ones_like(x)


_EXPR_NAMESPACE = {
    "np": np,
    "log": np.log,
    "exp": np.exp,
    "sqrt": np.sqrt,
    "log1p": np.log1p,
    "e": math.e,
    "pi": math.pi,
}


def _compile_expr(src: str) -> Callable:
    try:
        code = compile(src, "<rate>", "eval")
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse expression {src!r}") from exc
    for name in code.co_names:
        if name != "x" and name not in _EXPR_NAMESPACE:
            raise ConfigError(f"expression {src!r} uses unknown name {name!r}")

    def fn(x):
        return eval(code, {"__builtins__": {}}, {**_EXPR_NAMESPACE, "x": x})

    return fn


def _as_float_or_array(values, like):
    return float(values) if np.ndim(like) == 0 else values


class RateProfile:
    """A rate function bundled with a strategy for evaluating ``H_phi^{-1}``.

    Immutable after construction. With the ODE method the inverse is tabulated
    once, eagerly, as a cubic Hermite spline of ``log H^{-1}`` against
    ``log1p(t)`` whose knot slopes come from ``phi`` itself.
    """

    def __init__(self, rate: RateFunction, h_inv_method=None, tolerance=None, t_max=1e8, n_knots=4097):
        self.rate = rate
        if h_inv_method is None:
            h_inv_method = HInvMethod.CLOSED_FORM if rate.kind == "polynomial" else HInvMethod.ODE
        self.method = HInvMethod(h_inv_method)
        if self.method is HInvMethod.CLOSED_FORM and rate.kind != "polynomial":
            raise ConfigError("closed-form H_phi^{-1} exists only for polynomial rates")
        if tolerance is None:
            tolerance = 1e-8 if self.method is HInvMethod.CLOSED_FORM else 1e-6
        if not tolerance > 0:
            raise ConfigError("tolerance must be positive")
        self.tolerance = float(tolerance)
        self._spline = None
        self._s_max = 0.0
        if self.method is HInvMethod.ODE:
            self._build_spline(float(t_max), int(n_knots))

    def __repr__(self):
        return f"RateProfile({self.rate.label!r}, method={self.method.value}, tol={self.tolerance:g})"

    @property
    def phi1(self) -> float:
        return float(self.rate.phi(1.0))

    def _build_spline(self, t_max, n_knots):
        rate = self.rate

        def rhs(s, g):
            t = math.expm1(s)
            y = math.exp(g[0])
            return [(1.0 + t) * float(rate.phi(y)) / y]

        def blowup(s, g):
            return g[0] - 700.0

        blowup.terminal = True
        s_end = math.log1p(t_max)
        sol = integrate.solve_ivp(
            rhs, (0.0, s_end), [0.0], method="DOP853", rtol=1e-13, atol=1e-13,
            dense_output=True, events=blowup,
        )
        if sol.status < 0:
            raise QuadratureError(f"ODE integration for H_phi^-1 failed: {sol.message}")
        s_end = float(sol.t[-1])
        knots = np.linspace(0.0, s_end, n_knots)
        g = sol.sol(knots)[0]
        g[0] = 0.0
        t = np.expm1(knots)
        y = np.exp(g)
        dg = (1.0 + t) * rate.phi(y) / y
        self._spline = interpolate.CubicHermiteSpline(knots, g, dg)
        self._s_max = s_end

    # -- primitive evaluators -------------------------------------------------

    def phi(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < 1.0) or np.any(np.isnan(x)):
            raise DomainError("phi is defined on [1, inf)")
        return _as_float_or_array(self.rate.phi(x), x)

    def dphi(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < 1.0):
            raise DomainError("phi' is defined on [1, inf)")
        return _as_float_or_array(self.rate.dphi(x), x)

    def h(self, u):
        """``H_phi(u)``: closed form for polynomial rates, adaptive quadrature otherwise."""
        u = np.asarray(u, dtype=float)
        if np.any(u < 1.0) or np.any(np.isnan(u)):
            raise DomainError("H_phi is defined on [1, inf)")
        if self.rate.kind == "polynomial" and self.method is not HInvMethod.BISECT:
            a, c = self.rate.alpha, self.rate.scale
            out = np.expm1((1.0 - a) * np.log(u)) / ((1.0 - a) * c)
        else:
            out = np.vectorize(self._h_quad, otypes=[float])(u)
        return _as_float_or_array(out, u)

    def _h_quad(self, u):
        if u == 1.0:
            return 0.0
        if math.isinf(u):
            return math.inf
        # substitute s = e^v to keep the integrand O(1) over huge ranges
        phi = self.rate.phi

        def integrand(v):
            return math.exp(v) / float(phi(math.exp(v)))

        res = integrate.quad(integrand, 0.0, math.log(u), epsabs=0.0, epsrel=_QUAD_EPSREL, limit=500, full_output=1)
        value, abserr = res[0], res[1]
        if abserr > self.tolerance * 1e-2 * max(abs(value), 1e-300) and abserr > 1e-14:
            raise QuadratureError(f"H_phi({u}) quadrature error {abserr:g} too large")
        return value

    def h_inv(self, t):
        """``H_phi^{-1}(t)`` for ``t >= 0`` using the configured method."""
        t = np.asarray(t, dtype=float)
        if np.any(t < 0.0) or np.any(np.isnan(t)):
            raise DomainError("H_phi^{-1} is defined on [0, inf)")
        if self.method is HInvMethod.CLOSED_FORM:
            out = self._h_inv_closed(t)
        elif self.method is HInvMethod.ODE:
            out = self._h_inv_spline(t)
        else:
            out = np.vectorize(self._h_inv_bisect, otypes=[float])(t)
        return _as_float_or_array(out, t)

    def _h_inv_closed(self, t):
        a, c = self.rate.alpha, self.rate.scale
        with np.errstate(over="ignore"):
            return np.exp(np.log1p((1.0 - a) * c * t) / (1.0 - a))

    def _h_inv_spline(self, t):
        s = np.log1p(t)
        out = np.empty_like(s)
        inside = s <= self._s_max
        with np.errstate(over="ignore"):
            out[inside] = np.exp(self._spline(s[inside]))
        if np.any(~inside):
            out[~inside] = [self._h_inv_bisect(v) for v in t[~inside]]
        return out

    def _h_inv_bisect(self, t):
        if t == 0.0:
            return 1.0
        if math.isinf(t):
            return math.inf

        def f(v):
            return self._h_quad(math.exp(v)) - t

        hi = 1.0
        while f(hi) < 0.0:
            hi *= 2.0
            if hi > 710.0:
                return math.inf
        v = optimize.brentq(f, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
        return math.exp(v)

    def rate_curve(self, t):
        """``r(t) = phi(H_phi^{-1}(t))``, the convergence rate."""
        t = np.asarray(t, dtype=float)
        y = np.asarray(self.h_inv(t), dtype=float)
        out = self.rate.phi(y)
        return _as_float_or_array(out, t)


def make_profile(spec, **kwargs) -> RateProfile:
    """Build a profile from a RateFunction or a config dict."""
    rate = spec if isinstance(spec, RateFunction) else RateFunction.from_spec(spec)
    return RateProfile(rate, **kwargs)


def bundled_rates() -> dict:
    """The rate functions every lemma/property check is run against."""
    return {
        "polynomial_0.3": RateFunction.polynomial(0.3),
        "polynomial_0.5": RateFunction.polynomial(0.5),
        "polynomial_0.7": RateFunction.polynomial(0.7),
        "log_smoothed": RateFunction.log_smoothed(),
    }


# -- operations -----------------------------------------------------------------


def phi_eval(profile: RateProfile, x):
    return profile.phi(x)


def h_phi(profile: RateProfile, u):
    return profile.h(u)


def h_phi_inv(profile: RateProfile, t):
    return profile.h_inv(t)


def rate_curve(profile: RateProfile, times):
    times = np.asarray(times, dtype=float)
    if times.ndim == 1 and np.any(np.diff(times) < 0):
        raise ValueError("times must be non-decreasing")
    return profile.rate_curve(times)


def validate_assumptions(profile: RateProfile, grid, growth_floor: float | None = None) -> CheckReport:
    """Grid check of the standing assumptions on phi.

    Checked: ``phi(x) <= x``, strict increase, strict secant concavity, strict
    decrease of ``phi(x)/x`` and non-decrease of ``phi(x) - x phi'(x)``. The
    "tends to infinity" part is operationalised as the tail value of
    ``phi - x phi'`` exceeding ``growth_floor`` (default: ten times its value
    at the grid head).
    """
    x = np.asarray(grid, dtype=float)
    if x.ndim != 1 or x.size < 3 or np.any(x < 1.0) or np.any(np.diff(x) <= 0):
        raise ValueError("grid must be an increasing list of at least 3 points >= 1")
    rate = profile.rate
    fx = rate.phi(x)
    gap = fx - x * rate.dphi(x)
    ratio = fx / x
    slopes = np.diff(fx) / np.diff(x)
    tol = profile.tolerance
    floor = 10.0 * gap[0] if growth_floor is None else float(growth_floor)

    violations = []

    def record(predicate, idx, detail):
        violations.append({"predicate": predicate, "points": [float(v) for v in x[idx]], "detail": detail})

    for i in np.nonzero(fx > x * (1.0 + tol))[0]:
        record("phi(x) <= x", [i], float(fx[i] - x[i]))
    for i in np.nonzero(np.diff(fx) <= 0)[0]:
        record("strictly increasing", [i, i + 1], float(fx[i + 1] - fx[i]))
    for i in np.nonzero(slopes[:-1] <= slopes[1:])[0]:
        record("strictly concave", [i, i + 1, i + 2], float(slopes[i] - slopes[i + 1]))
    for i in np.nonzero(np.diff(ratio) >= 0)[0]:
        record("phi(x)/x strictly decreasing", [i, i + 1], float(ratio[i + 1] - ratio[i]))
    for i in np.nonzero(np.diff(gap) < -tol * np.maximum(1.0, np.abs(gap[1:])))[0]:
        record("phi - x phi' non-decreasing", [i, i + 1], float(gap[i + 1] - gap[i]))
    if not gap[-1] > floor:
        record("phi - x phi' grows", [x.size - 1], float(gap[-1] - floor))

    margin = float(np.min(x - fx))
    return CheckReport(
        name="validate_assumptions",
        passed=not violations,
        margin=margin,
        worst=violations[0]["points"] if violations else float(x[np.argmin(x - fx)]),
        constants={"growth_floor": float(floor), "tail_phi_minus_x_dphi": float(gap[-1])},
        violations=violations,
        rows=[(float(a), float(b), float(c), float(d)) for a, b, c, d in zip(x, fx, ratio, gap)],
    )


def _ratio_report(name, lhs, rhs, tol, where):
    # holds iff lhs <= rhs * (1 + tol); margin is the relative slack
    with np.errstate(invalid="ignore", divide="ignore"):
        slack = (rhs * (1.0 + tol) - lhs) / rhs
    bad = np.nonzero(~(slack >= 0))[0]
    i = int(np.argmin(slack)) if slack.size else 0
    return CheckReport(
        name=name,
        passed=bad.size == 0,
        margin=float(slack[i]) if slack.size else math.inf,
        worst=where[i] if slack.size else None,
        violations=[{"at": where[j], "lhs": float(lhs[j]), "rhs": float(rhs[j])} for j in bad[:20]],
        constants={"n_checked": int(slack.size), "n_violations": int(bad.size)},
    )


def check_submultiplicative(profile: RateProfile, pairs) -> CheckReport:
    """``H^{-1}(s+t) <= H^{-1}(s) H^{-1}(t)`` on every ``(s, t)`` pair."""
    pairs = np.asarray(pairs, dtype=float).reshape(-1, 2)
    if pairs.shape[0] == 0:
        raise ValueError("pairs must be non-empty")
    s, t = pairs[:, 0], pairs[:, 1]
    lhs = np.asarray(profile.h_inv(s + t), dtype=float)
    rhs = np.asarray(profile.h_inv(s), dtype=float) * np.asarray(profile.h_inv(t), dtype=float)
    where = [(float(a), float(b)) for a, b in pairs]
    return _ratio_report("check_submultiplicative", lhs, rhs, profile.tolerance, where)


def check_scaling(profile: RateProfile, samples) -> CheckReport:
    """``phi(k x) <= k phi(x)`` for ``x >= 1``, ``k >= 1``."""
    samples = np.asarray(samples, dtype=float).reshape(-1, 2)
    if samples.shape[0] == 0:
        raise ValueError("samples must be non-empty")
    x, k = samples[:, 0], samples[:, 1]
    if np.any(k < 1.0):
        raise DomainError("scaling factors must be >= 1")
    lhs = np.asarray(profile.phi(k * x), dtype=float)
    rhs = k * np.asarray(profile.phi(x), dtype=float)
    where = [(float(a), float(b)) for a, b in samples]
    return _ratio_report("check_scaling", lhs, rhs, profile.tolerance, where)


# -- property checks used by the CLI ------------------------------------------------


def check_round_trip(profile: RateProfile, us=None, factor: float = 10.0) -> CheckReport:
    """``H^{-1}(H(u)) = u`` to ``factor * tolerance`` relative."""
    if us is None:
        us = np.logspace(0, 6, 61)
    us = np.asarray(us, dtype=float)
    back = np.asarray(profile.h_inv(profile.h(us)), dtype=float)
    err = np.abs(back - us) / us
    bound = factor * profile.tolerance
    i = int(np.argmax(err))
    bad = np.nonzero(err > bound)[0]
    return CheckReport(
        name="round_trip",
        passed=bad.size == 0,
        margin=float(bound - err[i]),
        worst=float(us[i]),
        constants={"max_rel_error": float(err[i]), "bound": bound},
        violations=[{"u": float(us[j]), "rel_error": float(err[j])} for j in bad[:20]],
    )


def check_derivative_identity(profile: RateProfile, ts=None, step: float = 1e-4, rtol: float = 1e-4) -> CheckReport:
    """Finite-difference slope of ``H^{-1}`` against ``phi(H^{-1})``."""
    if ts is None:
        ts = np.linspace(0.0, 50.0, 101)
    ts = np.asarray(ts, dtype=float)
    hi = np.asarray(profile.h_inv(ts + step), dtype=float)
    lo_t = np.maximum(ts - step, 0.0)
    lo = np.asarray(profile.h_inv(lo_t), dtype=float)
    fd = (hi - lo) / (ts + step - lo_t)
    exact = np.asarray(profile.rate_curve(ts), dtype=float)
    # one-sided difference at t = 0 carries an O(step) bias
    one_sided = ts < step
    fd[one_sided] = (hi[one_sided] - np.asarray(profile.h_inv(ts[one_sided]), dtype=float)) / step
    exact[one_sided] = np.asarray(profile.rate_curve(ts[one_sided] + step / 2), dtype=float)
    err = np.abs(fd - exact) / exact
    i = int(np.argmax(err))
    bad = np.nonzero(err > rtol)[0]
    return CheckReport(
        name="derivative_identity",
        passed=bad.size == 0,
        margin=float(rtol - err[i]),
        worst=float(ts[i]),
        constants={"max_rel_error": float(err[i])},
        violations=[{"t": float(ts[j]), "rel_error": float(err[j])} for j in bad[:20]],
    )


def check_growth_envelope(profile: RateProfile, ts=None) -> CheckReport:
    """``H^{-1}(t) <= e^t`` (compared in log space)."""
    if ts is None:
        ts = np.concatenate([np.linspace(0.0, 10.0, 41), np.logspace(1, 6, 26)])
    ts = np.asarray(ts, dtype=float)
    log_h = np.log(np.asarray(profile.h_inv(ts), dtype=float))
    slack = ts * (1.0 + profile.tolerance) - log_h
    bad = np.nonzero(slack < 0)[0]
    i = int(np.argmin(slack))
    return CheckReport(
        name="growth_envelope",
        passed=bad.size == 0,
        margin=float(slack[i]),
        worst=float(ts[i]),
        violations=[{"t": float(ts[j])} for j in bad[:20]],
    )


def check_subexponential(profile: RateProfile, ks=range(3, 21)) -> CheckReport:
    """``log r(t_k) / t_k`` at ``t_k = 2^k`` decreases and heads to zero."""
    tk = 2.0 ** np.asarray(list(ks), dtype=float)
    seq = np.log(np.asarray(profile.rate_curve(tk), dtype=float)) / tk
    steps = np.diff(seq)
    bad = np.nonzero(steps > 0)[0]
    small_tail = seq[-1] < seq[0] / 10.0
    violations = [{"k": int(list(ks)[j + 1]), "increase": float(steps[j])} for j in bad]
    if not small_tail:
        violations.append({"tail": float(seq[-1]), "head": float(seq[0])})
    return CheckReport(
        name="subexponential_rate",
        passed=not violations,
        margin=float(-steps.max()) if steps.size else math.inf,
        constants={"sequence": seq.tolist()},
        violations=violations,
    )


def is_subexponential_rate(profile: RateProfile) -> bool:
    return check_subexponential(profile).passed
