"""Randomized occupation-time hitting clocks and their Monte Carlo estimators.

The clock fires at ``tau = inf{t : occupation_C(t) >= T / r}`` with
``T ~ Exp(1)`` drawn independently of the path. Path ``i`` of any estimator
uses the counter-based substream ``(master_seed, i)``, so results do not depend
on how paths are split across workers.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import _kernels
from ._rng import exponentials
from ._validation import check_state
from .drift import PsiFunction
from .errors import ConfigError, TailBoundError, UnreliableEstimate
from .models import Ctmc, Diffusion1d, TargetSet
from .rates import RateProfile
from .reports import CheckReport, fmt

# occupation (in units of 1/r) after which exp(-r * occupation) is negligible
_DISCOUNT_CUTOFF = 40.0
# Gauss-Legendre rules keyed by the largest r * length they are used for
_GL_RULES = [(2.0, np.polynomial.legendre.leggauss(8)), (8.0, np.polynomial.legendre.leggauss(16)),
             (math.inf, np.polynomial.legendre.leggauss(32))]


class _Censored:
    """Returned when the clock did not fire before the horizon cap."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "Censored"

    def __bool__(self):
        return False


Censored = _Censored()


@dataclass(frozen=True)
class HittingSampler:
    model: Ctmc | Diffusion1d
    target: TargetSet
    r: float = 1.0
    horizon_cap: float = 1e4
    master_seed: int = 0
    jobs: int = 1
    unreliable_threshold: float = 1e-3

    def __post_init__(self):
        if not self.r > 0:
            raise ConfigError(f"r must be positive, got {self.r}")
        if not self.horizon_cap > 0:
            raise ConfigError("horizon_cap must be positive")
        if not 0 <= int(self.master_seed) < 2**64:
            raise ConfigError("master_seed must fit in 64 bits")
        if int(self.jobs) < 1:
            raise ConfigError("jobs must be >= 1")
        if isinstance(self.model, Ctmc) and self.target.is_interval:
            raise ConfigError("chain targets must be state sets")
        if isinstance(self.model, Diffusion1d) and not self.target.is_interval:
            raise ConfigError("diffusion targets must be intervals")

    def with_r(self, r: float) -> "HittingSampler":
        return HittingSampler(self.model, self.target, r, self.horizon_cap, self.master_seed, self.jobs,
                              self.unreliable_threshold)


@dataclass(frozen=True)
class MomentEstimate:
    mean: float
    std_error: float
    n_paths: int
    censored_fraction: float
    threshold: float = 1e-3

    @property
    def unreliable(self) -> bool:
        return self.censored_fraction > self.threshold

    @classmethod
    def from_samples(cls, values, censored, threshold=1e-3) -> "MomentEstimate":
        values = np.asarray(values, dtype=float)
        n = values.size
        se = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf
        return cls(float(values.mean()), se, n, float(np.mean(censored)), threshold)


@dataclass
class OccupationRun:
    """Raw output of a batch of paths.

    ``rec_*`` list the maximal intervals ``[a, b]`` spent in C, in path order,
    with ``rec_occ`` the occupation at ``a``.
    """

    clock_time: np.ndarray
    stop_time: np.ndarray
    censored: np.ndarray
    rec_path: np.ndarray
    rec_a: np.ndarray
    rec_b: np.ndarray
    rec_occ: np.ndarray

    def total_occupation(self, n):
        return np.bincount(self.rec_path, weights=self.rec_b - self.rec_a, minlength=n)


def run_occupation(model, target: TargetSet, x0, seed: int, n: int, clock=None, occ_stop=None,
                   time_stop: float = 0.0, horizon: float = 1e4, keep: bool = False, jobs: int = 1,
                   first_path: int = 0) -> OccupationRun:
    """Simulate ``n`` paths from ``x0`` with the shared stopping rule.

    Each path stops at the first time its occupation of C is at least
    ``occ_stop[i]``, the time is at least ``time_stop`` and the path is in C;
    ``clock_time[i]`` is the first time the occupation reaches ``clock[i]``.
    Paths are split into ``jobs`` contiguous chunks and reassembled in order.
    """
    n = int(n)
    clock = np.full(n, np.inf) if clock is None else np.ascontiguousarray(clock, dtype=float)
    occ_stop = np.full(n, np.inf) if occ_stop is None else np.ascontiguousarray(occ_stop, dtype=float)
    seed = np.uint64(seed)
    if isinstance(model, Ctmc):
        x0 = check_state(x0, model.n_states)
        in_c = target.mask(model.n_states)

        def work(lo, hi):
            return _kernels.chain_occupation(*model.kernel_args, in_c, x0, seed, first_path + lo, hi - lo,
                                             clock[lo:hi], occ_stop[lo:hi], float(time_stop), float(horizon), keep)
    else:
        dlo, dhi = model.domain
        if not dlo <= x0 <= dhi:
            raise ConfigError(f"x0={x0} outside the domain {model.domain}")
        occupation, _ = model.kernels
        c_lo, c_hi = target.interval

        def work(lo, hi):
            return occupation(float(x0), model.step, dlo, dhi, c_lo, c_hi, seed, first_path + lo, hi - lo,
                              clock[lo:hi], occ_stop[lo:hi], float(time_stop), float(horizon), keep)

    bounds = np.linspace(0, n, min(int(jobs), max(n, 1)) + 1).astype(int)
    chunks = list(zip(bounds[:-1], bounds[1:]))
    if len(chunks) == 1:
        parts = [work(*chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(lambda c: work(*c), chunks))
    rec_path = np.concatenate([p[3] + lo for p, (lo, _) in zip(parts, chunks)])
    rec_a = np.concatenate([p[4] for p in parts])
    rec_b = np.concatenate([p[5] for p in parts])
    # occupation at the start of each record: exclusive cumsum restarted per path
    lengths = rec_b - rec_a
    csum = np.cumsum(lengths) - lengths
    first = np.ones(len(rec_path), dtype=bool)
    first[1:] = rec_path[1:] != rec_path[:-1]
    base = csum[np.maximum.accumulate(np.where(first, np.arange(len(rec_path)), 0))]
    return OccupationRun(
        clock_time=np.concatenate([p[0] for p in parts]),
        stop_time=np.concatenate([p[1] for p in parts]),
        censored=np.concatenate([p[2] for p in parts]),
        rec_path=rec_path, rec_a=rec_a, rec_b=rec_b, rec_occ=csum - base,
    )


def _clock_variates(sampler: HittingSampler, n: int, first_path: int = 0):
    return exponentials(sampler.master_seed, np.arange(first_path, first_path + n, dtype=np.uint64))


# -- randomized hitting times -----------------------------------------------------


def sample_randomized_hitting_batch(sampler: HittingSampler, x0, n_paths: int, first_path: int = 0):
    """``tau`` for paths ``first_path ..``; censored paths are ``inf``.

    Returns ``(tau, T)`` with ``T`` the clock variates.
    """
    T = _clock_variates(sampler, n_paths, first_path)
    thr = T / sampler.r
    run = run_occupation(sampler.model, sampler.target, x0, sampler.master_seed, n_paths, clock=thr,
                         occ_stop=thr, horizon=sampler.horizon_cap, jobs=sampler.jobs, first_path=first_path)
    return run.clock_time, T


def sample_randomized_hitting(sampler: HittingSampler, x0, path: int = 0):
    """One draw of ``tau`` from substream ``path``, or ``Censored``."""
    tau, _ = sample_randomized_hitting_batch(sampler, x0, 1, first_path=path)
    return Censored if math.isinf(tau[0]) else float(tau[0])


def _h_inv_capped(profile, times, cap):
    return np.asarray(profile.h_inv(np.where(np.isinf(times), cap, times)), dtype=float)


def estimate_hitting_moment(sampler: HittingSampler, x0, profile: RateProfile, n_paths: int,
                            first_path: int = 0) -> MomentEstimate:
    """Monte Carlo ``E_x[H^{-1}(tau)]``; censored paths count as ``H^{-1}(horizon_cap)``."""
    if n_paths < 100:
        raise ConfigError("n_paths must be >= 100")
    tau, _ = sample_randomized_hitting_batch(sampler, x0, n_paths, first_path)
    values = _h_inv_capped(profile, tau, sampler.horizon_cap)
    return MomentEstimate.from_samples(values, np.isinf(tau), sampler.unreliable_threshold)


# -- the occupation identity ------------------------------------------------------


@dataclass(frozen=True)
class ProbeFunction:
    """Non-decreasing ``f`` with ``f(0) = 0``; ``discounted`` optionally gives
    ``int_0^L exp(-r u) f'(a + u) du`` in closed form."""

    name: str
    f: Callable
    df: Callable
    discounted: Callable | None = None


def _disc_linear(a, length, r):
    return -np.expm1(-r * length) / r


def _disc_exp(a, length, r):
    return np.exp(-a) * -np.expm1(-(r + 1.0) * length) / (r + 1.0)


def probe_function(spec, profile: RateProfile | None = None) -> ProbeFunction:
    """Resolve ``"s"``, ``"one_minus_exp"``, ``"h_inv_minus_one"`` or ``"zero"``."""
    if isinstance(spec, ProbeFunction):
        return spec
    if spec == "s":
        return ProbeFunction("s", lambda s: np.asarray(s, dtype=float), lambda s: np.ones_like(s, dtype=float),
                             _disc_linear)
    if spec == "one_minus_exp":
        return ProbeFunction("one_minus_exp", lambda s: -np.expm1(-np.asarray(s, dtype=float)),
                             lambda s: np.exp(-np.asarray(s, dtype=float)), _disc_exp)
    if spec == "zero":
        return ProbeFunction("zero", lambda s: np.zeros_like(s, dtype=float), lambda s: np.zeros_like(s, dtype=float),
                             lambda a, length, r: np.zeros_like(a))
    if spec == "h_inv_minus_one":
        if profile is None:
            raise ConfigError("h_inv_minus_one needs a rate profile")
        return ProbeFunction("h_inv_minus_one", lambda s: np.asarray(profile.h_inv(s)) - 1.0,
                             lambda s: np.asarray(profile.rate_curve(s)))
    raise ConfigError(f"unknown test function {spec!r}")


def _gauss(fn, a, b, decay=None):
    """Vectorised Gauss-Legendre on each ``[a_k, b_k]``.

    ``fn(s, k)`` receives nodes of shape ``(m, nodes)`` and the row indices
    ``k``. ``decay * (b - a)`` (default 32 nodes everywhere) selects fewer
    nodes for short exponentially damped intervals.
    """
    out = np.zeros(len(a))
    if decay is None:
        groups = [(np.arange(len(a)), _GL_RULES[-1][1])]
    else:
        width = decay * (b - a)
        groups, lower = [], -math.inf
        for upper, rule in _GL_RULES:
            groups.append((np.nonzero((width > lower) & (width <= upper))[0], rule))
            lower = upper
    for k, (nodes, weights) in groups:
        if k.size == 0:
            continue
        half = 0.5 * (b[k] - a[k])
        s = 0.5 * (b[k] + a[k])[:, None] + half[:, None] * nodes[None, :]
        out[k] = half * (fn(s, k) @ weights)
    return out


def discounted_integral(run: OccupationRun, n: int, f: ProbeFunction, r: float, horizon: float, rho: float = 0.0):
    """Per path ``int_0^end exp(-r occ(s) - rho s^2) f'(s) ds`` over the simulated stretch.

    Outside C the occupation is frozen, so with ``rho = 0`` those stretches
    contribute ``exp(-r occ) (f(b) - f(a))`` exactly. Inside C the integrand
    decays like ``exp(-r s)``; it is integrated in closed form when available
    and by Gauss-Legendre otherwise, cut where the discount drops below
    ``exp(-40)``.
    """
    p, a, b, o = run.rec_path, run.rec_a, run.rec_b, run.rec_occ
    out = np.zeros(n)
    same = np.zeros(len(p), dtype=bool)
    same[1:] = p[1:] == p[:-1]
    gap_lo = np.where(same, np.roll(b, 1), 0.0)
    s_cut = math.sqrt(_DISCOUNT_CUTOFF / rho) if rho > 0 else math.inf
    # stretches outside C before each in-C interval
    if rho == 0.0:
        gap = np.exp(-r * o) * (f.f(a) - f.f(gap_lo))
    else:
        lo, hi = np.minimum(gap_lo, s_cut), np.minimum(a, s_cut)
        gap = np.exp(-r * o) * _gauss(lambda s, k: f.df(s) * np.exp(-rho * s * s), lo, hi)
    np.add.at(out, p, gap)
    # in-C stretches
    length = np.minimum(b - a, _DISCOUNT_CUTOFF / r)
    if rho == 0.0 and f.discounted is not None:
        inner = f.discounted(a, length, r)
    else:
        lo, hi = np.minimum(a, s_cut), np.minimum(a + length, s_cut)
        decay = r + 2.0 * rho * hi
        inner = _gauss(lambda s, k: f.df(s) * np.exp(-r * (s - lo[k, None]) - rho * s * s), lo, hi, decay)
    np.add.at(out, p, np.exp(-r * o) * inner)
    # a censored path may end outside C: add its final stretch
    cens = np.nonzero(run.censored)[0]
    if cens.size:
        occ_total = run.total_occupation(n)
        last_b = np.zeros(n)
        if len(p):
            ends = np.ones(len(p), dtype=bool)
            ends[:-1] = p[1:] != p[:-1]
            last_b[p[ends]] = b[ends]
        tail_lo = last_b[cens]
        tail = np.full(cens.size, float(horizon))
        if rho == 0.0:
            add = f.f(tail) - f.f(tail_lo)
        else:
            add = _gauss(lambda s, k: f.df(s) * np.exp(-rho * s * s), np.minimum(tail_lo, s_cut), np.minimum(tail, s_cut))
        out[cens] += np.exp(-r * occ_total[cens]) * np.where(tail > tail_lo, add, 0.0)
    return out


def _discounted_run(sampler, x0, n_paths, first_path=0):
    T = _clock_variates(sampler, n_paths, first_path)
    thr = T / sampler.r
    stop = np.maximum(T, _DISCOUNT_CUTOFF) / sampler.r
    run = run_occupation(sampler.model, sampler.target, x0, sampler.master_seed, n_paths, clock=thr, occ_stop=stop,
                         horizon=sampler.horizon_cap, keep=True, jobs=sampler.jobs, first_path=first_path)
    return run, T


def occupation_identity_check(sampler: HittingSampler, x0, f_spec, n_paths: int, profile: RateProfile | None = None,
                              z: float = 3.0) -> CheckReport:
    """Compare ``E[f(tau)]`` with ``E int_0^inf exp(-r occ(s)) f'(s) ds`` on shared paths.

    ``f_spec`` may be a single test function or a list; every function reuses
    the same simulated paths. Passes iff each paired difference is within
    ``z`` standard errors and censoring stays below the threshold.
    """
    specs = f_spec if isinstance(f_spec, (list, tuple)) else [f_spec]
    fns = [probe_function(s, profile) for s in specs]
    run, _ = _discounted_run(sampler, x0, n_paths)
    tau = np.where(np.isinf(run.clock_time), sampler.horizon_cap, run.clock_time)
    cens = float(np.mean(np.isinf(run.clock_time)))
    rows, violations = [], []
    margin = math.inf
    for fn in fns:
        left = np.asarray(fn.f(tau), dtype=float)
        right = discounted_integral(run, n_paths, fn, sampler.r, sampler.horizon_cap)
        d = left - right
        diff = float(d.mean())
        se = float(d.std(ddof=1) / math.sqrt(n_paths))
        se_l = float(left.std(ddof=1) / math.sqrt(n_paths))
        se_r = float(right.std(ddof=1) / math.sqrt(n_paths))
        allowed = z * se + 1e-12 * max(1.0, abs(float(left.mean())))
        ok = abs(diff) <= allowed and cens <= sampler.unreliable_threshold
        margin = min(margin, allowed - abs(diff))
        row = {"f": fn.name, "left": float(left.mean()), "left_se": se_l, "right": float(right.mean()),
               "right_se": se_r, "difference": diff, "difference_se": se, "censored_fraction": cens}
        rows.append(row)
        if not ok:
            violations.append(row)
    return CheckReport(
        name="occupation_identity",
        passed=not violations,
        margin=margin,
        worst=min(rows, key=lambda r: z * r["difference_se"] - abs(r["difference"]))["f"],
        constants={"model": sampler.model.model_id, "x0": x0, "r": sampler.r, "n_paths": n_paths},
        violations=violations,
        rows=rows,
    )


# -- psi from hitting times ----------------------------------------------------------


def psi_via_hitting(sampler: HittingSampler, profile: RateProfile, t_grid, states, n_paths: int,
                    z: float = 3.0, form: str = "expectation") -> PsiFunction:
    """Space-time function built from ``n_paths`` clock samples per state.

    Parameters
    ----------
    form : {"expectation", "doubled"}
        ``"expectation"`` tabulates ``m(t, x) = E_x[H^{-1}(tau + t)]`` with
        ``kappa_sup`` the largest ``m(0, .)`` over C plus ``z`` standard errors,
        ``kappa_drift = r * kappa_sup`` and ``eta = phi(1)``. Off C this ``m``
        is space-time harmonic, so it cannot meet the strict drift inequality
        there. ``"doubled"`` returns ``2 m - H^{-1}(t)``, which does: its
        space-time drift is ``2 r 1_C (m - H^{-1}(t)) - phi(H^{-1}(t))``, giving
        ``kappa_drift = r * (kappa_sup - 1)`` and ``eta = 2 phi(1)``.

    Notes
    -----
    States use disjoint blocks of path indices so their estimates are
    independent. The per-sample variance of the chosen form is carried into
    ``moments`` for the standard errors of downstream checks.
    """
    if form not in ("expectation", "doubled"):
        raise ConfigError(f"unknown psi form {form!r}")
    scale, offset = (1.0, 0.0) if form == "expectation" else (2.0, 1.0)
    states = tuple(int(s) for s in states)
    samples = {}
    censored = {}
    for k, x in enumerate(states):
        tau, _ = sample_randomized_hitting_batch(sampler, x, n_paths, first_path=k * n_paths)
        censored[x] = float(np.mean(np.isinf(tau)))
        samples[x] = np.where(np.isinf(tau), sampler.horizon_cap, tau)
    in_c = sampler.target.contains(np.array(states))
    bad = [x for x, c in zip(states, in_c) if c and censored[x] > sampler.unreliable_threshold]
    if bad:
        raise UnreliableEstimate(f"censored fraction above threshold at target states {bad}")
    if not np.any(in_c):
        raise ConfigError("psi_via_hitting needs at least one state of C")
    pos = {x: i for i, x in enumerate(states)}
    cache = {}

    def moments(t):
        if t not in cache:
            if len(cache) > 4096:
                cache.clear()
            n = np.empty(len(states))
            m_h, m_d, v_h, v_d, c_hd = (np.empty(len(states)) for _ in range(5))
            for i, x in enumerate(states):
                h = np.asarray(profile.h_inv(samples[x] + t), dtype=float)
                d = np.asarray(profile.rate.phi(h), dtype=float)
                if offset:
                    h_t = float(profile.h_inv(t))
                    h, d = scale * h - offset * h_t, scale * d - offset * float(profile.rate.phi(h_t))
                n[i] = h.size
                m_h[i], m_d[i] = h.mean(), d.mean()
                cov = np.cov(h, d)
                v_h[i], v_d[i], c_hd[i] = cov[0, 0], cov[1, 1], cov[0, 1]
            cache[t] = {"n": n, "mean_h": m_h, "mean_d": m_d, "var_h": v_h, "var_d": v_d, "cov_hd": c_hd}
        return cache[t]

    def index(x):
        try:
            return np.array([pos[int(v)] for v in np.atleast_1d(x)])
        except KeyError as exc:
            raise ValueError(f"psi was not sampled at state {exc.args[0]}") from None

    def evaluator(t, x):
        out = moments(t)["mean_h"][index(x)]
        return out if np.ndim(x) else float(out[0])

    def dt_evaluator(t, x):
        out = moments(t)["mean_d"][index(x)]
        return out if np.ndim(x) else float(out[0])

    t_grid = np.asarray(t_grid, dtype=float)
    table = np.array([moments(float(t))["mean_h"] for t in t_grid])
    se_table = np.sqrt(np.array([moments(float(t))["var_h"] / moments(float(t))["n"] for t in t_grid]))
    cache.clear()
    m0 = moments(0.0)
    se0 = np.sqrt(m0["var_h"] / m0["n"])
    kappa_sup = float(np.max((m0["mean_h"] + z * se0)[in_c]))
    return PsiFunction(
        source="from_hitting",
        evaluator=evaluator,
        dt_evaluator=dt_evaluator,
        kappa_sup=kappa_sup,
        kappa_drift=sampler.r * (kappa_sup - offset),
        eta=scale * profile.phi1,
        states=states,
        moments=moments,
        t_grid=t_grid,
        table=table,
        se_table=se_table,
        meta={"r": sampler.r, "n_paths": n_paths, "censored_fraction": censored, "form": form},
    )


def check_psi_envelope(psi: PsiFunction, profile: RateProfile, z: float = 3.0) -> CheckReport:
    """Tabulated cells satisfy ``H^{-1}(t) <= psi(t, x) <= H^{-1}(t) psi(0, x) + z SE``."""
    if psi.table is None:
        raise ValueError("psi has no table")
    h = np.asarray(profile.h_inv(psi.t_grid), dtype=float)[:, None]
    psi0 = np.asarray(psi(0.0, list(psi.states)), dtype=float)[None, :]
    upper = h * psi0 + z * psi.se_table - psi.table
    lower = psi.table - h * (1.0 - 1e-12)
    slack = np.minimum(upper, lower)
    i, j = np.unravel_index(np.argmin(slack), slack.shape)
    bad = np.argwhere(slack < 0)
    return CheckReport(
        name="psi_envelope", passed=bad.size == 0, margin=float(slack[i, j]),
        worst=(float(psi.t_grid[i]), psi.states[j]),
        violations=[{"t": float(psi.t_grid[a]), "x": psi.states[b]} for a, b in bad[:20]],
    )


# -- quantitative bounds ------------------------------------------------------------


def _sampler_for(model, C, seed, horizon_cap, jobs, r=1.0, threshold=1e-3):
    return HittingSampler(model, C, r, horizon_cap, seed, jobs, threshold)


def sample_tau1_batch(model, x0, C: TargetSet, kappa: float, n_paths: int, seed: int = 0,
                      horizon_cap: float = 1e4, jobs: int = 1, first_path: int = 0):
    """Deterministic-threshold clock: first time the occupation of C reaches ``1/(2 kappa)``."""
    if not kappa > 0:
        raise ConfigError("kappa must be positive")
    thr = np.full(n_paths, 1.0 / (2.0 * kappa))
    run = run_occupation(model, C, x0, seed, n_paths, clock=thr, occ_stop=thr, horizon=horizon_cap, jobs=jobs,
                         first_path=first_path)
    return run.clock_time


def sample_tau1(model, x0, C: TargetSet, kappa: float, path: int = 0, seed: int = 0, horizon_cap: float = 1e4):
    tau = sample_tau1_batch(model, x0, C, kappa, 1, seed, horizon_cap, first_path=path)
    return Censored if math.isinf(tau[0]) else float(tau[0])


def _tau1_estimates(model, C, psi, profile, states, n_paths, seed, horizon_cap, jobs, threshold):
    out = {}
    for x in states:
        tau = sample_tau1_batch(model, x, C, psi.kappa, n_paths, seed, horizon_cap, jobs)
        out[x] = MomentEstimate.from_samples(_h_inv_capped(profile, tau, horizon_cap), np.isinf(tau), threshold)
    return out


def _bound_report(name, estimates, bounds, z, extra=None):
    rows, violations = [], []
    margin, worst = math.inf, None
    for x, est in estimates.items():
        slack = bounds[x] + z * est.std_error - est.mean
        row = {"x": x, "mean": est.mean, "std_error": est.std_error, "bound": bounds[x],
               "censored_fraction": est.censored_fraction, "n_paths": est.n_paths}
        rows.append(row)
        if slack < margin:
            margin, worst = slack, x
        if slack < 0 or est.unreliable:
            violations.append(row)
    return CheckReport(name=name, passed=not violations, margin=margin, worst=worst, constants=dict(extra or {}),
                       violations=violations, rows=rows)


def check_step1_bound(model, C: TargetSet, psi: PsiFunction, profile: RateProfile, states, n_paths: int,
                      seed: int = 0, horizon_cap: float = 1e4, jobs: int = 1, z: float = 3.0,
                      threshold: float = 1e-3) -> CheckReport:
    """``E_x[H^{-1}(tau1)] <= 2 psi(0, x)`` at each state, within ``z`` SE."""
    est = _tau1_estimates(model, C, psi, profile, states, n_paths, seed, horizon_cap, jobs, threshold)
    bounds = {x: 2.0 * float(psi(0.0, x)) for x in states}
    return _bound_report("step1_bound", est, bounds, z, {"kappa": psi.kappa})


def step3_quantity(model, C, psi, profile, r, states, n_paths, seed=0, horizon_cap=1e4, jobs=1, threshold=1e-3):
    """``E_x[exp(-r / (2 kappa)) H^{-1}(tau1)]`` per state."""
    factor = math.exp(-r / (2.0 * psi.kappa))
    est = _tau1_estimates(model, C, psi, profile, states, n_paths, seed, horizon_cap, jobs, threshold)
    return {x: MomentEstimate(factor * e.mean, factor * e.std_error, e.n_paths, e.censored_fraction, e.threshold)
            for x, e in est.items()}


def check_step3_gate(model, C: TargetSet, psi: PsiFunction, profile: RateProfile, r: float, n_paths: int,
                     seed: int = 0, horizon_cap: float = 1e4, jobs: int = 1, z: float = 3.0) -> CheckReport:
    """``sup_{x in C} E_x[exp(-r / (2 kappa)) H^{-1}(tau1)] <= 1/2`` within ``z`` SE."""
    states = list(C.states)
    est = step3_quantity(model, C, psi, profile, r, states, n_paths, seed, horizon_cap, jobs)
    return _bound_report("step3_gate", est, {x: 0.5 for x in states}, z, {"r": r, "kappa": psi.kappa})


def calibrate_r(model, C: TargetSet, psi: PsiFunction, profile: RateProfile, n_paths: int = 10_000,
                tighten: bool = False, seed: int = 0, horizon_cap: float = 1e4, jobs: int = 1,
                rel_tol: float = 1e-2) -> float:
    """The sufficient rate ``r0 = 2 kappa ln(4 kappa)``.

    With ``tighten=True`` the Monte Carlo gate is bisected downwards and the
    smallest rate at which it still holds is returned.
    """
    kappa = psi.kappa
    r0 = 2.0 * kappa * math.log(4.0 * kappa)
    if not tighten:
        return r0

    def holds(r):
        return check_step3_gate(model, C, psi, profile, r, n_paths, seed, horizon_cap, jobs).passed

    if not holds(r0):
        return r0
    lo, hi = 0.0, r0
    while hi - lo > rel_tol * r0:
        mid = 0.5 * (lo + hi)
        if holds(mid):
            hi = mid
        else:
            lo = mid
    return hi


def estimate_A_functional(model, x0, C: TargetSet, r: float, rho: float, profile: RateProfile, n_paths: int,
                          s_horizon: float = 1e4, seed: int = 0, jobs: int = 1, tail_tol: float = 1e-6,
                          threshold: float = 1e-3) -> MomentEstimate:
    """``E_x int_0^inf exp(-r occ(s)) (H^{-1})'(s) exp(-rho s^2) ds``.

    Paths run until the discount falls below ``exp(-40)`` or ``s_horizon``.
    The neglected remainder of a path stopped at ``e`` is at most
    ``exp(-r occ(e)) H^{-1}(e) (1 + A)`` by submultiplicativity; a
    :class:`TailBoundError` is raised if its average exceeds ``tail_tol``
    relative to the estimate.
    """
    if rho < 0:
        raise ConfigError("rho must be >= 0")
    sampler = _sampler_for(model, C, seed, s_horizon, jobs, r, threshold)
    stop = np.full(n_paths, _DISCOUNT_CUTOFF / r)
    run = run_occupation(model, C, x0, seed, n_paths, occ_stop=stop, horizon=s_horizon, keep=True, jobs=jobs)
    fn = probe_function("h_inv_minus_one", profile)
    vals = discounted_integral(run, n_paths, fn, r, s_horizon, rho)
    est = MomentEstimate.from_samples(vals, run.censored, threshold)
    end = np.where(run.censored, s_horizon, run.stop_time)
    occ = run.total_occupation(n_paths)
    decay = np.exp(-r * occ - rho * end**2)
    tail = float(np.mean(decay * np.asarray(profile.h_inv(end), dtype=float))) * (1.0 + est.mean)
    if tail > tail_tol * max(1.0, est.mean):
        raise TailBoundError(f"tail bound {tail:g} at s_horizon={s_horizon:g} exceeds tolerance")
    return est


def check_step4_bound(model, C: TargetSet, psi: PsiFunction, profile: RateProfile, r: float, n_paths: int,
                      seed: int = 0, s_horizon: float = 1e4, jobs: int = 1, z: float = 3.0) -> CheckReport:
    """``sup_{x in C} A_{x, 0, r} <= 4 kappa`` within ``z`` SE."""
    est = {x: estimate_A_functional(model, x, C, r, 0.0, profile, n_paths, s_horizon, seed, jobs) for x in C.states}
    return _bound_report("step4_bound", est, {x: 4.0 * psi.kappa for x in C.states}, z,
                         {"r": r, "kappa": psi.kappa})


def check_tau_delta_bound(model, x0, C: TargetSet, psi: PsiFunction, profile: RateProfile, delta: float = 1.0,
                          n_paths: int = 10_000, seed: int = 0, horizon_cap: float = 1e4, jobs: int = 1,
                          z: float = 3.0, threshold: float = 1e-3) -> CheckReport:
    """``E_x int_0^{tau_C(delta)} r(s) ds <= psi(0, x) + kappa delta H^{-1}(delta)``.

    ``tau_C(delta)`` is the first time at or after ``delta`` spent in C and the
    integral of the rate curve is ``H^{-1}(tau) - 1``.
    """
    if not delta > 0:
        raise ConfigError("delta must be positive")
    run = run_occupation(model, C, x0, seed, n_paths, occ_stop=np.zeros(n_paths), time_stop=delta,
                         horizon=horizon_cap, jobs=jobs)
    vals = _h_inv_capped(profile, run.stop_time, horizon_cap) - 1.0
    est = MomentEstimate.from_samples(vals, run.censored, threshold)
    bound = float(psi(0.0, x0)) + psi.kappa * delta * float(profile.h_inv(delta))
    return _bound_report("tau_delta_bound", {x0: est}, {x0: bound}, z, {"delta": delta, "kappa": psi.kappa})


# -- results log --------------------------------------------------------------------

RESULTS_HEADER = ["scenario", "operation", "x0", "r", "n_paths", "mean", "std_error", "censored_fraction", "bound",
                  "pass"]


def append_result(path, scenario: str, operation: str, x0, r, estimate: MomentEstimate | None, bound=None,
                  passed=None, row: dict | None = None):
    """Append one line to the CSV results log, writing the header on first use."""
    path = Path(path)
    new = not path.exists()
    if estimate is None and row is not None:
        estimate = MomentEstimate(row["mean"], row["std_error"], row.get("n_paths", 0),
                                  row.get("censored_fraction", 0.0))
    with path.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(RESULTS_HEADER)
        w.writerow([scenario, operation, fmt(x0), fmt(r), fmt(estimate.n_paths), fmt(estimate.mean),
                    fmt(estimate.std_error), fmt(estimate.censored_fraction), fmt(bound), fmt(passed)])
