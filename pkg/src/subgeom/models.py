"""Finite continuous-time chains and reflected 1-D diffusions.

Chains carry their rate matrix ``Q`` (generator ``Lf = Qf``), exact path
sampling, the stationary solve and uniformization for ``P_t``. Diffusions carry
``b`` and ``sigma`` on a reflecting interval and are sampled by Euler-Maruyama.
"""

from __future__ import annotations

import ast
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numba as nb
import numpy as np
import scipy.sparse as sp
from scipy import stats

from . import _kernels
from ._validation import check_positive, check_rate_matrix, check_state, check_vector
from .errors import ConfigError, DomainError, SingularityError, UniformizationOverflow


@dataclass(frozen=True)
class TargetSet:
    """The set C: a set of chain states or a closed interval of the line."""

    states: tuple = ()
    interval: tuple | None = None

    def __post_init__(self):
        if self.interval is None:
            if len(self.states) == 0:
                raise ValueError("target set must be non-empty")
            object.__setattr__(self, "states", tuple(sorted(int(s) for s in set(self.states))))
        else:
            lo, hi = (float(v) for v in self.interval)
            if not lo <= hi:
                raise ValueError(f"empty interval [{lo}, {hi}]")
            object.__setattr__(self, "interval", (lo, hi))

    @classmethod
    def of_states(cls, states) -> "TargetSet":
        return cls(states=tuple(np.atleast_1d(states).tolist()))

    @classmethod
    def of_interval(cls, lo, hi) -> "TargetSet":
        return cls(interval=(lo, hi))

    @property
    def is_interval(self) -> bool:
        return self.interval is not None

    def mask(self, n: int) -> np.ndarray:
        if self.is_interval:
            raise TypeError("interval targets have no state mask")
        m = np.zeros(n, dtype=bool)
        if self.states[-1] >= n:
            raise DomainError(f"target state {self.states[-1]} outside 0..{n - 1}")
        m[list(self.states)] = True
        return m

    def contains(self, x):
        x = np.asarray(x)
        if self.is_interval:
            lo, hi = self.interval
            return (x >= lo) & (x <= hi)
        return np.isin(x, self.states)

    def describe(self):
        return list(self.interval) if self.is_interval else list(self.states)


class Ctmc:
    """A finite-state continuous-time Markov chain given by its rate matrix."""

    def __init__(self, rate_matrix, labels=None, name: str = "ctmc", params: dict | None = None):
        Q = check_rate_matrix(rate_matrix)
        Q.setflags(write=False)
        self.rate_matrix = Q
        self.n_states = Q.shape[0]
        self.labels = list(labels) if labels is not None else None
        self.name = name
        self.params = dict(params or {})
        self.exit_rates = -np.diag(Q).copy()
        self.sparse = sp.csr_matrix(Q)
        # jump structure for the path kernels: neighbours and cumulative jump probabilities
        jumps = sp.csr_matrix(Q - np.diag(np.diag(Q)))
        jumps.eliminate_zeros()
        self._indptr = jumps.indptr.astype(np.int64)
        self._indices = jumps.indices.astype(np.int64)
        cum = np.empty(jumps.data.shape[0])
        for x in range(self.n_states):
            lo, hi = self._indptr[x], self._indptr[x + 1]
            if hi > lo:
                cum[lo:hi] = np.cumsum(jumps.data[lo:hi]) / jumps.data[lo:hi].sum()
        self._cumprob = cum

    def __repr__(self):
        return f"Ctmc({self.model_id!r}, n_states={self.n_states})"

    @property
    def model_id(self) -> str:
        if not self.params:
            return self.name
        return f"{self.name}({','.join(f'{k}={v}' for k, v in self.params.items())})"

    @property
    def kernel_args(self):
        return self._indptr, self._indices, self._cumprob, self.exit_rates

    def neighbours(self, x):
        return self._indices[self._indptr[x]:self._indptr[x + 1]]


def _njit_scalar(fn):
    if isinstance(fn, nb.core.registry.CPUDispatcher):
        return fn
    return nb.njit(fn)


class Diffusion1d:
    """``dX = b(X) dt + sigma(X) dW`` on ``[lo, hi]`` with reflecting ends.

    ``drift`` and ``sigma`` must be numba-compilable scalar functions; plain
    Python functions are jitted on construction.
    """

    def __init__(self, drift: Callable, sigma: Callable, domain=(-10.0, 10.0), step: float = 1e-2,
                 name: str = "diffusion", params: dict | None = None):
        lo, hi = (float(v) for v in domain)
        if not lo < hi:
            raise ValueError("domain must be a non-degenerate interval")
        self.drift = _njit_scalar(drift)
        self.sigma = _njit_scalar(sigma)
        self.domain = (lo, hi)
        self.step = check_positive(step, "step")
        self.name = name
        self.params = dict(params or {})
        probe = np.linspace(lo, hi, 257)
        sig = np.array([self.sigma(v) for v in probe])
        drv = np.array([self.drift(v) for v in probe])
        if not (np.all(np.isfinite(sig)) and np.all(sig > 0) and np.all(np.isfinite(drv))):
            raise ValueError("sigma must be positive and drift/sigma finite on the domain")

    def __repr__(self):
        return f"Diffusion1d({self.model_id!r}, domain={self.domain}, step={self.step})"

    @property
    def model_id(self) -> str:
        if not self.params:
            return self.name
        return f"{self.name}({','.join(f'{k}={v}' for k, v in self.params.items())})"

    @property
    def kernels(self):
        return _kernels.diffusion_kernels(self.drift, self.sigma)


@dataclass
class JumpPath:
    """Piecewise-constant chain path: ``states[k]`` holds on ``[jump_times[k], jump_times[k+1])``."""

    jump_times: np.ndarray
    states: np.ndarray
    horizon: float

    def state_at(self, t):
        idx = np.searchsorted(self.jump_times, t, side="right") - 1
        return self.states[idx]

    def occupation(self, target: TargetSet, t):
        """Exact time spent in ``target`` up to ``t`` (scalar or array)."""
        t = np.asarray(t, dtype=float)
        ends = np.append(self.jump_times[1:], self.horizon)
        inside = target.contains(self.states)
        starts = self.jump_times[inside]
        stops = ends[inside]
        tt = t[..., None]
        out = np.clip(np.minimum(stops, tt) - starts, 0.0, None).sum(axis=-1)
        return float(out) if out.ndim == 0 else out


@dataclass
class GridPath:
    """Euler grid path; occupation uses the left-endpoint rule."""

    t_grid: np.ndarray
    positions: np.ndarray

    def occupation(self, target: TargetSet, t):
        t = np.asarray(t, dtype=float)
        inside = target.contains(self.positions[:-1])
        starts = self.t_grid[:-1][inside]
        stops = self.t_grid[1:][inside]
        tt = t[..., None]
        out = np.clip(np.minimum(stops, tt) - starts, 0.0, None).sum(axis=-1)
        return float(out) if out.ndim == 0 else out


Trajectory = JumpPath | GridPath


# -- operations -------------------------------------------------------------------


def generator_apply(model: Ctmc, f):
    """``(Lf)(x) = sum_y q(x, y) (f(y) - f(x))``, i.e. ``Q f``."""
    f = check_vector(f, model.n_states)
    return model.sparse @ f


def generator_apply_diffusion(model: Diffusion1d, f: Callable, x, h: float):
    """Central-difference ``b f' + (sigma^2 / 2) f''`` at ``x``."""
    x = np.asarray(x, dtype=float)
    lo, hi = model.domain
    if np.any(x - h < lo) or np.any(x + h > hi):
        raise DomainError("x +/- h must stay inside the domain")
    fp, f0, fm = f(x + h), f(x), f(x - h)
    b = np.vectorize(model.drift, otypes=[float])(x)
    s = np.vectorize(model.sigma, otypes=[float])(x)
    out = b * (fp - fm) / (2.0 * h) + 0.5 * s**2 * (fp - 2.0 * f0 + fm) / h**2
    return float(out) if out.ndim == 0 else out


def sample_path(model, x0, horizon: float, seed: int = 0, path_index: int = 0):
    """One path on ``[0, horizon]`` drawn from the ``(seed, path_index)`` substream."""
    horizon = check_positive(horizon, "horizon")
    if isinstance(model, Ctmc):
        x0 = check_state(x0, model.n_states)
        times, states = _kernels.chain_full_path(*model.kernel_args, x0, np.uint64(seed),
                                                 np.uint64(path_index), horizon)
        return JumpPath(times, states, horizon)
    lo, hi = model.domain
    if not lo <= x0 <= hi:
        raise DomainError(f"x0={x0} outside domain {model.domain}")
    n_steps = int(math.ceil(horizon / model.step - 1e-9))
    _, full = model.kernels
    xs = full(float(x0), model.step, lo, hi, np.uint64(seed), np.uint64(path_index), n_steps)
    return GridPath(np.arange(n_steps + 1) * model.step, xs)


def states_at(model: Ctmc, x0, t: float, n_paths: int, seed: int = 0, first_path: int = 0):
    """``X_t`` for ``n_paths`` independent paths started at ``x0``."""
    x0 = check_state(x0, model.n_states)
    return _kernels.chain_states_at(*model.kernel_args, x0, np.uint64(seed), first_path, n_paths, float(t))


def stationary_distribution(model: Ctmc) -> np.ndarray:
    """Solve ``pi Q = 0``, ``sum(pi) = 1``."""
    n = model.n_states
    A = model.rate_matrix.T.copy()
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    if n > 1 and np.linalg.cond(A) > 1e14:
        raise SingularityError(f"stationary solve for {model.model_id} is singular (reducible chain?)")
    try:
        pi = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise SingularityError(f"stationary solve for {model.model_id} failed") from exc
    # one step of iterative refinement
    pi = pi + np.linalg.solve(A, b - A @ pi)
    if np.any(pi < -1e-12):
        raise SingularityError("stationary solve produced negative mass")
    pi = np.clip(pi, 0.0, None)
    residual = np.max(np.abs(pi @ model.rate_matrix))
    if residual > 1e-10:
        raise SingularityError(f"stationary residual {residual:g} exceeds 1e-10")
    return pi


def propagate(model: Ctmc, p0, t: float, cap: float = 1e5, tol: float = 1e-12) -> np.ndarray:
    """``p0 P_t`` by uniformization; the dropped Poisson tail mass is at most ``tol``."""
    p0 = check_vector(p0, model.n_states, "p0")
    if t < 0:
        raise DomainError("t must be >= 0")
    lam = float(model.exit_rates.max())
    if t == 0.0 or lam == 0.0:
        return p0.copy()
    m = lam * t
    if m > cap:
        raise UniformizationOverflow(f"uniformization rate*t = {m:g} exceeds cap {cap:g}")
    K = int(stats.poisson.isf(tol, m)) + 1
    weights = stats.poisson.pmf(np.arange(K + 1), m)
    PT = (sp.identity(model.n_states, format="csr") + model.sparse / lam).T.tocsr()
    v = p0.copy()
    acc = weights[0] * v
    for k in range(1, K + 1):
        v = PT @ v
        acc += weights[k] * v
    return acc


def transient_distribution(model: Ctmc, x0, t: float, cap: float = 1e5, tol: float = 1e-12) -> np.ndarray:
    """Row ``x0`` of ``exp(t Q)``."""
    x0 = check_state(x0, model.n_states)
    p0 = np.zeros(model.n_states)
    p0[x0] = 1.0
    return propagate(model, p0, t, cap=cap, tol=tol)


# -- registry ---------------------------------------------------------------------


def two_state_symmetric(rate: float = 1.0) -> Ctmc:
    return Ctmc([[-rate, rate], [rate, -rate]], name="two_state_symmetric")


def absorbing() -> Ctmc:
    """A single absorbing state; with C = {0} the occupation clock runs at speed one."""
    return Ctmc([[0.0]], name="absorbing")


def birth_death(birth, death, name="birth_death", params=None) -> Ctmc:
    birth = np.asarray(birth, dtype=float)
    death = np.asarray(death, dtype=float)
    n = birth.shape[0]
    Q = np.zeros((n, n))
    idx = np.arange(n)
    Q[idx[:-1], idx[1:]] = birth[:-1]
    Q[idx[1:], idx[:-1]] = death[1:]
    Q[idx, idx] = -Q.sum(axis=1)
    return Ctmc(Q, name=name, params=params)


def bd_geometric(lam: float, mu: float, N: int) -> Ctmc:
    """Birth rate ``lam``, death rate ``mu`` on {0..N}; births out of N are dropped."""
    N = int(N)
    if N < 1:
        raise ConfigError("N must be >= 1")
    birth = np.full(N + 1, float(lam))
    birth[-1] = 0.0
    death = np.full(N + 1, float(mu))
    death[0] = 0.0
    return birth_death(birth, death, "bd_geometric", {"lambda": lam, "mu": mu, "N": N})


def bd_polynomial(c: float, N: int) -> Ctmc:
    """``q(n, n+1) = 1``, ``q(n, n-1) = 1 + c/n`` on {0..N}; births out of N are dropped."""
    N = int(N)
    if N < 1:
        raise ConfigError("N must be >= 1")
    n = np.arange(N + 1, dtype=float)
    birth = np.ones(N + 1)
    birth[-1] = 0.0
    death = np.zeros(N + 1)
    death[1:] = 1.0 + c / n[1:]
    return birth_death(birth, death, "bd_polynomial", {"c": c, "N": N})


def ou(theta: float = 1.0, domain=(-10.0, 10.0), step: float = 1e-2) -> Diffusion1d:
    theta = float(theta)

    @nb.njit
    def drift(x):
        return -theta * x

    @nb.njit
    def sigma(x):
        return math.sqrt(2.0)

    return Diffusion1d(drift, sigma, domain, step, name="ou", params={"theta": theta})


def heavy_tail_langevin(beta: float = 0.5, domain=(-50.0, 50.0), step: float = 1e-2) -> Diffusion1d:
    """Langevin dynamics for the potential ``(1 + x^2)^(beta/2)``."""
    beta = float(beta)

    @nb.njit
    def drift(x):
        return -beta * x * (1.0 + x * x) ** (0.5 * beta - 1.0)

    @nb.njit
    def sigma(x):
        return math.sqrt(2.0)

    return Diffusion1d(drift, sigma, domain, step, name="heavy_tail_langevin", params={"beta": beta})


REGISTRY = {
    "two_state_symmetric": two_state_symmetric,
    "absorbing": absorbing,
    "bd_geometric": bd_geometric,
    "bd_polynomial": bd_polynomial,
    "ou": ou,
    "heavy_tail_langevin": heavy_tail_langevin,
}

_CALL_RE = re.compile(r"^\s*([A-Za-z_]\w*)\s*(?:\((.*)\))?\s*$")


def make_model(spec):
    """Build a model from ``"bd_polynomial(3, 200)"``, a dict or a CSV path spec."""
    if isinstance(spec, (Ctmc, Diffusion1d)):
        return spec
    if isinstance(spec, str):
        m = _CALL_RE.match(spec)
        if not m or m.group(1) not in REGISTRY:
            raise ConfigError(f"unknown model {spec!r}")
        args = ()
        if m.group(2):
            try:
                args = ast.literal_eval(f"({m.group(2)},)")
            except (ValueError, SyntaxError) as exc:
                raise ConfigError(f"bad model arguments in {spec!r}") from exc
        return _call_factory(m.group(1), args, {})
    if isinstance(spec, dict):
        if "csv" in spec:
            return load_ctmc_csv(spec["csv"])
        spec = dict(spec)
        name = spec.pop("name", None)
        if name not in REGISTRY:
            raise ConfigError(f"unknown model {name!r}")
        if "lambda" in spec:
            spec["lam"] = spec.pop("lambda")
        if "domain" in spec:
            spec["domain"] = tuple(spec["domain"])
        return _call_factory(name, (), spec)
    raise ConfigError(f"cannot build a model from {spec!r}")


def _call_factory(name, args, kwargs):
    try:
        return REGISTRY[name](*args, **kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad arguments for model {name!r}: {exc}") from exc


def load_ctmc_csv(path) -> Ctmc:
    """Read a rate matrix: a header line with n (``n=3``, ``n,3`` or ``3``) then n rows."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise ConfigError(f"{path} is empty")
    head = lines[0].replace("n=", "").replace("n,", "").strip()
    try:
        n = int(head)
        rows = [[float(v) for v in ln.split(",")] for ln in lines[1:]]
    except ValueError as exc:
        raise ConfigError(f"cannot parse rate matrix in {path}") from exc
    if len(rows) != n or any(len(r) != n for r in rows):
        raise ConfigError(f"{path}: expected {n} rows of {n} values")
    try:
        return Ctmc(rows, name=Path(path).stem)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
