"""Scenario files and the staged verification pipeline.

A scenario is a JSON object::

    {
      "id": "two_state_demo",
      "model": "two_state_symmetric",          # registry string, dict, or {"csv": path}
      "rate": {"kind": "polynomial", "alpha": 0.5, "scale": 1.0},
      "lyapunov": {"expr": "1 + 3*n"},         # or {"values": [...]}
      "target": "auto",                        # or a list of states
      "K": "auto",
      "bound": null,                           # largest state allowed in an auto target
      "estimator": {"n_paths": 100000, "seed": 1, "horizon_cap": 10000.0, "r": "calibrate",
                    "jobs": 1, "hitting_states": [0, 1], "check_states": [0, 1]},
      "condition2": {"t_max": 20.0, "n_points": 201, "dt": 1e-4, "hitting_points": 41},
      "tau_delta": {"delta": 1.0, "x0": [0, 1]},
      "convergence": {"x0": 0, "times": {"start": 0.0, "stop": 1.6, "n": 40}, "burn_in": 1.0,
                      "window": 5, "fit_range": null, "rerun": null, "shift_tolerance": 1e-3}
    }

``rate.alpha`` may be ``"certify"``: the largest exponent for which the drift
certificate exists is found by bisection and rounded down to
``rate.decimals`` places. ``times`` are log-spaced between ``10**start`` and
``10**stop``. ``rerun`` names a second model (for instance a larger
truncation) whose TV curve is compared with the first.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import convergence, drift, hitting, models, rates
from .errors import ConfigError
from .reports import CheckReport, fmt, rows_to_csv

BUNDLED_DIR = Path(__file__).with_name("scenarios")

DEFAULTS = {
    "id": "scenario",
    "target": "auto",
    "K": "auto",
    "bound": "default",
    "estimator": {"n_paths": 100_000, "seed": 0, "horizon_cap": 1e4, "r": "calibrate", "jobs": 1,
                  "hitting_states": None, "check_states": None, "unreliable_threshold": 1e-3},
    "condition2": {"t_max": 20.0, "n_points": 201, "dt": 1e-4, "hitting_points": 41},
    "tau_delta": {"delta": 1.0, "x0": None},
    "convergence": None,
    "rate_checks": {"grid": {"start": 0.0, "stop": 6.0, "n": 61}, "n_samples": 10_000, "t_max": 100.0},
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_scenario(source, overrides: dict | None = None) -> dict:
    """Read a scenario from a path or a bundled name and fill in defaults."""
    if isinstance(source, dict):
        raw = source
    else:
        path = Path(source)
        if not path.exists() and (BUNDLED_DIR / f"{source}.json").exists():
            path = BUNDLED_DIR / f"{source}.json"
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"scenario {source!r} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"scenario {source!r} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("a scenario must be a JSON object")
    sc = _merge(DEFAULTS, raw)
    for k, v in (overrides or {}).items():
        if v is not None:
            section, _, key = k.rpartition(".")
            (sc[section] if section else sc)[key] = v
    if "rate" not in sc:
        raise ConfigError("scenario needs a rate spec")
    seed = sc["estimator"]["seed"]
    if not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError("estimator.seed must be an integer in [0, 2**64)")
    if int(sc["estimator"]["n_paths"]) < 100:
        raise ConfigError("estimator.n_paths must be >= 100")
    return sc


def stage_seed(seed: int, stage: int) -> int:
    """Independent-looking seeds per stage, derived deterministically."""
    return (seed + 0x9E3779B97F4A7C15 * (stage + 1)) % 2**64


def _log_times(spec):
    if isinstance(spec, dict):
        return np.logspace(spec["start"], spec["stop"], int(spec["n"]))
    return np.asarray(spec, dtype=float)


# -- rate validation ----------------------------------------------------------------


def rate_reports(profile: rates.RateProfile, settings: dict, seed: int) -> list[CheckReport]:
    """Standing assumptions, both lemmas, round trip and derivative identity."""
    rng = np.random.default_rng(seed)
    grid = _log_times(settings["grid"])
    n = int(settings["n_samples"])
    t_max = float(settings["t_max"])
    pairs = rng.uniform(0.0, t_max, size=(n, 2))
    scaling = np.column_stack([10.0 ** rng.uniform(0.0, 6.0, n), 10.0 ** rng.uniform(0.0, 3.0, n)])
    return [
        rates.validate_assumptions(profile, grid),
        rates.check_submultiplicative(profile, pairs),
        rates.check_scaling(profile, scaling),
        rates.check_round_trip(profile),
        rates.check_derivative_identity(profile),
    ]


def rate_checks_csv(reports) -> str:
    rows = []
    for rep in reports:
        first = rep.violations[0] if rep.violations else ""
        rows.append((rep.name, rep.passed, rep.margin, json.dumps(first, sort_keys=True, default=str)
                     if first else "", len(rep.violations)))
    for rep in reports:
        for v in rep.violations:
            if "predicate" in v:
                rows.append((rep.name + ":" + v["predicate"], False, v["detail"], json.dumps(v["points"]), 1))
    return rows_to_csv(["check", "passed", "margin", "first_violation", "n_violations"], rows)


# -- the pipeline -------------------------------------------------------------------


@dataclass
class StageResult:
    name: str
    status: str  # "pass", "fail", "skipped", "error"
    constants: dict = field(default_factory=dict)
    reports: list = field(default_factory=list)
    message: str = ""

    def summary(self):
        return {"status": self.status, "message": self.message,
                "constants": {k: _plain(v) for k, v in self.constants.items()},
                "checks": [r.summary() for r in self.reports]}


def _plain(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    return v


def _lyapunov(sc, model):
    spec = sc.get("lyapunov")
    if spec is None:
        raise ConfigError("scenario needs a lyapunov spec")
    n = model.n_states if isinstance(model, models.Ctmc) else None
    if "values" in spec:
        return drift.LyapunovCandidate(values=spec["values"], label="tabulated")
    if "expr" in spec:
        try:
            return drift.LyapunovCandidate.from_expression(spec["expr"], n)
        except (SyntaxError, NameError, ValueError) as exc:
            raise ConfigError(f"bad lyapunov expression: {exc}") from exc
    raise ConfigError("lyapunov needs 'values' or 'expr'")


def resolve_rate(sc, model=None, V=None) -> tuple[rates.RateProfile, dict]:
    """Build the profile; ``alpha: "certify"`` runs the feasibility bisection."""
    spec = dict(sc["rate"])
    info = {}
    if spec.get("alpha") == "certify":
        if model is None or V is None:
            raise ConfigError("alpha 'certify' needs a chain model and a lyapunov spec")
        bound = sc["bound"]
        a_max = drift.max_feasible_alpha(model, V, float(spec.get("scale", 1.0)), bound)
        decimals = int(spec.pop("decimals", 3))
        alpha = math.floor(a_max * 10**decimals) / 10**decimals
        spec["alpha"] = alpha
        info = {"alpha_max": a_max, "alpha": alpha}
    spec.pop("decimals", None)
    method = spec.pop("h_inv_method", None)
    try:
        return rates.RateProfile(rates.RateFunction.from_spec(spec), h_inv_method=method), info
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"bad rate spec: {exc}") from exc


class Pipeline:
    """Runs the stages in order, writing every output into ``out``."""

    STAGES = ("rates", "drift", "psi_from_v", "condition1", "psi_from_hitting", "quantitative_bounds",
              "convergence")

    def __init__(self, sc: dict, out):
        self.sc = sc
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.results: dict[str, StageResult] = {}
        self.est = sc["estimator"]
        self.seed = int(self.est["seed"])
        self.log_path = self.out / "hitting_estimates.csv"

    # each stage returns a StageResult; the driver handles skipping

    def run(self) -> int:
        for name in ("hitting_estimates.csv",):
            if (self.out / name).exists():
                (self.out / name).unlink()
        self.model = models.make_model(self.sc["model"])
        if not isinstance(self.model, models.Ctmc):
            raise ConfigError("the full pipeline runs on finite chains")
        self.V = _lyapunov(self.sc, self.model)
        self.profile, self.rate_info = resolve_rate(self.sc, self.model, self.V)
        failed = None
        for i, name in enumerate(self.STAGES):
            if failed is not None and name != "convergence":
                self.results[name] = StageResult(name, "skipped", message=f"after failed stage {failed}")
                continue
            try:
                res = getattr(self, f"_stage_{name}")(stage_seed(self.seed, i))
            except ConfigError:
                raise
            except (RuntimeError, ValueError) as exc:
                # numerical failures end the stage, not the run
                res = StageResult(name, "error", message=f"{type(exc).__name__}: {exc}")
            self.results[name] = res
            if res.status != "pass" and failed is None:
                failed = name
        self._write_summary()
        return 0 if all(r.status == "pass" for r in self.results.values()) else 1

    def _sampler(self, r, seed):
        return hitting.HittingSampler(self.model, self.C, r, float(self.est["horizon_cap"]), seed,
                                      int(self.est["jobs"]), float(self.est["unreliable_threshold"]))

    def _log(self, operation, x0, r, est, bound=None, passed=None):
        hitting.append_result(self.log_path, self.sc["id"], operation, x0, r, est, bound, passed)

    def _log_report(self, operation, rep, r=None):
        for row in rep.rows:
            est = hitting.MomentEstimate(row["mean"], row["std_error"], row["n_paths"], row["censored_fraction"])
            ok = row not in rep.violations
            self._log(operation, row["x"], r, est, row["bound"], ok)

    def _stage_rates(self, seed):
        reps = rate_reports(self.profile, self.sc["rate_checks"], seed)
        (self.out / "rate_checks.csv").write_text(rate_checks_csv(reps))
        status = "pass" if all(reps) else "fail"
        return StageResult("rates", status, {"phi": self.profile.rate.label, **self.rate_info}, reps)

    def _stage_drift(self, seed):
        target = self.sc["target"]
        C = target if target == "auto" else models.TargetSet.of_states(target)
        cert = drift.check_subgeometric_drift(self.model, self.V, self.profile, C, self.sc["K"], self.sc["bound"])
        self.cert = cert
        self.C = cert.target_set
        cert.write(self.out / "drift_certificate.csv")
        return StageResult("drift", "pass" if cert.passed else "fail",
                           {"C": self.C.describe(), "K": cert.K}, [cert.report()])

    def _t_grid(self, n_points):
        c2 = self.sc["condition2"]
        return np.linspace(0.0, float(c2["t_max"]), int(n_points))

    def _stage_psi_from_v(self, seed):
        self.psi_v = drift.build_psi_from_v(self.V, self.profile, self.cert)
        c2 = self.sc["condition2"]
        rep = drift.check_condition2(self.model, self.psi_v, self.profile, self.C, self._t_grid(c2["n_points"]),
                                     float(c2["dt"]))
        rep.rows = []
        return StageResult("psi_from_v", "pass" if rep.passed else "fail", self.psi_v.constants(), [rep])

    def _stage_condition1(self, seed):
        r_spec = self.est["r"]
        n = int(self.est["n_paths"])
        if r_spec == "calibrate":
            self.r = hitting.calibrate_r(self.model, self.C, self.psi_v, self.profile, n, seed=seed,
                                         horizon_cap=float(self.est["horizon_cap"]), jobs=int(self.est["jobs"]))
        else:
            self.r = float(r_spec)
        sampler = self._sampler(self.r, seed)
        worst, ok = -math.inf, True
        for x in self.C.states:
            est = hitting.estimate_hitting_moment(sampler, x, self.profile, n)
            finite = math.isfinite(est.mean) and not est.unreliable
            ok &= finite
            worst = max(worst, est.mean)
            self._log("estimate_hitting_moment", x, self.r, est, None, finite)
        return StageResult("condition1", "pass" if ok else "fail", {"r": self.r, "sup_C_moment": worst})

    def _stage_psi_from_hitting(self, seed):
        n = int(self.est["n_paths"])
        states = self.est["hitting_states"]
        states = list(range(self.model.n_states)) if states is None else states
        check = self.est["check_states"]
        check = states if check is None else check
        sampler = self._sampler(self.r, seed)
        c2 = self.sc["condition2"]
        grid = self._t_grid(c2["hitting_points"])
        self.psi_h = hitting.psi_via_hitting(sampler, self.profile, grid, states, n, form="doubled")
        rep = drift.check_condition2(self.model, self.psi_h, self.profile, self.C, grid, float(c2["dt"]),
                                     states=check)
        env = hitting.check_psi_envelope(self.psi_h, self.profile)
        rep.rows = []
        for k, x in enumerate(states):
            # the doubled form at t = 0 is 2 E[H^{-1}(tau)] - 1; log the moment itself
            est = hitting.MomentEstimate(0.5 * (float(self.psi_h.table[0, k]) + 1.0),
                                         0.5 * float(self.psi_h.se_table[0, k]), n,
                                         self.psi_h.meta["censored_fraction"][x])
            self._log("psi_via_hitting", x, self.r, est)
        ok = rep.passed and env.passed
        return StageResult("psi_from_hitting", "pass" if ok else "fail", self.psi_h.constants(), [rep, env])

    def _stage_quantitative_bounds(self, seed):
        n = int(self.est["n_paths"])
        cap = float(self.est["horizon_cap"])
        jobs = int(self.est["jobs"])
        states = self.est["check_states"] or self.est["hitting_states"] or list(range(self.model.n_states))
        psi = self.psi_v
        r0 = 2.0 * psi.kappa * math.log(4.0 * psi.kappa)
        s1 = hitting.check_step1_bound(self.model, self.C, psi, self.profile, states, n, seed, cap, jobs)
        self._log_report("check_step1_bound", s1)
        s3 = hitting.check_step3_gate(self.model, self.C, psi, self.profile, r0, n, seed, cap, jobs)
        self._log_report("check_step3_gate", s3, r0)
        s4 = hitting.check_step4_bound(self.model, self.C, psi, self.profile, r0, n, seed, cap, jobs)
        self._log_report("check_step4_bound", s4, r0)
        td = self.sc["tau_delta"]
        x0s = td["x0"] if td["x0"] is not None else states
        taus = []
        for x in x0s:
            rep = hitting.check_tau_delta_bound(self.model, x, self.C, psi, self.profile, float(td["delta"]), n,
                                                seed, cap, jobs)
            self._log_report("check_tau_delta_bound", rep)
            taus.append(rep)
        reps = [s1, s3, s4, *taus]
        for rep in reps:
            rep.rows = []
        return StageResult("quantitative_bounds", "pass" if all(reps) else "fail", {"r0": r0, "kappa": psi.kappa},
                           reps)

    def _stage_convergence(self, seed):
        cfg = self.sc["convergence"]
        if cfg is None:
            return StageResult("convergence", "pass", message="not configured")
        times = _log_times(cfg["times"])
        curve = convergence.tv_curve(self.model, cfg["x0"], self.profile, times)
        curve.write(self.out / "tv_curve.csv")
        reps = [convergence.check_vanishing(curve, float(cfg["burn_in"]), int(cfg["window"]))]
        consts = {}
        alpha = self.profile.rate.alpha
        if cfg.get("fit_range") and self.profile.rate.kind == "polynomial":
            reps.append(convergence.check_polynomial_rate(curve, cfg["fit_range"], alpha,
                                                          float(cfg.get("slope_margin", 0.2))))
        if cfg.get("rerun"):
            other = convergence.tv_curve(models.make_model(cfg["rerun"]), cfg["x0"], self.profile, times)
            shift = convergence.truncation_shift(curve, other)
            tol = float(cfg.get("shift_tolerance", 1e-3))
            consts["truncation_shift"] = shift
            reps.append(CheckReport("truncation_shift", shift < tol, tol - shift, cfg["rerun"], {"shift": shift}))
        for rep in reps:
            rep.rows = []
        return StageResult("convergence", "pass" if all(reps) else "fail", consts, reps)

    def _write_summary(self):
        summary = {
            "scenario": self.sc["id"],
            "model": self.model.model_id,
            "phi": self.profile.rate.label,
            "seed": self.seed,
            "n_paths": int(self.est["n_paths"]),
            "passed": all(r.status == "pass" for r in self.results.values()),
            "stages": {k: v.summary() for k, v in self.results.items()},
        }
        (self.out / "summary.json").write_text(json.dumps(summary, indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def validate_rate(sc: dict, out) -> int:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    profile, _ = resolve_rate(sc)
    reps = rate_reports(profile, sc["rate_checks"], stage_seed(int(sc["estimator"]["seed"]), 0))
    (out / "rate_checks.csv").write_text(rate_checks_csv(reps))
    summary = {"scenario": sc["id"], "phi": profile.rate.label, "passed": all(reps),
               "checks": [r.summary() for r in reps]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=_json_default) + "\n")
    return 0 if all(reps) else 1
