"""Named verification suites.

Each check returns a :class:`CheckResult` with one summary line. Ensembles
are cached per (configuration, coupling, eps, replica count) so that checks
sharing a run do not repeat it.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from . import chaos_stats as cs
from . import clt_oracle as co
from . import ensemble as en
from .grid import (GridSpec, MollifierSpec, RngStream, ScalarField,
                   covariance_init, make_mollifier)
from .propagators import (StepScheme, cubic_flow, heat_propagate,
                          linearized_solve, mild_residual, solve)
from .rescaling import TestFunction, simulate_rescaled


@dataclass
class CheckResult:
    name: str
    passed: bool
    summary: str
    details: dict = field(default_factory=dict)
    required: bool = True

    def line(self):
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.summary}"

    def to_dict(self):
        return {"name": self.name, "passed": self.passed, "summary": self.summary,
                "required": self.required, "details": self.details}


def _f(x, p=4):
    return f"{x:.{p}g}"


# -- shared ensembles ---------------------------------------------------------

_CACHE = {}
DECORRELATION_DIVISOR = 4


def decorrelation_time(config):
    return config.sim.t_list[0] / DECORRELATION_DIVISOR


def standard_observables(config, params, phi):
    t_list = params.t_list
    eps = params.eps
    t_max = t_list[-1]
    obs = []
    obs += [en.tested(phi, t) for t in t_list]
    obs += [en.free(phi, t) for t in t_list]
    obs += [en.pointwise_square(t) for t in t_list]
    obs += [en.pointwise_cross(t) for t in t_list]
    obs += [en.spatial_average(s, eps) for s in sigma_s_list(config, eps)]
    t_dec = decorrelation_time(config)
    obs += [en.pointwise_square(t_dec),
            en.product_correlations(t_dec, decorrelation_offsets(params.grid))]
    if t_dec in t_list or any(o.time > t_max * (1 + 1e-9) for o in obs):
        raise ValueError("inconsistent observation times")
    return obs


def sigma_s_list(config, eps):
    t_max = config.sim.t_list[-1]
    return [s for s in config.sim.s_list if s * eps**2 <= t_max * (1 + 1e-9)]


def decorrelation_offsets(grid):
    return [(k,) + (0,) * (grid.d - 1) for k in range(grid.n // 2 + 1)]


def standard_run(config, lam, eps, n_replicas=None):
    n = n_replicas or config.ensemble.n_replicas
    key = (config.digest(), float(lam), float(eps), int(n))
    if key not in _CACHE:
        params = config.params(lam, eps)
        phi = config.test_function()
        obs = standard_observables(config, params, phi)
        e = config.ensemble
        t0 = time.perf_counter()
        acc = en.ensemble_run(params, n, obs, seed=e.seed, n_batches=e.n_batches,
                              workers=e.workers, chunk=e.chunk)
        _CACHE[key] = (params, phi, acc, time.perf_counter() - t0)
    return _CACHE[key]


def clear_cache():
    _CACHE.clear()


# -- 1: deterministic propagators ------------------------------------------------

def check_deterministic(config=None):
    start = time.perf_counter()
    out = {}
    # Fourier eigenfunction of the continuum and lattice generators
    gs = GridSpec(1, 64, 1.0, laplacian="spectral")
    f = ScalarField.from_function(gs, lambda x: np.cos(2 * np.pi * x))
    out["eigen_spectral"] = float(np.max(np.abs(
        heat_propagate(f, 0.05).values - math.exp(-(2 * np.pi) ** 2 * 0.05) * f.values)))
    gl = GridSpec(3, 16, 2.0)
    f = ScalarField.from_function(gl, lambda x, y, z: np.cos(2 * np.pi * x / 2.0) + 0 * y + 0 * z)
    lam1 = (4 / gl.h**2) * math.sin(math.pi / gl.n) ** 2
    out["eigen_lattice"] = float(np.max(np.abs(
        heat_propagate(f, 0.3).values - math.exp(-lam1 * 0.3) * f.values)))
    # semigroup composition
    rng = RngStream(config.ensemble.seed if config else 0, 0)
    g = GridSpec(3, 16, 2.0)
    f = ScalarField(g, rng.standard_normal(g.shape))
    a = heat_propagate(heat_propagate(f, 0.01), 0.02).values
    b = heat_propagate(f, 0.03).values
    out["semigroup"] = float(np.max(np.abs(a - b)) / np.max(np.abs(b)))
    # exact reaction flow against the closed form and an adaptive integrator
    u = np.linspace(-5, 5, 101)
    g1 = GridSpec(1, 128, 1.0)
    vals = cubic_flow(ScalarField(g1, np.resize(u, 128)), 1.0, 1.0).values
    closed = np.resize(u, 128) / np.sqrt(1 + 2 * np.resize(u, 128) ** 2)
    out["cubic_closed_form"] = float(np.max(np.abs(vals - closed)))
    sol = solve_ivp(lambda t, y: -0.5 * y**3, (0, 2), [1.0], method="LSODA",
                    rtol=1e-12, atol=1e-14)
    out["cubic_ode"] = abs(float(sol.y[0, -1]) - 1 / math.sqrt(3))
    # Strang order and mild residual under dt halving
    g = GridSpec(1, 128, 8.0)
    f0 = ScalarField.from_function(g, lambda x: 3 * np.exp(-x**2))
    ref = solve(f0, 1.0, StepScheme(1 / 2048), [1.0])[-1].values
    errs = [float(np.max(np.abs(solve(f0, 1.0, StepScheme(dt), [1.0])[-1].values - ref)))
            for dt in (1 / 16, 1 / 32, 1 / 64)]
    out["richardson"] = [errs[0] / errs[1], errs[1] / errs[2]]
    res = []
    for k in (50, 100, 200):
        tr = solve(f0, 1.0, StepScheme(1 / k), np.linspace(0, 1, k + 1))
        res.append(mild_residual(tr, 1.0, 0.0, 1.0))
    out["mild_ratio"] = [res[0] / res[1], res[1] / res[2]]
    out["runtime"] = time.perf_counter() - start
    passed = (out["eigen_spectral"] <= 1e-12 and out["eigen_lattice"] <= 1e-12
              and out["semigroup"] <= 1e-12 and out["cubic_closed_form"] <= 1e-14
              and out["cubic_ode"] <= 1e-8
              and all(3.5 <= r <= 4.5 for r in out["richardson"])
              and all(3.5 <= r <= 4.5 for r in out["mild_ratio"])
              and out["runtime"] < 60)
    summary = (f"eigen {_f(max(out['eigen_spectral'], out['eigen_lattice']))}, "
               f"semigroup {_f(out['semigroup'])}, cubic {_f(out['cubic_closed_form'])}, "
               f"Richardson {[round(r, 3) for r in out['richardson']]}, "
               f"mild ratio {[round(r, 3) for r in out['mild_ratio']]}, {out['runtime']:.1f}s")
    return CheckResult("C1 deterministic propagators", bool(passed), summary, out)


def check_pairing_and_flow(config=None):
    ok = all(co.pairing_count(k) == sum(1 for _ in co.enumerate_pairings(range(2 * k)))
             for k in range(1, 6))
    flow = float(cubic_flow(ScalarField.constant(GridSpec(1, 4, 1.0), 2.0), 1.0, 1.0).values[0])
    ok_flow = abs(flow - 2 / 3) <= 1e-15
    return CheckResult("pairing counts and reaction flow", bool(ok and ok_flow),
                       f"enumeration k<=5 {'matches' if ok else 'differs'}, Phi_1(2) = {flow!r}")


# -- 2: comparison principle ---------------------------------------------------

def check_comparison(config, n_replicas=16, lam=1.0, eps=0.1, slack=1e-8):
    start = time.perf_counter()
    params = config.params(lam, eps)
    grid = params.grid
    rho = make_mollifier(params.moll, grid).values
    worst_low, worst_high = 0.0, 0.0
    for r in range(n_replicas):
        traj = simulate_rescaled(params, RngStream(config.ensemble.seed, r),
                                 times=params.t_list, dense=True)
        shift = RngStream(config.ensemble.seed, r, 1).generator().integers(0, grid.n, grid.d)
        v0 = ScalarField(grid, np.roll(rho, tuple(shift), axis=tuple(range(grid.d))))
        for t in params.t_list:
            v = linearized_solve(traj.window(0.0, t), v0, params.lam_eps, params.scheme)
            upper = heat_propagate(v0, t).values
            worst_low = min(worst_low, float(v.values.min()))
            worst_high = max(worst_high, float(np.max(v.values - upper)))
    passed = worst_low >= -slack and worst_high <= slack
    runtime = time.perf_counter() - start
    return CheckResult("C2 comparison principle", bool(passed),
                       f"min v = {_f(worst_low)}, max(v - p_t*rho) = {_f(worst_high)} over "
                       f"{n_replicas} replicas, {runtime:.1f}s",
                       {"min": worst_low, "max_excess": worst_high, "runtime": runtime})


# -- 3: free field ---------------------------------------------------------------

def check_free_field(config, eps=0.1, n_se=3.0):
    params, phi, acc, _ = standard_run(config, 0.0, eps)
    t_list = params.t_list
    notes, ok = [], True
    for t in t_list:
        name = f"u@{en._fmt(t)}:{phi.name}"
        var = acc.variance(name)
        exact = cs.free_variance(phi, params.moll, t)
        z = var.z(exact)
        ok &= abs(z) <= n_se
        k = acc.standardized_moment(name, 4)
        ok &= abs(k.z(3.0)) <= n_se
        corr = acc.correlation(name, f"X@{en._fmt(t)}:{phi.name}")
        ok &= abs(corr.value - 1) <= n_se * corr.se + 1e-12
        notes.append(f"t={_f(t)} var z={z:+.2f} kurt={k.value:.3f}+-{k.se:.3f} corr-1={corr.value - 1:.1e}")
    for s in sigma_s_list(config, eps):
        est = cs.sigma_lambda_estimate(acc, s)
        ok &= abs(est.z(1.0)) <= n_se
        notes.append(f"sigma2(s={_f(s)})={est.value:.3f}+-{est.se:.3f}")
    return CheckResult("C3 free-field calibration", bool(ok), "; ".join(notes))


# -- 4: Gaussianity -----------------------------------------------------------

def check_gaussianity(config, lam=1.0, ladder=(0.4, 0.2, 0.1), z_threshold=4.0):
    t = config.sim.t_list[-1]
    z4 = {}
    report = None
    for eps in ladder:
        params, phi, acc, _ = standard_run(config, lam, eps)
        name = f"u@{en._fmt(t)}:{phi.name}"
        z4[eps] = abs(acc.standardized_moment(name, 4).z(3.0))
        if eps == min(ladder):
            report = cs.gaussianity_report(acc, name, z_threshold)
    order = sorted(ladder, reverse=True)
    trend = all(z4[b] <= z4[a] for a, b in zip(order, order[1:]))
    zs = " ".join(f"{v.name.split(':')[-1]}={v.z:+.2f}" for v in report.verdicts)
    summary = (f"eps={min(ladder)}: {zs}; |z4| along ladder "
               f"{[round(z4[e], 2) for e in order]}")
    return CheckResult("C4 Gaussianity at small eps", bool(report.passed and trend), summary,
                       {"report": report.to_dict(), "z4": z4})


def check_gaussianity_at(config, lam=None, eps=None, z_threshold=4.0):
    lam = config.sim.lams[0] if lam is None else lam
    eps = config.sim.epss[0] if eps is None else eps
    params, phi, acc, _ = standard_run(config, lam, eps)
    reports = [cs.gaussianity_report(acc, f"u@{en._fmt(t)}:{phi.name}", z_threshold)
               for t in params.t_list]
    ok = all(r.passed for r in reports)
    worst = max(abs(v.z) for r in reports for v in r.verdicts)
    return CheckResult(f"gaussianity lam={lam} eps={eps}", bool(ok),
                       f"largest |z| over moments 3..8 and t_list: {worst:.2f}")


# -- 5: two-sided variance --------------------------------------------------------

def check_two_sided(config, lam=1.0, ladder=(0.4, 0.2, 0.1), r_lo=0.05):
    ok = True
    notes = []
    for t in config.sim.t_list:
        lowers, ratios = [], []
        for eps in ladder:
            params, phi, acc, _ = standard_run(config, lam, eps)
            res = cs.variance_two_sided(acc, t, phi, params.moll, r_lo)
            ok &= res.passed
            lowers.append(res.lower)
            ratios.append(res.ratio.value)
        ok &= min(lowers) >= max(lowers) / 2
        notes.append(f"t={_f(t)} ratios {[round(r, 3) for r in ratios]}")
    return CheckResult("C5 two-sided variance", bool(ok), "; ".join(notes))


# -- 6: coming down from infinity ---------------------------------------------------

def check_coming_down(config, lams=(1.0, 4.0, 16.0), eps=0.1):
    ok = True
    notes = []
    for lam in lams:
        params, _, acc, _ = standard_run(config, lam, eps)
        worst = 0.0
        for t in params.t_list:
            v = cs.coming_down_check(acc, t, params.lam_eps)
            ok &= v.passed
            worst = max(worst, v.value * 2 * params.lam_eps * t)
        notes.append(f"lam={_f(lam)} max E[u^2]*2lam_eps*t={worst:.3g}")
    return CheckResult("C6 coming down from infinity", bool(ok), "; ".join(notes))


# -- 7: sigma_lambda ladder --------------------------------------------------------

def paired_sigma(accs, s):
    """Integrated-covariance estimates for several ensembles with common noise.

    Ensembles share replica indices, so per-replica samples can be joined and
    differences get a paired standard error.
    """
    name = f"A@s={en._fmt(s)}"
    labels = sorted(accs)
    ids = None
    cols = []
    for lab in labels:
        i, v = accs[lab].sample_matrix()
        if ids is None:
            ids = i
        elif not np.array_equal(ids, i):
            raise ValueError("ensembles do not share replicas")
        cols.append(v[accs[lab].index[name]])
    any_acc = accs[labels[0]]
    names = [f"{name}#{k}" for k in range(len(labels))]
    joint = en.EnsembleAccumulator(names, any_acc.n_batches, keep_samples=False)
    joint.add(ids, np.array(cols))
    single = {lab: joint.variance(n) for lab, n in zip(labels, names)}
    diffs = {}
    for (a, na), (b, nb) in zip(zip(labels, names), list(zip(labels, names))[1:]):
        diffs[(a, b)] = joint.estimate(lambda m: (m[1] - m[0] ** 2) - (m[3] - m[2] ** 2),
                                       [("p", na, 1), ("p", na, 2), ("p", nb, 1), ("p", nb, 2)])
    return single, diffs


def check_sigma_ladder(config, lams=(0.0, 0.5, 2.0, 8.0, 32.0), eps=0.1, n_se=3.0):
    s = max(sigma_s_list(config, eps))
    accs = {lam: standard_run(config, lam, eps)[2] for lam in lams}
    single, diffs = paired_sigma(accs, s)
    steps_ok = all(d.value > n_se * d.se for d in diffs.values())
    halved = single[lams[-1]].value < single[lams[1]].value / 2
    params = config.params(1.0, eps)
    # pure-reaction predictor on the unit-scale field
    v0 = covariance_init(params.moll, params.grid) * eps ** params.d
    pred = [co.ode_layer_predictor(lam, v0)[1, 1] for lam in lams]
    pred_order = all(b < a for a, b in zip(pred, pred[1:]))
    est_order = all(single[b].value < single[a].value for a, b in zip(lams, lams[1:]))
    passed = steps_ok and halved and pred_order and est_order
    summary = (f"s={_f(s)} sigma2 {[round(single[l].value, 3) for l in lams]}, "
               f"paired gaps z {[round(d.value / d.se, 1) for d in diffs.values()]}, "
               f"predictor {[round(float(p), 4) for p in pred]}")
    return CheckResult("C7 sigma_lambda non-triviality", bool(passed), summary,
                       {"sigma2": {l: single[l].to_dict() for l in lams}, "predictor": pred})


# -- 8: creation of noise ----------------------------------------------------------

def check_creation_of_noise(config, lam=0.25, eps=0.1, n_se_corr=4.0, n_se_cov=3.0):
    params, phi, acc, _ = standard_run(config, lam, eps)
    t = params.t_list[-1]
    cc = cs.cross_correlation(acc, t, phi, params.moll)
    c = cc.correlation
    above0 = c.value >= n_se_corr * c.se
    below1 = 1 - c.value >= n_se_corr * c.se
    cov_ok = cc.covariance.value >= cc.reference - n_se_cov * cc.covariance.se
    summary = (f"corr={c.value:.6f}+-{c.se:.1e} ((1-corr)/SE={(1 - c.value) / c.se:.1f}); "
               f"E[u X]={cc.covariance.value:.4g}+-{cc.covariance.se:.2g} vs "
               f"||p_t*rho||^2={cc.reference:.4g}")
    return CheckResult("C8 creation of noise", bool(above0 and below1 and cov_ok), summary)


# -- 9: third chaos -----------------------------------------------------------------

def pi3_ladder(config, ladder=(0.4, 0.2, 0.1), t=None, scale=2):
    """``pi3 * t**(d/2)`` across ``ladder`` on a grid ``scale`` times the configured one."""
    g = config.grid
    grid = GridSpec(g.d, g.n * scale, g.L * scale, laplacian=g.laplacian)
    t = config.sim.t_list[-1] if t is None else t
    out = {}
    for eps in ladder:
        moll = MollifierSpec(eps * config.sim.base_width)
        out[eps] = cs.pi3_lower_bound(eps, t, moll, grid) * t ** (grid.d / 2)
    return grid, t, out


def check_third_chaos(config, ladder=(0.4, 0.2, 0.1), lam=1.0, eps=0.1, n_replicas=256,
                      n_se=3.0, tolerance=0.25):
    grid, t, values = pi3_ladder(config, ladder)
    vals = list(values.values())
    spread = max(vals) / min(vals) - 1
    # Monte Carlo at the first observation time on the configured grid
    params = config.params(lam, eps)
    t_mc = params.t_list[0]
    det = cs.pi3_lower_bound(eps, t_mc, params.moll, params.grid)
    obs = [en.wick_cube_terms(params, t_mc)]
    e = config.ensemble
    acc = en.ensemble_run(params.with_(lam=0.0), n_replicas, obs, seed=e.seed,
                          n_batches=e.n_batches, workers=e.workers, chunk=e.chunk)
    # the free run only supplies the initial data; F carries the coupling explicitly
    tag = en._fmt(t_mc)
    proj = cs.chaos_project(acc, None, products=(f"FF@{tag}", f"FG@{tag}", f"GG@{tag}"))
    target = lam**2 * det
    z = proj.energy3.z(target)
    passed = spread < tolerance and abs(z) <= n_se
    summary = (f"pi3*t^(d/2) {[f'{v:.4g}' for v in vals]} (spread {spread:.1%}); "
               f"MC chaos-3 energy {proj.energy3.value:.4g}+-{proj.energy3.se:.2g} vs "
               f"{target:.4g} (z={z:+.2f})")
    return CheckResult("C9 third-chaos lower bound", bool(passed), summary,
                       {"pi3": values, "grid_n": grid.n, "t": t})


# -- 10: decorrelation -------------------------------------------------------------

def check_decorrelation(config, lam=1.0, eps=0.1):
    params, _, acc, _ = standard_run(config, lam, eps)
    t = decorrelation_time(config)
    prof = cs.decorrelation_test(acc, t, decorrelation_offsets(params.grid), params.grid)
    far = [c for c, r in zip(prof.covariances, prof.distances) if r >= 6 * math.sqrt(t)]
    far_z = [abs(c["value"] / c["se"]) for c in far]
    summary = (f"t={_f(t)} slope={prof.slope:.4g}+-{prof.slope_se:.2g}, C_fit={prof.C_fit:.3g}, "
               f"{len(far)} offsets >= 6 sqrt(t), max |z|={max(far_z) if far_z else float('nan'):.2f}")
    return CheckResult("C10 decorrelation", bool(prof.passed and far), summary,
                       {"distances": prof.distances, "C_fit": prof.C_fit})


# -- 11: synthetic-field CLT ------------------------------------------------------

def synthetic_spec(lam=1.0):
    return co.SyntheticFieldSpec(GridSpec(1, 4096, 8.0), 0.4, "phi_lambda", lam)


def check_clt_oracle(config, ladder=(0.4, 0.1, 0.025), n_replicas=4096, z_threshold=4.0):
    enum_ok = all(co.pairing_count(k) == sum(1 for _ in co.enumerate_pairings(range(2 * k)))
                  for k in range(1, 6))
    spec = synthetic_spec()
    phi = TestFunction.make(spec.grid, "gaussian_bump", 1.0)
    table = co.clt_moment_test(spec, phi, ladder, 4, n_replicas,
                               seed=config.ensemble.seed, z_threshold=z_threshold)
    smallest = table[min(ladder)]
    ok = enum_ok and all(v.passed for v in smallest)
    zs = " ".join(f"{v.name.split(':')[-1]}:{v.z:+.2f}" for v in smallest)
    return CheckResult("C11 synthetic-field CLT", bool(ok),
                       f"pairings k<=5 {'exact' if enum_ok else 'WRONG'}; eps={min(ladder)} {zs}")


# -- 12: reproducibility -----------------------------------------------------------

def _small_config(config):
    return config.with_overrides().model_copy(update={
        "grid": config.grid.model_copy(update={"n": 16, "L": 0.32}),
        "sim": config.sim.model_copy(update={"t_list": [0.0016, 0.0032], "s_list": [0.0, 1.0],
                                             "phi_width": 0.04})})


def _acc_arrays(acc):
    return [acc.counts.astype(float), acc.powers, acc.cross]


def check_reproducibility(config, lam=1.0, eps=0.1, n_replicas=96):
    from .cli import ensemble_statistics_csv

    small = _small_config(config)
    params = small.params(lam, eps)
    phi = small.test_function()
    obs = [en.tested(phi, t) for t in params.t_list] + [en.pointwise_square(t) for t in params.t_list]
    seed = small.ensemble.seed

    def run(workers, first=0, n=n_replicas):
        return en.ensemble_run(params, n, obs, seed=seed, workers=workers, chunk=8,
                               first_replica=first)

    a1, a2 = run(1), run(1)
    same_bytes = ensemble_statistics_csv(a1, params) == ensemble_statistics_csv(a2, params)
    w2 = run(2)
    worker_diff = max(float(np.max(np.abs(x - y))) for x, y in zip(_acc_arrays(a1), _acc_arrays(w2)))
    p, q, r = run(1, 0, 32), run(1, 32, 32), run(1, 64, 32)
    left, right = (p + q) + r, p + (q + r)
    assoc = max(float(np.max(np.abs(x - y) / np.maximum(1.0, np.abs(x))))
                for x, y in zip(_acc_arrays(left), _acc_arrays(right)))
    full_vs_merged = max(float(np.max(np.abs(x - y) / np.maximum(1.0, np.abs(x))))
                         for x, y in zip(_acc_arrays(a1), _acc_arrays(left)))
    ok = same_bytes and worker_diff <= 1e-12 and assoc <= 1e-12 and full_vs_merged <= 1e-12
    return CheckResult("C12 reproducibility", bool(ok),
                       f"identical bytes={same_bytes}, workers 1 vs 2 max diff={worker_diff:.1e}, "
                       f"merge associativity {assoc:.1e}, split vs single {full_vs_merged:.1e}")


ACCEPTANCE = [
    ("C1", lambda c: check_deterministic(c)),
    ("C2", check_comparison),
    ("C3", check_free_field),
    ("C4", check_gaussianity),
    ("C5", check_two_sided),
    ("C6", check_coming_down),
    ("C7", check_sigma_ladder),
    ("C8", check_creation_of_noise),
    ("C9", check_third_chaos),
    ("C10", check_decorrelation),
    ("C11", check_clt_oracle),
    ("C12", check_reproducibility),
]

SUITES = {
    "deterministic": [check_deterministic, check_pairing_and_flow],
    "comparison": [check_comparison],
    "free-field": [check_free_field],
    "gaussianity": [check_gaussianity_at],
    "clt-desk": [fn for _, fn in ACCEPTANCE],
}


def run_suite(name, config):
    if name not in SUITES:
        raise KeyError(name)
    return [fn(config) for fn in SUITES[name]]
