"""Estimators and verdicts built on :class:`EnsembleAccumulator`.

Every verdict is a pure function of estimates, standard errors and declared
thresholds, so it can be recomputed from persisted statistics.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .ensemble import Estimate, _fmt
from .errors import (MissingSnapshot, NegativeTestFunction, NoiseNotStored,
                     QuadratureUnderResolved)
from .grid import _covariance_values, _mollifier_values, irfft, rfft
from .propagators import _heat_multipliers, heat_array

Z_THRESHOLD = 4.0
GAUSSIAN_TARGETS = {3: 0.0, 4: 3.0, 5: 0.0, 6: 15.0, 7: 0.0, 8: 105.0}


@dataclass
class Verdict:
    name: str
    passed: bool
    value: float
    se: float
    target: float | None = None
    z: float | None = None
    detail: str = ""

    def to_dict(self):
        return asdict(self)


def _require(acc, name):
    if name not in acc:
        raise MissingSnapshot(f"statistic {name!r} was not registered")


def _clean(x):
    x = float(x)
    return None if math.isnan(x) else x


@dataclass
class MomentReport:
    """Moments and pair statistics with standard errors and verdicts."""

    observables: dict = field(default_factory=dict)
    pairs: dict = field(default_factory=dict)
    verdicts: list = field(default_factory=list)
    z_threshold: float = Z_THRESHOLD

    @property
    def passed(self):
        return all(v.passed for v in self.verdicts)

    def to_dict(self):
        return {"observables": self.observables, "pairs": self.pairs,
                "verdicts": [v.to_dict() for v in self.verdicts],
                "z_threshold": self.z_threshold}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_clean)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["observable", "statistic", "value", "se"])
        for name in sorted(self.observables):
            for stat, est in sorted(self.observables[name].items()):
                w.writerow([name, stat, repr(est["value"]), repr(est["se"])])
        for name in sorted(self.pairs):
            for stat, est in sorted(self.pairs[name].items()):
                w.writerow([name, stat, repr(est["value"]), repr(est["se"])])
        return buf.getvalue()


def z_verdict(name, est, target, z_threshold=Z_THRESHOLD):
    z = est.z(target)
    return Verdict(name, bool(abs(z) <= z_threshold), est.value, est.se, target, z)


def gaussianity_report(acc, name, z_threshold=Z_THRESHOLD, max_order=8):
    """Standardised moments 3..``max_order`` against the Gaussian values 0, 3, 0, 15, 0, 105."""
    _require(acc, name)
    report = MomentReport(z_threshold=z_threshold)
    stats = {"mean": acc.mean(name), "variance": acc.variance(name)}
    for k in range(3, max_order + 1):
        est = acc.standardized_moment(name, k)
        stats[f"m{k}"] = est
        report.verdicts.append(z_verdict(f"{name}:m{k}", est, GAUSSIAN_TARGETS[k], z_threshold))
    report.observables[name] = {k: v.to_dict() for k, v in stats.items()}
    return report


def sigma_lambda_estimate(acc, s):
    """Integrated covariance at microscopic time ``s``: the variance of the spatial average."""
    name = f"A@s={_fmt(s)}"
    _require(acc, name)
    return acc.variance(name)


def sigma_ladder(acc, s_list):
    return {s: sigma_lambda_estimate(acc, s) for s in s_list}


def free_variance(phi, moll, t):
    """``||p_t * rho * phi||**2``, the exact variance of ``<u(t), phi>`` when ``lam = 0``."""
    g = phi.grid
    rho_hat = rfft(_mollifier_values(moll, g), g) * g.cell
    v = irfft(rfft(phi.field.values, g) * rho_hat * _heat_multipliers(g, float(t)), g)
    return float(g.cell * np.sum(v * v))


@dataclass
class TwoSidedResult:
    ratio: Estimate
    reference: float
    lower: float
    passed: bool


def variance_two_sided(acc, t, phi, moll, r_lo=0.05):
    """Second moment of ``<u(t), phi>`` over ``||p_t * rho * phi||**2``."""
    if np.any(phi.field.values < 0):
        raise NegativeTestFunction("the two-sided variance bound needs phi >= 0")
    name = f"u@{_fmt(t)}:{phi.name}"
    _require(acc, name)
    ref = free_variance(phi, moll, t)
    m2 = acc.raw_moment(name, 2)
    ratio = Estimate(m2.value / ref, m2.se / ref)
    passed = r_lo <= ratio.value <= 1 + 3 * ratio.se
    return TwoSidedResult(ratio, ref, ratio.value - 3 * ratio.se, bool(passed))


def coming_down_check(acc, t, lam_eps, n_se=3.0):
    """``E[u(t, 0)**2] <= 1 / (2 lam_eps t) + n_se SE``."""
    name = f"u2@{_fmt(t)}"
    _require(acc, name)
    est = acc.mean(name)
    bound = math.inf if lam_eps == 0 else 1.0 / (2 * lam_eps * t)
    passed = est.value <= bound + n_se * (est.se if est.se == est.se else 0.0)
    return Verdict(f"coming-down@{_fmt(t)}", bool(passed), est.value, est.se, bound,
                   None if math.isinf(bound) else est.z(bound))


@dataclass
class DecorrelationProfile:
    t: float
    distances: list
    covariances: list
    slope: float
    slope_se: float
    C_fit: float
    far_ok: bool
    passed: bool
    far_distances: list


def decorrelation_test(acc, t, offsets, grid, p=2, q=2, n_se=3.0, fit_z=3.0):
    """Product covariances ``Cov(u**p(0), u**q(r))`` and their Gaussian-tail fit.

    ``log|Cov|`` is fitted against ``|r|**2`` over offsets whose covariance is
    resolved (``z > fit_z``); ``C_fit = -1 / (slope t)``. Offsets at distance
    ``>= 6 sqrt(t)`` must be within ``n_se`` SE of zero.
    """
    tag = _fmt(t)
    square = f"u2@{tag}"
    dist, covs = [], []
    for r in offsets:
        r = tuple(int(o) for o in r)
        name = f"pq{p}{q}@{tag}:{','.join(map(str, r))}"
        _require(acc, name)
        if p == 2 and q == 2:
            _require(acc, square)
            est = acc.estimate(lambda m: m[0] - m[1] ** 2, [("p", name, 1), ("p", square, 1)])
        else:
            est = acc.mean(name)
        dist.append(grid.h * math.sqrt(sum(o * o for o in r)))
        covs.append(est)
    dist = np.array(dist)
    usable = [i for i, c in enumerate(covs) if c.value > 0 and c.se > 0 and c.value / c.se > fit_z]
    slope = slope_se = math.nan
    if len(usable) >= 2:
        x = dist[usable] ** 2
        y = np.log([covs[i].value for i in usable])
        sig = np.array([covs[i].se / covs[i].value for i in usable])
        wts = 1 / sig**2
        X = np.stack([np.ones_like(x), x], axis=1)
        A = X.T @ (X * wts[:, None])
        coef = np.linalg.solve(A, X.T @ (wts * y))
        slope = float(coef[1])
        slope_se = float(math.sqrt(np.linalg.inv(A)[1, 1]))
    C_fit = -1.0 / (slope * t) if slope < 0 else math.inf
    far = [i for i, r in enumerate(dist) if r >= 6 * math.sqrt(t)]
    far_ok = all(abs(covs[i].z(0.0)) <= n_se for i in far)
    passed = bool(slope < 0 and math.isfinite(C_fit) and far_ok)
    return DecorrelationProfile(t, dist.tolist(), [c.to_dict() for c in covs], slope, slope_se,
                                C_fit, bool(far_ok), passed, dist[far].tolist())


@dataclass
class CrossCorrelation:
    correlation: Estimate
    covariance: Estimate | None
    reference: float | None


def cross_correlation(acc, t, phi, moll=None, pointwise=True):
    """Pearson correlation of ``<u(t), phi>`` with ``<p_t * u(0), phi>``.

    With ``pointwise`` and ``moll`` the site-averaged ``E[u(t, x) (p_t * u(0))(x)]``
    is reported next to ``||p_t * rho||**2``.
    """
    tag = _fmt(t)
    a, b = f"u@{tag}:{phi.name}", f"X@{tag}:{phi.name}"
    _require(acc, a)
    _require(acc, b)
    corr = acc.correlation(a, b)
    cov = ref = None
    if pointwise and moll is not None and f"uX@{tag}" in acc:
        cov = acc.mean(f"uX@{tag}")
        g = phi.grid
        v = heat_array(_mollifier_values(moll, g), g, t)
        ref = float(g.cell * np.sum(v * v))
    return CrossCorrelation(corr, cov, ref)


def lambda_monotonicity(estimates, n_se=3.0):
    """``estimates``: mapping ``lam -> Estimate`` of the integrated covariance.

    Passes when consecutive values decrease by more than ``n_se`` combined SE
    and the value at the largest coupling is below half the value at the
    second smallest.
    """
    lams = sorted(estimates)
    steps = []
    for a, b in zip(lams, lams[1:]):
        ea, eb = estimates[a], estimates[b]
        gap = ea.value - eb.value
        se = math.hypot(ea.se, eb.se)
        steps.append((a, b, gap, se, bool(gap > n_se * se)))
    halved = len(lams) >= 2 and estimates[lams[-1]].value < estimates[lams[1]].value / 2
    return {"steps": steps, "halved": bool(halved),
            "passed": bool(all(s[-1] for s in steps) and halved)}


# -- chaos projections ----------------------------------------------------------

@dataclass
class ChaosProjection:
    total: Estimate
    kernel: np.ndarray | None = None
    energy1: Estimate | None = None
    energy3: Estimate | None = None
    beta: Estimate | None = None
    residual: Estimate | None = None


def first_chaos(acc, name, grid):
    """Kernel ``k(y) = E[F xi(y)]`` and an unbiased estimate of ``h**d sum k**2``.

    With discrete noise of variance ``h**-d`` per site, ``F = h**d sum xi f``
    has kernel ``f``. The energy uses products of kernel estimates from
    distinct batches, which removes the positive bias of ``sum k_hat**2``;
    its SE is a delete-one-batch jackknife.
    """
    if name not in acc.kernels:
        raise NoiseNotStored(f"no noise pairing was accumulated for {name!r}")
    K = acc.kernels[name]
    n = acc.counts.astype(float)
    used = n > 0
    K, n = K[used], n[used]
    kernel = K.sum(axis=0) / n.sum()

    def energy(Kb, nb):
        tot = Kb.sum(axis=0)
        num = grid.cell * (np.sum(tot * tot) - np.sum(Kb * Kb))
        return num / (nb.sum() ** 2 - np.sum(nb * nb))

    value = float(energy(K, n))
    B = len(n)
    jack = np.array([energy(np.delete(K, i, axis=0), np.delete(n, i)) for i in range(B)])
    se = math.sqrt((B - 1) / B * np.sum((jack - jack.mean()) ** 2))
    return kernel, Estimate(value, se)


def chaos_project(acc, name, direction=None, products=None, grid=None):
    """Chaos decomposition of the observable ``name``.

    The third-chaos part is the regression of ``F`` onto a known third-chaos
    direction ``G``: ``beta = E[F G] / E[G**2]``, energy ``beta**2 E[G**2]``.
    ``products`` names site-averaged ``(F**2, F G, G**2)`` statistics and
    replaces the per-replica pair ``(name, direction)`` when given.
    """
    if products is not None:
        ff, fg, gg = products
        total = acc.mean(ff)
        mfg = ("p", fg, 1)
        mgg = ("p", gg, 1)
    else:
        _require(acc, name)
        total = acc.variance(name)
        if direction is not None:
            mfg = ("x", name, direction)
            mgg = ("p", direction, 2)
    proj = ChaosProjection(total)
    if grid is not None and products is None:
        proj.kernel, proj.energy1 = first_chaos(acc, name, grid)
    if products is not None or direction is not None:
        proj.beta = acc.estimate(lambda m: m[0] / m[1], [mfg, mgg])
        e3 = acc.estimate(lambda m: m[0] ** 2 / m[1], [mfg, mgg])
        proj.energy3 = e3
    parts = [e for e in (proj.energy1, proj.energy3) if e is not None]
    if parts:
        val = total.value - sum(e.value for e in parts)
        se = math.sqrt(total.se ** 2 + sum(e.se ** 2 for e in parts))
        proj.residual = Estimate(val, se)
    return proj


def pi3_time_grid(t, width, steps_per_width2=8):
    """Uniform trapezoid nodes on ``[0, t]`` with spacing at most ``width**2 / steps``."""
    if t <= 0:
        return np.zeros(1), np.zeros(1)
    M = max(1, math.ceil(t * steps_per_width2 / width**2 - 1e-9))
    s = np.linspace(0.0, t, M + 1)
    w = np.full(M + 1, t / M)
    w[0] = w[-1] = t / (2 * M)
    return s, w


def pi3_lower_bound(eps, t, moll, grid, steps_per_width2=8, min_steps_per_width2=2):
    """``6 eps**(2d-4) int int [p_{2t-s-s'} * (p_{s+s'} * C)**3](0) ds ds'``.

    ``C`` is the covariance of the mollified noise and ``moll`` its (already
    rescaled) mollifier. The double integral is a tensor trapezoid rule on a
    uniform grid, so the integrand is only needed at ``s + s' = k * ds``.
    """
    if steps_per_width2 < min_steps_per_width2:
        raise QuadratureUnderResolved(
            f"time step width**2/{steps_per_width2} is coarser than width**2/{min_steps_per_width2}")
    if t <= 0:
        return 0.0
    s, w = pi3_time_grid(t, moll.width, steps_per_width2)
    W = np.convolve(w, w)
    ds = s[1] - s[0]
    C_hat = rfft(_covariance_values(moll, grid), grid)
    total = 0.0
    for k, Wk in enumerate(W):
        r = k * ds
        Cr = irfft(C_hat * _heat_multipliers(grid, r), grid)
        total += Wk * float(irfft(rfft(Cr ** 3, grid) * _heat_multipliers(grid, 2 * t - r), grid).flat[0])
    return 6 * eps ** (2 * grid.d - 4) * total
