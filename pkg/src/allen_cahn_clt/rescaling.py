"""Diffusively rescaled runs, tested observables and first-Picard objects.

A run of ``du/dt = Laplacian(u) - lam * eps**(d-2) * u**3`` starts from white
noise convolved with the mollifier of width ``eps * base_width``. Besides the
requested observation times, snapshots are stored at the microscopic times
``s * eps**2``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EpsilonUnresolvable, SnapshotMismatch, WidthUnresolvable
from .grid import (GridSpec, MollifierSpec, ScalarField, bump, covariance_field,
                   initial_condition_array, inner_product, irfft, rfft,
                   white_noise_array)
from .propagators import (Trajectory, _heat_multipliers, _trapezoid_weights,
                          heat_propagate, integrate, step_times)


def effective_coupling(lam, eps, d):
    """``lam * eps**(d - 2)``."""
    if lam < 0:
        raise ValueError("coupling must be nonnegative")
    if not 0 < eps <= 1:
        raise ValueError(f"eps must lie in (0, 1], got {eps}")
    if d < 1:
        raise ValueError("dimension must be >= 1")
    return lam * eps ** (d - 2)


DEFAULT_S_LIST = tuple(range(17))


@dataclass(frozen=True)
class SimParams:
    """Physical and numerical parameters of one rescaled run."""

    grid: GridSpec
    lam: float
    eps: float
    base_width: float
    scheme: object
    t_list: tuple
    s_list: tuple = DEFAULT_S_LIST
    lam_eps: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "t_list", tuple(sorted(float(t) for t in self.t_list)))
        object.__setattr__(self, "s_list", tuple(sorted(float(s) for s in self.s_list)))
        if not self.t_list or self.t_list[0] <= 0:
            raise ValueError("observation times must be strictly positive")
        if any(s < 0 for s in self.s_list):
            raise ValueError("microscopic times must be nonnegative")
        object.__setattr__(self, "lam_eps", effective_coupling(self.lam, self.eps, self.grid.d))
        try:
            covariance_field(self.moll, self.grid)
        except WidthUnresolvable as exc:
            raise EpsilonUnresolvable(f"eps={self.eps}: {exc}") from None

    @property
    def d(self):
        return self.grid.d

    @property
    def moll(self):
        return MollifierSpec(self.eps * self.base_width)

    @property
    def micro_times(self):
        return tuple(s * self.eps**2 for s in self.s_list)

    @property
    def snapshot_times(self):
        """``{0} U micro times U t_list``, deduplicated and ascending."""
        out = []
        for t in sorted({0.0, *self.micro_times, *self.t_list}):
            if not out or t - out[-1] > 1e-12 * max(1.0, t):
                out.append(t)
        return tuple(out)

    def with_(self, **changes):
        kw = {k: getattr(self, k) for k in
              ("grid", "lam", "eps", "base_width", "scheme", "t_list", "s_list")}
        kw.update(changes)
        return SimParams(**kw)


def _periodic_distance(grid, center):
    c = grid.coords()
    axes = []
    for ax in range(grid.d):
        x = c - center[ax]
        axes.append((x + grid.L / 2) % grid.L - grid.L / 2)
    mesh = np.meshgrid(*axes, indexing="ij", sparse=True)
    return np.broadcast_to(np.sqrt(sum(m * m for m in mesh)), grid.shape)


@dataclass(frozen=True, eq=False)
class TestFunction:
    """Smooth test function ``phi`` sampled on a grid."""

    __test__ = False

    kind: str
    center: tuple
    width: float
    field: ScalarField
    name: str = "phi"

    @classmethod
    def make(cls, grid, kind="gaussian_bump", width=1.0, center=None, name="phi"):
        center = tuple(float(c) for c in (center if center is not None else (0.0,) * grid.d))
        if len(center) != grid.d:
            raise ValueError(f"center must have {grid.d} components")
        r = _periodic_distance(grid, center)
        if kind == "gaussian_bump":
            if 4 * width > grid.L / 2:
                raise ValueError("gaussian test function does not decay within the torus")
            values = np.exp(-r**2 / (2 * width**2))
        elif kind == "bump":
            if width >= grid.L / 2:
                raise ValueError("bump test function does not fit in the torus")
            values = bump(r, width)
        else:
            raise ValueError(f"unknown test function kind {kind!r}")
        return cls(kind, center, float(width), ScalarField(grid, values), name)

    @property
    def grid(self):
        return self.field.grid

    @property
    def norm(self):
        return math.sqrt(inner_product(self.field, self.field))

    def heat(self, t):
        """``p_t * phi`` as a field."""
        return heat_propagate(self.field, t).with_time(0.0)


def initial_noise(params, rng):
    return white_noise_array(params.grid, rng)


def simulate_rescaled(params, rng, times=None, dense=False, keep_noise=False):
    """Solve the rescaled equation from ``rho_eps * xi`` with ``xi`` drawn from ``rng``.

    Snapshots are taken at ``params.snapshot_times`` (or ``times``). With
    ``dense`` every integrator step is stored, which is what the linearised
    solver and the Picard quadratures need.
    """
    grid = params.grid
    noise = initial_noise(params, rng)
    u0 = initial_condition_array(grid, params.moll, noise)
    times = list(params.snapshot_times if times is None else times)
    if dense:
        times = step_times(0.0, times, params.scheme)
    arrays = integrate(u0, grid, params.lam_eps, params.scheme, 0.0, times)
    fields = [ScalarField(grid, a, t) for a, t in zip(arrays, times)]
    meta = {"lambda": params.lam, "eps": params.eps, "lambda_eps": params.lam_eps,
            "seed": rng.seed, "replica": rng.replica, "scheme": params.scheme.to_dict()}
    traj = Trajectory(fields, meta)
    traj.noise = ScalarField(grid, noise) if keep_noise else None
    return traj


def observable(traj, t, phi):
    """``<u(t), phi>``."""
    return inner_product(traj.at(t), phi.field)


def picard_X(traj, t):
    """Free field ``p_t * u(0)``."""
    return heat_propagate(traj.at(0.0), t)


heat_of_initial = picard_X


def _shared_window(trajs, t):
    base = trajs[0]
    window_times = [f.time for f in base.window(0.0, t)]
    for other in trajs[1:]:
        if [f.time for f in other.window(0.0, t)] != window_times:
            raise SnapshotMismatch("trajectories do not share snapshot times on [0, t]")
    if len(window_times) < 2 or window_times[0] != 0.0 or \
            abs(window_times[-1] - t) > 1e-9 * max(1.0, t):
        raise SnapshotMismatch(f"snapshots do not span [0, {t}]")
    return np.array(window_times), [tr.window(0.0, t) for tr in trajs]


def picard_N(f, g, h, t, eps, d):
    """``eps**(d-2) * int_0^t p_{t-s} * (f g h)(s) ds`` by the trapezoid rule."""
    times, (wf, wg, wh) = _shared_window([f, g, h], t)
    grid = f.grid
    w = _trapezoid_weights(times)
    acc = 0
    for wi, a, b, c in zip(w, wf, wg, wh):
        prod = a.values * b.values * c.values
        acc = acc + wi * rfft(prod, grid) * _heat_multipliers(grid, float(t - a.time))
    return ScalarField(grid, eps ** (d - 2) * irfft(acc, grid), t)


def write_observable_rows(path, rows):
    """CSV with one ``replica,t,phi,value`` row per observation."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["replica", "t", "phi", "value"])
        for replica, t, phi_id, value in rows:
            w.writerow([int(replica), repr(float(t)), phi_id, repr(float(value))])


def read_observable_rows(path):
    with open(path, newline="") as fh:
        return [(int(r["replica"]), float(r["t"]), r["phi"], float(r["value"]))
                for r in csv.DictReader(fh)]
