"""Time integration of ``du/dt = Laplacian(u) - lam * u**3`` on the torus.

The heat part is propagated exactly in Fourier space; the reaction part is
propagated with its exact flow ``u / sqrt(1 + 2 lam t u**2)``. The two are
composed by Strang splitting. The tangent (linearised) equation
``dv/dt = Laplacian(v) - 3 lam u**2 v`` is integrated with the same splitting,
which makes it the exact derivative of the discrete solution map.

All array-level helpers accept arbitrary leading batch axes; the field-level
API wraps them for single fields.
"""
from __future__ import annotations

import functools
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import (InsufficientSnapshots, NonFiniteInput, NonFiniteState,
                     TimeNotInTrajectory, TrajectoryTooCoarse)
from .grid import ScalarField, irfft, read_field, rfft, write_field

TIME_RTOL = 1e-9


@functools.lru_cache(maxsize=32)
def _heat_multipliers(grid, duration):
    m = np.exp(-grid.symbol() * duration)
    m.setflags(write=False)
    return m


@functools.lru_cache(maxsize=16)
def _dealias_mask(grid):
    n = grid.n
    keep_full = np.abs(np.fft.fftfreq(n, d=1.0 / n)) <= n // 3
    keep_half = np.fft.rfftfreq(n, d=1.0 / n) <= n // 3
    parts = [keep_full] * (grid.d - 1) + [keep_half]
    mesh = np.meshgrid(*parts, indexing="ij", sparse=True)
    mask = functools.reduce(np.logical_and, mesh).astype(float)
    mask.setflags(write=False)
    return mask


@dataclass(frozen=True)
class HeatSymbol:
    """Fourier multipliers ``exp(-sigma(k) * duration)`` of the torus heat semigroup."""

    grid: object
    duration: float

    def __post_init__(self):
        if not self.duration >= 0:
            raise ValueError("heat duration must be nonnegative")

    @property
    def multipliers(self):
        return _heat_multipliers(self.grid, float(self.duration))

    def __matmul__(self, other):
        if other.grid != self.grid:
            raise ValueError("symbols on different grids")
        return HeatSymbol(self.grid, self.duration + other.duration)

    def apply(self, values):
        return heat_array(values, self.grid, self.duration)


def heat_array(values, grid, t, mask=None):
    if t == 0 and mask is None:
        return np.array(values, dtype=float)
    mult = _heat_multipliers(grid, float(t))
    if mask is not None:
        mult = mult * mask
    return irfft(rfft(values, grid) * mult, grid)


def heat_propagate(f, t):
    """Exact torus heat evolution of ``f`` over time ``t``; advances the time stamp."""
    if not t >= 0:
        raise ValueError(f"heat propagation time must be nonnegative, got {t}")
    if not np.all(np.isfinite(f.values)):
        raise NonFiniteInput("cannot propagate a non-finite field")
    return ScalarField(f.grid, heat_array(f.values, f.grid, t), f.time + t)


def cubic_flow_array(u, lam, t, truncation=None):
    """Exact flow of ``du/dt = -lam * u**3`` (or its truncation at ``u**2 = R``)."""
    if lam == 0 or t == 0:
        return np.array(u, dtype=float)
    if truncation is None:
        return u / np.sqrt(1.0 + 2.0 * lam * t * u * u)
    # du/dt = -lam * min(u**2, R) * u: linear decay until |u| = sqrt(R), cubic after
    R = truncation
    a = np.abs(u)
    out = u / np.sqrt(1.0 + 2.0 * lam * t * u * u)
    big = a * a > R
    if np.any(big):
        ab = a[big]
        tau = np.log(ab / math.sqrt(R)) / (lam * R)
        linear = ab * np.exp(-lam * R * t)
        rest = np.maximum(t - tau, 0.0)
        cubic = math.sqrt(R) / np.sqrt(1.0 + 2.0 * lam * rest * R)
        out[big] = np.sign(u[big]) * np.where(tau >= t, linear, cubic)
    return out


def cubic_flow(f, lam, t, truncation=None):
    """Pointwise ``Phi(u) = u / sqrt(1 + 2 lam t u**2)``; the time stamp is unchanged."""
    if lam < 0 or t < 0:
        raise ValueError("cubic flow needs lam >= 0 and t >= 0")
    return ScalarField(f.grid, cubic_flow_array(f.values, lam, t, truncation), f.time)


@dataclass(frozen=True)
class StepScheme:
    """Time-step policy.

    The nominal step at time ``t`` is ``clip(growth * t, dt, dt_max)``; with
    ``growth = 0`` it is the constant ``dt``. Steps are shrunk locally so that
    every requested snapshot time is hit exactly. ``truncation`` replaces
    ``u**3`` by ``min(u**2, R) u``; ``dealias`` applies the 2/3 rule after each
    reaction sub-step.
    """

    dt: float
    dt_max: float | None = None
    growth: float = 0.0
    truncation: float | None = None
    dealias: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.dt_max is not None and self.dt_max < self.dt:
            raise ValueError("dt_max must be >= dt")
        if self.growth < 0:
            raise ValueError("growth must be nonnegative")
        if self.truncation is not None and not self.truncation > 0:
            raise ValueError("truncation level R must be positive")

    def nominal(self, t):
        if self.growth == 0:
            return self.dt
        cap = self.dt_max if self.dt_max is not None else math.inf
        return min(cap, max(self.dt, self.growth * t))

    def halved(self):
        return StepScheme(self.dt / 2, None if self.dt_max is None else self.dt_max / 2,
                          self.growth / 2, self.truncation, self.dealias)

    def to_dict(self):
        return asdict(self)


def _check_times(t0, times):
    times = [float(t) for t in times]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("snapshot times must be ascending")
    if times and times[0] < t0 - TIME_RTOL * max(1.0, abs(t0)):
        raise ValueError(f"first snapshot time {times[0]} precedes the initial time {t0}")
    return times


def iter_steps(t0, times, scheme):
    """Yield ``(step, t_end, snapshot_index_or_None)`` for the whole schedule."""
    t = float(t0)
    for i, target in enumerate(_check_times(t0, times)):
        while target - t > TIME_RTOL * max(target, 1e-300):
            nominal = scheme.nominal(t)
            remaining = target - t
            if remaining <= nominal * (1 + 1e-9):
                step, t_next = remaining, target
            elif remaining < 2 * nominal:
                step = remaining / 2
                t_next = t + step
            else:
                step, t_next = nominal, t + nominal
            yield step, t_next, None
            t = t_next
        t = target
        yield 0.0, t, i


def step_times(t0, times, scheme):
    """Every step endpoint (including ``t0``) the integrator visits for ``times``."""
    out = [float(t0)]
    for step, t, _ in iter_steps(t0, times, scheme):
        if step > 0:
            out.append(t)
    return out


def integrate(u0, grid, lam, scheme, t0, times, on_snapshot=None):
    """Strang-split integration of a batch of states.

    ``u0`` may carry leading batch axes. Snapshots are passed to
    ``on_snapshot(index, time, values)`` when given, otherwise returned as
    a list of arrays. Consecutive heat half-steps are fused, so each step
    costs one forward and one inverse FFT.
    """
    if lam < 0:
        raise ValueError("coupling must be nonnegative")
    u = np.array(u0, dtype=float)
    pending = 0.0
    masked = False
    mask = _dealias_mask(grid) if scheme.dealias else None
    out = []
    k = 0
    for step, t, snap in iter_steps(t0, times, scheme):
        if step > 0:
            u = heat_array(u, grid, pending + step / 2, mask if masked else None)
            u = cubic_flow_array(u, lam, step, scheme.truncation)
            pending = step / 2
            masked = scheme.dealias
            k += 1
            continue
        if pending > 0 or masked:
            u = heat_array(u, grid, pending, mask if masked else None)
            pending, masked = 0.0, False
        if not np.all(np.isfinite(u)):
            finite = np.abs(u[np.isfinite(u)])
            raise NonFiniteState(
                f"non-finite state at step {k} (t={t})", step=k,
                max_value=float(finite.max()) if finite.size else None)
        if on_snapshot is not None:
            on_snapshot(snap, t, u)
        else:
            out.append(u.copy())
    return out


def strang_step(f, lam, dt, truncation=None):
    """``H(dt/2) o Phi(lam, dt) o H(dt/2)``; advances the time stamp by ``dt``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    g = f.grid
    u = heat_array(f.values, g, dt / 2)
    u = cubic_flow_array(u, lam, dt, truncation)
    u = heat_array(u, g, dt / 2)
    return ScalarField(g, u, f.time + dt)


class Trajectory:
    """Ordered snapshots of one solution plus run metadata."""

    def __init__(self, fields, meta=None):
        fields = list(fields)
        if not fields:
            raise InsufficientSnapshots("a trajectory needs at least one snapshot")
        grid = fields[0].grid
        if any(f.grid != grid for f in fields):
            raise ValueError("all snapshots must share one grid")
        times = [f.time for f in fields]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("snapshot times must be ascending")
        self.grid = grid
        self.fields = fields
        self.meta = dict(meta or {})

    @property
    def times(self):
        return np.array([f.time for f in self.fields])

    def __len__(self):
        return len(self.fields)

    def __iter__(self):
        return iter(self.fields)

    def __getitem__(self, i):
        return self.fields[i]

    def index(self, t):
        times = self.times
        j = int(np.argmin(np.abs(times - t)))
        if abs(times[j] - t) > TIME_RTOL * max(1.0, abs(t)):
            raise TimeNotInTrajectory(f"no snapshot at t={t}")
        return j

    def at(self, t):
        return self.fields[self.index(t)]

    def window(self, t, T):
        """Snapshots with times in ``[t, T]`` (inclusive, up to rounding)."""
        tol = TIME_RTOL * max(1.0, abs(T))
        return [f for f in self.fields if t - tol <= f.time <= T + tol]

    def map(self, fn):
        return Trajectory([fn(f) for f in self.fields], self.meta)

    def __neg__(self):
        return self.map(lambda f: -f)

    def __add__(self, other):
        if not np.allclose(self.times, other.times):
            raise ValueError("trajectories have different snapshot times")
        return Trajectory([a + b for a, b in zip(self, other)], self.meta)

    def write(self, directory):
        """One binary record per snapshot plus ``trajectory.json`` manifest."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, f in enumerate(self.fields):
            name = f"snapshot_{i:04d}.bin"
            write_field(directory / name, f)
            entries.append({"file": name, "time": f.time})
        manifest = {"laplacian": self.grid.laplacian, "meta": self.meta, "snapshots": entries}
        (directory / "trajectory.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return directory / "trajectory.json"

    @classmethod
    def read(cls, directory):
        directory = Path(directory)
        manifest = json.loads((directory / "trajectory.json").read_text())
        fields = [read_field(directory / e["file"], laplacian=manifest["laplacian"])
                  for e in manifest["snapshots"]]
        return cls(fields, manifest["meta"])


def solve(f0, lam, scheme, times):
    """Snapshots of the solution started from ``f0`` at the requested times."""
    grid = f0.grid
    arrays = integrate(f0.values, grid, lam, scheme, f0.time, times)
    fields = [ScalarField(grid, a, t) for a, t in zip(arrays, _check_times(f0.time, times))]
    return Trajectory(fields, {"lambda": lam, "scheme": scheme.to_dict()})


def linearized_solve(u_traj, v0, lam, scheme):
    """Tangent of the splitting along a dense trajectory.

    ``u_traj`` must contain the state at every step endpoint (spacing at most
    ``scheme.dt``). Over a step of size ``s`` starting at ``u``, ``v`` receives
    ``H(s/2)``, then the pointwise factor ``exp(-3 lam int u(r)**2 dr)`` along
    the exact reaction flow from ``H(s/2) u``, which equals
    ``(1 + 2 lam s u_mid**2)**-1.5``, then ``H(s/2)``. Each factor lies in
    ``(0, 1]``, so ``0 <= v <= heat(v0)`` whenever ``v0 >= 0``.
    """
    fields = list(u_traj)
    grid = v0.grid
    if fields[0].grid != grid:
        raise ValueError("trajectory and perturbation live on different grids")
    if abs(fields[0].time - v0.time) > TIME_RTOL * max(1.0, v0.time):
        raise ValueError("perturbation must start at the first snapshot time")
    v = np.array(v0.values)
    for a, b in zip(fields, fields[1:]):
        s = b.time - a.time
        if s > scheme.dt * (1 + 1e-9) and (scheme.dt_max is None or s > scheme.nominal(a.time) * (1 + 1e-9)):
            raise TrajectoryTooCoarse(
                f"snapshot spacing {s} at t={a.time} exceeds the step {scheme.nominal(a.time)}")
        if s <= 0:
            continue
        v = heat_array(v, grid, s / 2)
        u_mid = heat_array(a.values, grid, s / 2)
        v = v * (1.0 + 2.0 * lam * s * u_mid * u_mid) ** -1.5
        v = heat_array(v, grid, s / 2)
    return ScalarField(grid, v, fields[-1].time)


def _trapezoid_weights(times):
    times = np.asarray(times, dtype=float)
    w = np.zeros_like(times)
    dt = np.diff(times)
    w[:-1] += dt / 2
    w[1:] += dt / 2
    return w


def _uniform(times):
    if len(times) < 2:
        return False
    dt = np.diff(times)
    return np.allclose(dt, dt[0], rtol=1e-6, atol=0)


def mild_residual(traj, lam, t, T):
    """Sup-norm residual of the mild (Duhamel) form between ``t`` and ``T``.

    ``u(T) - H(T-t) u(t) + lam * int_t^T H(T-s) u(s)**3 ds`` with the time
    integral evaluated by the trapezoid rule over the stored snapshots.
    """
    window = traj.window(t, T)
    times = np.array([f.time for f in window])
    if len(window) < 2 or not _uniform(times):
        raise InsufficientSnapshots(
            f"need uniformly spaced snapshots spanning [{t}, {T}], got {len(window)}")
    if abs(times[0] - t) > TIME_RTOL * max(1, T) or abs(times[-1] - T) > TIME_RTOL * max(1, T):
        raise InsufficientSnapshots("snapshots do not span the requested interval")
    grid = traj.grid
    w = _trapezoid_weights(times)
    duhamel_hat = 0
    for wi, f in zip(w, window):
        duhamel_hat = duhamel_hat + wi * rfft(f.values ** 3, grid) * _heat_multipliers(grid, float(T - f.time))
    duhamel = irfft(duhamel_hat, grid)
    r = window[-1].values - heat_array(window[0].values, grid, T - t) + lam * duhamel
    return float(np.max(np.abs(r)))
