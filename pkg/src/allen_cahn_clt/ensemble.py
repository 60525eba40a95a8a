"""Monte Carlo ensembles: observable registry, mergeable accumulator, runner.

Replicas are processed in fixed chunks of consecutive indices. Each chunk is
integrated as one batched array and produces its own accumulator; chunk
accumulators are merged in chunk order, so results do not depend on the
number of worker processes.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import multiprocessing as mp

import numpy as np

from .errors import NonFiniteState, ReplicaFailure
from .grid import (RngStream, initial_condition_array, irfft, rfft,
                   white_noise_array, _covariance_values)
from .propagators import _heat_multipliers, integrate

MAX_POWER = 8
MIN_BATCHES = 16
WORKERS_ENV = "ALLEN_CAHN_WORKERS"


@dataclass(frozen=True)
class Estimate:
    value: float
    se: float

    def z(self, target):
        if not self.se > 0:
            return 0.0 if self.value == target else math.copysign(math.inf, self.value - target)
        return (self.value - target) / self.se

    def to_dict(self):
        return {"value": self.value, "se": self.se}


class EnsembleAccumulator:
    """Per-batch power sums, cross products and noise-pairing sums.

    Replica ``r`` is assigned to batch ``r % n_batches``. All state is additive,
    so :meth:`merge` is elementwise addition.
    """

    def __init__(self, names, n_batches=32, kernel_names=(), shape=None, keep_samples=True):
        self.names = tuple(names)
        if len(set(self.names)) != len(self.names):
            raise ValueError("observable names must be unique")
        self.index = {n: i for i, n in enumerate(self.names)}
        self.n_batches = int(n_batches)
        self.kernel_names = tuple(kernel_names)
        self.shape = tuple(shape) if shape is not None else None
        m = len(self.names)
        self.counts = np.zeros(self.n_batches, dtype=np.int64)
        self.powers = np.zeros((self.n_batches, m, MAX_POWER))
        self.cross = np.zeros((self.n_batches, m, m))
        self.kernels = {k: np.zeros((self.n_batches,) + self.shape) for k in self.kernel_names}
        self.keep_samples = keep_samples
        self.samples = {}

    def _like(self):
        return EnsembleAccumulator(self.names, self.n_batches, self.kernel_names,
                                   self.shape, self.keep_samples)

    @property
    def count(self):
        return int(self.counts.sum())

    def add(self, replicas, values, noise=None):
        """Add replicas with ``values`` of shape ``(len(names), B)``."""
        replicas = np.asarray(replicas, dtype=np.int64)
        values = np.asarray(values, dtype=float)
        if values.shape != (len(self.names), replicas.size):
            raise ValueError(f"values must have shape {(len(self.names), replicas.size)}")
        if self.kernel_names and noise is None:
            raise ValueError("noise is required when noise pairings are registered")
        for j, r in enumerate(replicas):
            b = int(r % self.n_batches)
            x = values[:, j]
            self.counts[b] += 1
            p = x.copy()
            for k in range(MAX_POWER):
                self.powers[b, :, k] += p
                p = p * x
            self.cross[b] += np.outer(x, x)
            for name in self.kernel_names:
                self.kernels[name][b] += x[self.index[name]] * noise[j]
            if self.keep_samples:
                self.samples[int(r)] = x.copy()

    def merge(self, other):
        if (other.names, other.n_batches, other.kernel_names) != \
                (self.names, self.n_batches, self.kernel_names):
            raise ValueError("cannot merge accumulators with different layouts")
        out = self._like()
        out.counts = self.counts + other.counts
        out.powers = self.powers + other.powers
        out.cross = self.cross + other.cross
        out.kernels = {k: self.kernels[k] + other.kernels[k] for k in self.kernel_names}
        overlap = self.samples.keys() & other.samples.keys()
        if overlap:
            raise ValueError(f"replicas accumulated twice: {sorted(overlap)[:5]}")
        out.keep_samples = self.keep_samples and other.keep_samples
        if out.keep_samples:
            out.samples = {**self.samples, **other.samples}
        return out

    __add__ = merge

    def sample_matrix(self):
        """``(replica ids, values[len(names), N])`` in replica order."""
        ids = np.array(sorted(self.samples), dtype=np.int64)
        vals = np.array([self.samples[i] for i in ids]).T if ids.size else \
            np.zeros((len(self.names), 0))
        return ids, vals

    def __contains__(self, name):
        return name in self.index

    # -- batch-means estimation ------------------------------------------

    def _key_columns(self, keys):
        cols = []
        for key in keys:
            if key[0] == "p":
                _, name, k = key
                cols.append(self.powers[:, self.index[name], k - 1])
            elif key[0] == "x":
                _, a, b = key
                cols.append(self.cross[:, self.index[a], self.index[b]])
            else:
                raise ValueError(f"unknown key {key!r}")
        return np.stack(cols, axis=1)

    def estimate(self, fn, keys):
        """Delta-method estimate of ``fn(means of keys)`` with batch-means SE.

        ``keys`` are ``("p", name, k)`` for the mean of ``x**k`` or
        ``("x", a, b)`` for the mean of ``a * b``.
        """
        sums = self._key_columns(keys)
        used = self.counts > 0
        n_b = self.counts[used].astype(float)
        N = n_b.sum()
        if N == 0:
            raise ValueError("empty accumulator")
        means_b = sums[used] / n_b[:, None]
        m = sums[used].sum(axis=0) / N
        value = float(fn(m))
        nb = int(used.sum())
        if nb < MIN_BATCHES:
            return Estimate(value, math.nan)
        dev = means_b - m
        # covariance of the overall mean: per-sample covariance over N
        cov = (dev * n_b[:, None]).T @ dev / (nb - 1) / N
        sd = np.sqrt(np.maximum(np.diag(cov), 0.0))
        grad = np.zeros(len(keys))
        for i in range(len(keys)):
            step = 1e-3 * sd[i] if sd[i] > 0 else 1e-8 * max(1.0, abs(m[i]))
            e = np.zeros(len(keys))
            e[i] = step
            grad[i] = (fn(m + e) - fn(m - e)) / (2 * step)
        var = float(grad @ cov @ grad)
        return Estimate(value, math.sqrt(max(var, 0.0)))

    def raw_moment(self, name, k):
        return self.estimate(lambda m: m[0], [("p", name, k)])

    def mean(self, name):
        return self.raw_moment(name, 1)

    def variance(self, name):
        return self.estimate(lambda m: m[1] - m[0] ** 2, [("p", name, 1), ("p", name, 2)])

    def standardized_moment(self, name, k):
        keys = [("p", name, j) for j in range(1, k + 1)]

        def fn(m):
            raw = np.concatenate([[1.0], m])
            mu = -raw[1]
            central = sum(math.comb(k, j) * raw[j] * mu ** (k - j) for j in range(k + 1))
            var = raw[2] - raw[1] ** 2
            return central / var ** (k / 2)

        return self.estimate(fn, keys)

    def covariance(self, a, b):
        return self.estimate(lambda m: m[2] - m[0] * m[1],
                             [("p", a, 1), ("p", b, 1), ("x", a, b)])

    def correlation(self, a, b):
        def fn(m):
            cov = m[2] - m[0] * m[1]
            va = m[3] - m[0] ** 2
            vb = m[4] - m[1] ** 2
            return cov / math.sqrt(va * vb)

        return self.estimate(fn, [("p", a, 1), ("p", b, 1), ("x", a, b),
                                  ("p", a, 2), ("p", b, 2)])

    def to_npz(self, path):
        ids, vals = self.sample_matrix()
        arrays = {"names": np.array(self.names), "counts": self.counts,
                  "powers": self.powers, "cross": self.cross,
                  "sample_ids": ids, "sample_values": vals,
                  "kernel_names": np.array(self.kernel_names, dtype=str)}
        for k, v in self.kernels.items():
            arrays[f"kernel::{k}"] = v
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def from_npz(cls, path):
        z = np.load(path, allow_pickle=False)
        kernel_names = tuple(str(k) for k in z["kernel_names"])
        shape = z[f"kernel::{kernel_names[0]}"].shape[1:] if kernel_names else None
        acc = cls([str(n) for n in z["names"]], len(z["counts"]), kernel_names, shape)
        acc.counts = z["counts"].copy()
        acc.powers = z["powers"].copy()
        acc.cross = z["cross"].copy()
        acc.kernels = {k: z[f"kernel::{k}"].copy() for k in kernel_names}
        ids, vals = z["sample_ids"], z["sample_values"]
        acc.samples = {int(i): vals[:, j].copy() for j, i in enumerate(ids)}
        return acc


# -- observables ---------------------------------------------------------------

@dataclass(frozen=True)
class Observable:
    """Scalar per-replica statistics evaluated on the snapshot at ``time``.

    ``fn(u, ctx)`` receives the batch of states ``(B, *shape)`` and returns an
    array ``(len(names), B)``.
    """

    names: tuple
    time: float
    fn: object
    kernel: bool = False


@dataclass
class BatchContext:
    params: object
    noise: np.ndarray
    u0: np.ndarray


def _sum_axes(grid):
    return tuple(range(-grid.d, 0))


def _fmt(x):
    return f"{x:.6g}"


def tested(phi, t, kernel=False):
    """``<u(t), phi>``."""
    weights = np.array(phi.field.values)

    def fn(u, ctx):
        g = ctx.params.grid
        return (g.cell * np.sum(u * weights, axis=_sum_axes(g)))[None]

    return Observable((f"u@{_fmt(t)}:{phi.name}",), t, fn, kernel)


def free(phi, t):
    """``<p_t * u(0), phi> = <u(0), p_t * phi>``; evaluated on the initial state."""
    weights = np.array(phi.heat(t).values)

    def fn(u, ctx):
        g = ctx.params.grid
        return (g.cell * np.sum(u * weights, axis=_sum_axes(g)))[None]

    return Observable((f"X@{_fmt(t)}:{phi.name}",), 0.0, fn)


def pointwise_square(t):
    """Site average of ``u(t)**2``; by stationarity its mean is ``E[u(t, 0)**2]``."""
    def fn(u, ctx):
        return np.mean(u * u, axis=_sum_axes(ctx.params.grid))[None]

    return Observable((f"u2@{_fmt(t)}",), t, fn)


def spatial_average(s, eps):
    """``L**(-d/2) h**d sum_x u(s eps**2, x)``; its variance is the integrated covariance."""
    def fn(u, ctx):
        g = ctx.params.grid
        return (g.cell * g.volume ** -0.5 * np.sum(u, axis=_sum_axes(g)))[None]

    return Observable((f"A@s={_fmt(s)}",), s * eps**2, fn)


def product_correlations(t, offsets, p=2, q=2):
    """Site averages of ``u**p(x) u**q(x + r)`` for each lattice offset ``r``."""
    offsets = [tuple(int(o) for o in r) for r in offsets]
    names = tuple(f"pq{p}{q}@{_fmt(t)}:{','.join(map(str, r))}" for r in offsets)

    def fn(u, ctx):
        g = ctx.params.grid
        axes = _sum_axes(g)
        a = u ** p
        b = u ** q
        out = []
        for r in offsets:
            shifted = np.roll(b, tuple(-o for o in r), axis=axes)
            out.append(np.mean(a * shifted, axis=axes))
        return np.array(out)

    return Observable(names, t, fn)


def pointwise_cross(t):
    """Site average of ``u(t) * (p_t * u(0))``; needs the initial state in the context."""
    def fn(u, ctx):
        g = ctx.params.grid
        X = irfft(rfft(ctx.u0, g) * _heat_multipliers(g, float(t)), g)
        return np.mean(u * X, axis=_sum_axes(g))[None]

    return Observable((f"uX@{_fmt(t)}",), t, fn)


def wick_cube_terms(params, t, steps_per_width2=8):
    """Site averages of ``F**2, F G, G**2`` with ``F = lam N(X, X, X)(t)`` and
    ``G = Pi_3 N(X, X, X)(t)``, the Wick-ordered cubic part, computed from the
    initial state on the same time grid as :func:`pi3_time_grid`."""
    from .chaos_stats import pi3_time_grid

    grid = params.grid
    s, w = pi3_time_grid(t, params.moll.width, steps_per_width2)
    C = _covariance_values(params.moll, grid)
    variances = [float(irfft(rfft(C, grid) * _heat_multipliers(grid, float(2 * si)), grid).flat[0])
                 for si in s]
    pref = params.eps ** (grid.d - 2)
    lam = params.lam
    tag = _fmt(t)
    names = (f"FF@{tag}", f"FG@{tag}", f"GG@{tag}")

    def fn(u, ctx):
        u0_hat = rfft(ctx.u0, grid)
        F_hat = 0
        G_hat = 0
        for si, wi, ci in zip(s, w, variances):
            X = irfft(u0_hat * _heat_multipliers(grid, float(si)), grid)
            X3 = X ** 3
            back = wi * _heat_multipliers(grid, float(t - si))
            F_hat = F_hat + rfft(X3, grid) * back
            G_hat = G_hat + rfft(X3 - 3 * ci * X, grid) * back
        F = lam * pref * irfft(F_hat, grid)
        G = pref * irfft(G_hat, grid)
        axes = _sum_axes(grid)
        return np.array([np.mean(F * F, axis=axes), np.mean(F * G, axis=axes),
                         np.mean(G * G, axis=axes)])

    return Observable(names, 0.0, fn)


def site_wick_cube(site=0):
    """``Z`` and ``Z**3 - 3 Z`` for the unit normal ``Z = h**(d/2) xi(site)``."""
    def fn(u, ctx):
        g = ctx.params.grid
        z = ctx.noise.reshape(ctx.noise.shape[0], -1)[:, site] * g.cell ** 0.5
        return np.array([z, z ** 3 - 3 * z])

    return Observable(("Z", "He3(Z)"), 0.0, fn)


# -- runner --------------------------------------------------------------------

@dataclass
class _Job:
    params: object
    observables: tuple
    seed: int
    n_batches: int
    keep_samples: bool
    names: tuple = field(init=False)
    kernel_names: tuple = field(init=False)
    times: tuple = field(init=False)

    def __post_init__(self):
        self.names = tuple(n for o in self.observables for n in o.names)
        self.kernel_names = tuple(n for o in self.observables if o.kernel for n in o.names)
        self.times = tuple(sorted({0.0, *(o.time for o in self.observables)}))


_ACTIVE_JOB = None


def _run_chunk(job, start, stop):
    grid = job.params.grid
    replicas = np.arange(start, stop)
    noise = np.stack([white_noise_array(grid, RngStream(job.seed, int(r))) for r in replicas])
    u0 = initial_condition_array(grid, job.params.moll, noise)
    ctx = BatchContext(job.params, noise, u0)
    rows = {}

    def on_snapshot(i, t, u):
        for o in job.observables:
            if abs(o.time - t) <= 1e-12 * max(1.0, t):
                vals = np.asarray(o.fn(u, ctx), dtype=float)
                for name, v in zip(o.names, vals):
                    rows[name] = v

    try:
        integrate(u0, grid, job.params.lam_eps, job.params.scheme, 0.0, job.times, on_snapshot)
    except NonFiniteState as exc:
        raise ReplicaFailure(f"replicas {start}..{stop - 1} (seed {job.seed}) failed: {exc}",
                             replica=int(start), seed=job.seed) from exc
    values = np.array([rows[n] for n in job.names])
    bad = ~np.all(np.isfinite(values), axis=0)
    if np.any(bad):
        r = int(replicas[np.argmax(bad)])
        raise ReplicaFailure(f"replica {r} (seed {job.seed}) produced non-finite statistics",
                             replica=r, seed=job.seed)
    acc = EnsembleAccumulator(job.names, job.n_batches, job.kernel_names,
                              grid.shape if job.kernel_names else None, job.keep_samples)
    acc.add(replicas, values, noise if job.kernel_names else None)
    return acc


def _run_chunk_forked(start, stop):
    return _run_chunk(_ACTIVE_JOB, start, stop)


def resolve_workers(workers):
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return max(1, int(workers or 1))


def ensemble_run(params, n_replicas, observables, seed=0, n_batches=32, workers=1,
                 chunk=16, keep_samples=True, first_replica=0):
    """Run ``n_replicas`` independent replicas and accumulate ``observables``.

    Replica ``r`` draws its noise from ``RngStream(seed, r)``. The result is
    independent of ``workers``; the worker count may be overridden by the
    environment variable named in ``WORKERS_ENV``.
    """
    global _ACTIVE_JOB
    if n_replicas < 32:
        raise ValueError("an ensemble needs at least 32 replicas")
    job = _Job(params, tuple(observables), int(seed), int(n_batches), keep_samples)
    stop = first_replica + n_replicas
    bounds = [(a, min(a + chunk, stop)) for a in range(first_replica, stop, chunk)]
    workers = min(resolve_workers(workers), len(bounds))
    if workers == 1:
        parts = [_run_chunk(job, a, b) for a, b in bounds]
    else:
        # workers inherit the job (observables hold closures) through fork
        _ACTIVE_JOB = job
        try:
            with ProcessPoolExecutor(workers, mp_context=mp.get_context("fork")) as pool:
                parts = list(pool.map(_run_chunk_forked, *zip(*bounds)))
        finally:
            _ACTIVE_JOB = None
    acc = parts[0]
    for p in parts[1:]:
        acc = acc.merge(p)
    return acc
