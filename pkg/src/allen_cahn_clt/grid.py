"""Periodic lattice geometry, white noise, mollifiers and FFT convolution.

Everything needed to realise the random initial condition ``u(0) = rho * xi``
on a periodic torus of side ``L`` with ``n`` points per side.

Conventions
-----------
* Fields are stored as ``d``-dimensional float64 arrays in row-major order;
  the lattice site with multi-index ``j`` sits at ``x = j * h`` and is
  identified with its signed periodic offset in ``[-L/2, L/2)``.
* Discrete white noise has variance ``h**-d`` per site so that the lattice
  pairing ``h**d * sum(xi * phi)`` has variance ``||phi||**2``.
* Convolutions are circular and scaled by ``h**d`` so they approximate the
  continuum integral.
"""
from __future__ import annotations

import functools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from .errors import GridMismatch, NonFiniteInput, WidthUnresolvable

MAX_SITES = 1 << 24
LAPLACIANS = ("lattice", "spectral")

_HEADER = struct.Struct("<iidd")


def _is_power_of_two(n):
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class GridSpec:
    """Periodic lattice ``(h Z / L Z)**d``.

    ``laplacian`` selects the generator of the heat semigroup used by every
    propagator on this grid: ``"lattice"`` is the nearest-neighbour discrete
    Laplacian (positivity preserving), ``"spectral"`` the continuum symbol
    ``|k|**2`` restricted to the resolved modes.
    """

    d: int
    n: int
    L: float
    laplacian: str = "lattice"
    max_sites: int = field(default=MAX_SITES, compare=False, repr=False)

    def __post_init__(self):
        if not isinstance(self.d, (int, np.integer)) or not 1 <= self.d <= 3:
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.d!r}")
        if not isinstance(self.n, (int, np.integer)) or not _is_power_of_two(int(self.n)):
            raise ValueError(f"points per side must be a power of two, got {self.n!r}")
        if not (np.isfinite(self.L) and self.L > 0):
            raise ValueError(f"side length must be positive, got {self.L!r}")
        if self.laplacian not in LAPLACIANS:
            raise ValueError(f"laplacian must be one of {LAPLACIANS}")
        if self.n ** self.d > self.max_sites:
            raise ValueError(
                f"{self.n}**{self.d} sites exceed the configured cap {self.max_sites}")
        object.__setattr__(self, "d", int(self.d))
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "L", float(self.L))

    @property
    def h(self):
        return self.L / self.n

    @property
    def shape(self):
        return (self.n,) * self.d

    @property
    def size(self):
        return self.n ** self.d

    @property
    def cell(self):
        """Volume element ``h**d``."""
        return self.h ** self.d

    @property
    def volume(self):
        return self.L ** self.d

    @property
    def axes(self):
        return tuple(range(-self.d, 0))

    def coords(self):
        """Signed periodic coordinates of one axis, in ``[-L/2, L/2)``."""
        return _coords(self)

    def radius(self):
        """Distance of every site to the origin, minimised over periodic images."""
        return _radius(self)

    def symbol(self):
        """Eigenvalues of ``-Laplacian`` on the real-FFT half grid."""
        return _symbol(self)

    def site_index(self, offset):
        """Array index tuple of an integer lattice offset (wrapped)."""
        offset = np.atleast_1d(np.asarray(offset, dtype=int))
        if offset.size == 1 and self.d > 1:
            offset = np.concatenate([offset, np.zeros(self.d - 1, dtype=int)])
        if offset.size != self.d:
            raise ValueError(f"offset must have {self.d} components")
        return tuple(int(o) % self.n for o in offset)


@functools.lru_cache(maxsize=64)
def _coords(grid):
    j = np.arange(grid.n)
    c = np.where(j < grid.n // 2, j, j - grid.n) * grid.h
    c.setflags(write=False)
    return c


@functools.lru_cache(maxsize=64)
def _radius(grid):
    c = _coords(grid)
    mesh = np.meshgrid(*([c] * grid.d), indexing="ij", sparse=True)
    r = np.sqrt(sum(m * m for m in mesh))
    r = np.broadcast_to(r, grid.shape).copy()
    r.setflags(write=False)
    return r


@functools.lru_cache(maxsize=64)
def _symbol(grid):
    n, h = grid.n, grid.h
    m_full = np.fft.fftfreq(n, d=1.0 / n)
    m_half = np.fft.rfftfreq(n, d=1.0 / n)
    if grid.laplacian == "lattice":
        def one(m):
            return (4.0 / h**2) * np.sin(np.pi * m / n) ** 2
    else:
        def one(m):
            return (2.0 * np.pi * m / grid.L) ** 2
    parts = [one(m_full)] * (grid.d - 1) + [one(m_half)]
    mesh = np.meshgrid(*parts, indexing="ij", sparse=True)
    sym = sum(mesh)
    sym = np.broadcast_to(sym, (n,) * (grid.d - 1) + (n // 2 + 1,)).copy()
    sym.setflags(write=False)
    return sym


def rfft(a, grid):
    return sfft.rfftn(a, axes=grid.axes)


def irfft(a_hat, grid):
    return sfft.irfftn(a_hat, s=grid.shape, axes=grid.axes)


def _check_same_grid(f, g):
    if f.grid != g.grid:
        raise GridMismatch(f"fields live on different grids: {f.grid} vs {g.grid}")


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Real values on a :class:`GridSpec` with a time stamp.

    The value array is copied on construction and made read-only.
    """

    grid: GridSpec
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.size != self.grid.size:
            raise ValueError(f"expected {self.grid.size} values, got {v.size}")
        v = v.reshape(self.grid.shape)
        if not np.all(np.isfinite(v)):
            raise NonFiniteInput("field contains NaN or Inf")
        if not (np.isfinite(self.time) and self.time >= 0):
            raise ValueError(f"time stamp must be finite and nonnegative, got {self.time}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "time", float(self.time))

    @classmethod
    def constant(cls, grid, c, time=0.0):
        return cls(grid, np.full(grid.shape, float(c)), time)

    @classmethod
    def from_function(cls, grid, fn, time=0.0):
        """Evaluate ``fn(*coords)`` on the periodic coordinate mesh."""
        c = grid.coords()
        mesh = np.meshgrid(*([c] * grid.d), indexing="ij")
        return cls(grid, np.broadcast_to(fn(*mesh), grid.shape), time)

    @property
    def flat(self):
        return self.values.reshape(-1)

    def with_time(self, time):
        return ScalarField(self.grid, self.values, time)

    def at(self, offset):
        return float(self.values[self.grid.site_index(offset)])

    def sup(self):
        return float(np.max(np.abs(self.values)))

    def _binary(self, other, op):
        if isinstance(other, ScalarField):
            _check_same_grid(self, other)
            other = other.values
        return ScalarField(self.grid, op(self.values, other), self.time)

    def __add__(self, other):
        return self._binary(other, np.add)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __rsub__(self, other):
        return self._binary(other, lambda a, b: b - a)

    def __mul__(self, other):
        return self._binary(other, np.multiply)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._binary(other, np.divide)

    def __neg__(self):
        return ScalarField(self.grid, -self.values, self.time)

    # flat binary record: <d:int32><n:int32><L:float64><time:float64> + values
    def to_bytes(self):
        g = self.grid
        return _HEADER.pack(g.d, g.n, g.L, self.time) + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data, laplacian="lattice"):
        d, n, L, time = _HEADER.unpack_from(data)
        grid = GridSpec(d, n, L, laplacian=laplacian)
        values = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
        return cls(grid, values, time)


def write_field(path, f):
    Path(path).write_bytes(f.to_bytes())


def read_field(path, laplacian="lattice"):
    return ScalarField.from_bytes(Path(path).read_bytes(), laplacian=laplacian)


@dataclass(frozen=True)
class RngStream:
    """Counter-based Gaussian stream keyed by ``(seed, replica, counter)``.

    Each ``counter`` value addresses a disjoint block of a Philox stream, so
    draws are reproducible and independent of the order in which replicas
    are processed. ``antithetic`` negates every draw.
    """

    seed: int
    replica: int = 0
    counter: int = 0
    antithetic: bool = False

    def generator(self):
        key = np.array([self.seed % 2**64, self.replica % 2**64], dtype=np.uint64)
        ctr = np.array([0, self.counter % 2**64, 0, 0], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=ctr))

    def standard_normal(self, shape):
        z = self.generator().standard_normal(shape)
        return -z if self.antithetic else z

    def advance(self, k=1):
        return RngStream(self.seed, self.replica, self.counter + k, self.antithetic)

    def negated(self):
        return RngStream(self.seed, self.replica, self.counter, not self.antithetic)


def white_noise_array(grid, rng):
    return rng.standard_normal(grid.shape) * grid.h ** (-grid.d / 2)


def sample_white_noise(grid, rng):
    """I.i.d. centred Gaussians with variance ``h**-d`` per site, time 0."""
    return ScalarField(grid, white_noise_array(grid, rng), 0.0)


@dataclass(frozen=True)
class MollifierSpec:
    """Standard bump ``exp(-1 / (1 - |x / width|**2))`` of support radius ``width``."""

    width: float
    kind: str = "bump"

    def __post_init__(self):
        if self.kind != "bump":
            raise ValueError(f"unsupported mollifier kind {self.kind!r}")
        if not (np.isfinite(self.width) and self.width > 0):
            raise ValueError(f"mollifier width must be positive, got {self.width!r}")

    def scaled(self, factor):
        return MollifierSpec(self.width * factor, self.kind)


def bump(r, width):
    """Unnormalised bump profile; exactly zero for ``r >= width``."""
    y2 = (np.asarray(r, dtype=float) / width) ** 2
    out = np.zeros_like(y2)
    inside = y2 < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - y2[inside]))
    return out


@functools.lru_cache(maxsize=64)
def _mollifier_values(spec, grid):
    if spec.width < 2 * grid.h:
        raise WidthUnresolvable(
            f"mollifier width {spec.width} below two lattice spacings (h={grid.h})")
    if spec.width >= grid.L / 2:
        raise WidthUnresolvable(
            f"mollifier width {spec.width} does not fit in half the torus (L={grid.L})")
    v = bump(grid.radius(), spec.width)
    v /= grid.cell * v.sum()
    v.setflags(write=False)
    return v


def make_mollifier(spec, grid):
    """Discretised bump centred at the origin, normalised to ``h**d * sum = 1``."""
    return ScalarField(grid, _mollifier_values(spec, grid))


def convolve(f, g):
    """Periodic convolution ``h**d * sum_y f(x - y) g(y)`` computed by FFT."""
    _check_same_grid(f, g)
    grid = f.grid
    out = irfft(rfft(f.values, grid) * rfft(g.values, grid), grid) * grid.cell
    return ScalarField(grid, out, f.time)


@functools.lru_cache(maxsize=64)
def _mollifier_hat(spec, grid):
    m = rfft(_mollifier_values(spec, grid), grid) * grid.cell
    m.setflags(write=False)
    return m


def initial_condition_array(grid, moll, noise):
    """Batched ``rho * xi`` for noise arrays with arbitrary leading axes."""
    return irfft(rfft(noise, grid) * _mollifier_hat(moll, grid), grid)


def initial_condition(grid, moll, rng):
    """Stationary Gaussian field ``rho * xi`` with covariance ``rho * rho~``."""
    noise = sample_white_noise(grid, rng)
    return convolve(make_mollifier(moll, grid), noise)


def reflect(f):
    """``f~(x) = f(-x)`` on the lattice."""
    v = f.values
    for ax in range(f.grid.d):
        v = np.roll(np.flip(v, axis=ax), 1, axis=ax)
    return ScalarField(f.grid, v, f.time)


@functools.lru_cache(maxsize=64)
def _covariance_values(spec, grid):
    rho = make_mollifier(spec, grid)
    c = convolve(rho, reflect(rho)).values.copy()
    # supports of rho(. - x) and rho are disjoint once |x| >= 2 * width
    c[grid.radius() >= 2 * spec.width] = 0.0
    c.setflags(write=False)
    return c


def covariance_field(moll, grid):
    """The whole covariance function ``C_init = rho * rho~`` as a field."""
    return ScalarField(grid, _covariance_values(moll, grid))


def covariance_init(moll, grid, x=0):
    """``C_init`` at the integer lattice offset ``x``."""
    return float(_covariance_values(moll, grid)[grid.site_index(x)])


def inner_product(f, g):
    """Lattice Riemann sum ``h**d * sum(f * g)``."""
    _check_same_grid(f, g)
    return float(f.grid.cell * np.vdot(f.values, g.values))
