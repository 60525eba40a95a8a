"""Moment-method checks of the central limit theorem on synthetic fields.

A synthetic field is ``eta_eps = eps**(-d/2) T(eps**(d/2) (rho_eps * xi))`` for
an odd pointwise map ``T``. Its tested averages ``<eta_eps, phi>`` become
Gaussian with variance ``sigma**2 ||phi||**2`` as ``eps -> 0``, where
``sigma**2`` is the integrated covariance of ``T`` applied to the unit-scale
field. Also here: the pairing count, the Gauss-Hermite predictor for the
pure-reaction layer and the proximity clustering used by the moment method.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.integrate import quad
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .chaos_stats import Verdict, Z_THRESHOLD
from .ensemble import EnsembleAccumulator
from .errors import PairingOverflow
from .grid import MollifierSpec, RngStream, initial_condition_array, white_noise_array

MAX_PAIRING_K = 12


def pairing_count(k):
    """Number of perfect pairings of ``2k`` elements, ``(2k)! / (2**k k!)``."""
    k = int(k)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > MAX_PAIRING_K:
        raise PairingOverflow(f"pairing count for k={k} is not tabulated beyond k={MAX_PAIRING_K}")
    return math.factorial(2 * k) // (2**k * math.factorial(k))


def enumerate_pairings(items):
    """Yield every perfect pairing of ``items`` as a tuple of pairs."""
    items = list(items)
    if not items:
        yield ()
        return
    first, rest = items[0], items[1:]
    for i, partner in enumerate(rest):
        for tail in enumerate_pairings(rest[:i] + rest[i + 1:]):
            yield ((first, partner),) + tail


@dataclass(frozen=True)
class PairingTable:
    k: int
    count: int

    @classmethod
    def build(cls, k_max):
        return [cls(k, pairing_count(k)) for k in range(1, k_max + 1)]


# -- pointwise odd maps --------------------------------------------------------

def _identity(u, lam):
    return u


def _phi_lambda(u, lam):
    return u / np.sqrt(1.0 + 2.0 * lam * u * u)


def _cubic_damped(u, lam):
    return u / (1.0 + lam * u * u)


TRANSFORMS = {"identity": _identity, "phi_lambda": _phi_lambda, "cubic_damped": _cubic_damped}


@dataclass(frozen=True)
class SyntheticFieldSpec:
    """Odd pointwise transform of a mollified white noise.

    ``base_width`` is the mollifier width at ``eps = 1``; ``scale`` multiplies
    the final field.
    """

    grid: object
    base_width: float
    transform: str = "identity"
    lam: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}; known: {sorted(TRANSFORMS)}")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")

    def moll(self, eps):
        return MollifierSpec(eps * self.base_width)

    def sample(self, eps, noise):
        """Fields for a batch of white-noise arrays."""
        d = self.grid.d
        base = initial_condition_array(self.grid, self.moll(eps), noise)
        a = eps ** (d / 2)
        return self.scale * TRANSFORMS[self.transform](a * base, self.lam) / a


def _synthetic_accumulator(spec, eps, phi, n_replicas, seed, k_max, n_batches, chunk=64):
    grid = spec.grid
    names = ("F", "A")
    acc = EnsembleAccumulator(names, n_batches, keep_samples=False)
    weights = np.asarray(phi.field.values) if phi is not None else None
    axes = tuple(range(-grid.d, 0))
    for start in range(0, n_replicas, chunk):
        reps = np.arange(start, min(start + chunk, n_replicas))
        noise = np.stack([white_noise_array(grid, RngStream(seed, int(r))) for r in reps])
        eta = spec.sample(eps, noise)
        F = grid.cell * np.sum(eta * weights, axis=axes) if weights is not None else np.zeros(len(reps))
        A = grid.cell * grid.volume ** -0.5 * np.sum(eta, axis=axes)
        acc.add(reps, np.array([F, A]))
    return acc


def sigma_sq_field(spec, n_replicas, eps=1.0, seed=0, n_batches=32):
    """Integrated covariance ``int E[eta(0) eta(x)] dx`` via the spatial-average variance."""
    acc = _synthetic_accumulator(spec, eps, None, n_replicas, seed, 1, n_batches)
    return acc.variance("A")


def _double_factorial_odd(k):
    return pairing_count(k) if k >= 1 else 1


def clt_moment_test(spec, phi, eps_ladder, k_max=4, n_replicas=4096, seed=0,
                    n_batches=32, z_threshold=Z_THRESHOLD):
    """Moments of ``<eta_eps, phi>`` against ``(2k-1)!! (sigma**2 ||phi||**2)**k``.

    ``sigma**2`` is estimated from the same replicas through the spatial
    average, and its uncertainty enters the z-scores through the delta
    method. Odd moments ``1, 3, .., 2 k_max - 1`` are tested against 0.
    Returns ``{eps: [Verdict, ...]}``.
    """
    if not 1 <= k_max <= 4:
        raise ValueError("k_max must lie in 1..4")
    norm2 = phi.norm ** 2
    table = {}
    for eps in eps_ladder:
        acc = _synthetic_accumulator(spec, eps, phi, n_replicas, seed, k_max, n_batches)
        rows = []
        for k in range(1, k_max + 1):
            c = _double_factorial_odd(k)

            def fn(m, c=c, k=k):
                return m[0] - c * (m[1] * norm2) ** k

            diff = acc.estimate(fn, [("p", "F", 2 * k), ("p", "A", 2)])
            emp = acc.raw_moment("F", 2 * k)
            target = emp.value - diff.value
            z = diff.z(0.0)
            rows.append(Verdict(f"eps={eps}:E[F^{2 * k}]", bool(abs(z) <= z_threshold),
                                emp.value, diff.se, target, z))
            odd = acc.raw_moment("F", 2 * k - 1)
            z_odd = odd.z(0.0)
            rows.append(Verdict(f"eps={eps}:E[F^{2 * k - 1}]", bool(abs(z_odd) <= z_threshold),
                                odd.value, odd.se, 0.0, z_odd))
        table[eps] = rows
    return table


def ode_layer_predictor(lam, v0, nodes=64, tol=1e-10, max_nodes=256):
    """Covariance of ``(Z, Phi_lam(Z))`` for ``Z ~ N(0, v0)``.

    Gauss-Hermite quadrature with the node count doubled until two
    consecutive matrices agree to ``tol``. Rules beyond 256 nodes overflow, so
    when strong coupling sharpens the integrand past what they resolve, the
    entries fall back to adaptive quadrature split at the origin.
    """
    if lam < 0 or not v0 > 0:
        raise ValueError("need lam >= 0 and v0 > 0")

    def gauss_hermite(n):
        x, w = hermegauss(n)
        w = w / math.sqrt(2 * math.pi)
        z = math.sqrt(v0) * x
        p = _phi_lambda(z, lam)
        return np.array([[w @ (z * z), w @ (z * p)], [w @ (z * p), w @ (p * p)]])

    prev = gauss_hermite(nodes)
    while nodes < max_nodes:
        nodes *= 2
        cur = gauss_hermite(nodes)
        if np.max(np.abs(cur - prev)) <= tol:
            return cur
        prev = cur
    return _adaptive_predictor(lam, v0, tol)


def _adaptive_predictor(lam, v0, tol):
    sd = math.sqrt(v0)

    def expect(fn):
        def integrand(z):
            return fn(z) * math.exp(-z * z / (2 * v0)) / (sd * math.sqrt(2 * math.pi))

        # both integrands are even in z
        return 2 * quad(integrand, 0.0, math.inf, epsabs=tol / 10, epsrel=1e-12, limit=200)[0]

    zp = expect(lambda z: z * _phi_lambda(z, lam))
    pp = expect(lambda z: _phi_lambda(z, lam) ** 2)
    return np.array([[v0, zp], [zp, pp]])


def predictor_correlation(matrix):
    return float(matrix[0, 1] / math.sqrt(matrix[0, 0] * matrix[1, 1]))


def cluster_partition(points, cutoff, box=None):
    """Blocks of the transitive closure of ``|x_i - x_j| <= cutoff``.

    ``box`` gives periodic side lengths. Blocks are sorted index lists,
    ordered by their smallest index.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(pts)
    if n == 0:
        return []
    if box is not None:
        pts = np.mod(pts, box)
    tree = cKDTree(pts, boxsize=box)
    pairs = tree.query_pairs(cutoff, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    blocks = {}
    for i, lab in enumerate(labels):
        blocks.setdefault(lab, []).append(i)
    return sorted(blocks.values(), key=lambda b: b[0])


def brute_force_partition(points, cutoff):
    """Reference closure by repeated relaxation; quadratic in the point count."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    label = list(range(len(pts)))
    changed = True
    while changed:
        changed = False
        for i, j in itertools.combinations(range(len(pts)), 2):
            if np.linalg.norm(pts[i] - pts[j]) <= cutoff and label[i] != label[j]:
                lo = min(label[i], label[j])
                label[i] = label[j] = lo
                changed = True
    blocks = {}
    for i, lab in enumerate(label):
        blocks.setdefault(lab, []).append(i)
    return sorted(blocks.values(), key=lambda b: b[0])


def moment_factorization(spec, sites, cutoff, n_replicas, eps=1.0, seed=0, n_batches=32):
    """``E[prod eta(x_i)] - prod_blocks E[prod_{i in block} eta(x_i)]`` with SE.

    ``sites`` are integer lattice offsets; blocks come from
    :func:`cluster_partition` with physical ``cutoff``. Returns the blocks
    and the estimate of the factorisation defect.
    """
    grid = spec.grid
    sites = [grid.site_index(s) for s in sites]
    pts = np.array(sites, dtype=float) * grid.h
    blocks = cluster_partition(pts, cutoff, box=np.full(grid.d, grid.L))
    names = ["all"] + [f"block{i}" for i in range(len(blocks))]
    acc = EnsembleAccumulator(names, n_batches, keep_samples=False)
    chunk = 64
    for start in range(0, n_replicas, chunk):
        reps = np.arange(start, min(start + chunk, n_replicas))
        noise = np.stack([white_noise_array(grid, RngStream(seed, int(r))) for r in reps])
        eta = spec.sample(eps, noise)
        vals = np.array([eta[(slice(None),) + s] for s in sites])
        rows = [np.prod(vals, axis=0)] + [np.prod(vals[b], axis=0) for b in blocks]
        acc.add(reps, np.array(rows))
    keys = [("p", n, 1) for n in names]
    defect = acc.estimate(lambda m: m[0] - np.prod(m[1:]), keys)
    return blocks, defect
