import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from allen_cahn_clt import ensemble as en
from allen_cahn_clt.chaos_stats import free_variance
from allen_cahn_clt.errors import ReplicaFailure
from allen_cahn_clt.grid import GridSpec
from allen_cahn_clt.propagators import StepScheme
from allen_cahn_clt.rescaling import SimParams, TestFunction


def small_params(lam=0.0, eps=0.5, t=0.01):
    g = GridSpec(1, 64, 2.0)
    return SimParams(g, lam, eps, 0.2, StepScheme(1e-3), (t,), (0,))


def filled(values, ids=None, n_batches=32):
    values = np.asarray(values, dtype=float)
    ids = np.arange(values.shape[1]) if ids is None else np.asarray(ids)
    acc = en.EnsembleAccumulator([f"o{i}" for i in range(values.shape[0])], n_batches)
    acc.add(ids, values)
    return acc


@given(st.integers(0, 2**31), st.integers(1, 199))
def test_merge_matches_single_pass(seed, cut):
    x = np.random.default_rng(seed).standard_normal((2, 200))
    whole = filled(x)
    parts = filled(x[:, :cut], np.arange(cut)) + filled(x[:, cut:], np.arange(cut, 200))
    assert np.allclose(parts.powers, whole.powers, rtol=1e-12, atol=1e-12)
    assert np.allclose(parts.cross, whole.cross, rtol=1e-12, atol=1e-12)
    assert np.array_equal(parts.counts, whole.counts)


@given(st.integers(0, 2**31))
def test_merge_commutes_and_associates(seed):
    x = np.random.default_rng(seed).standard_normal((1, 90))
    a, b, c = (filled(x[:, i:i + 30], np.arange(i, i + 30)) for i in (0, 30, 60))
    assert np.array_equal((a + b).powers, (b + a).powers)
    assert np.allclose(((a + b) + c).powers, (a + (b + c)).powers, rtol=1e-14)


def test_merge_rejects_double_counting_and_layout_mismatch():
    a = filled(np.ones((1, 4)))
    with pytest.raises(ValueError):
        a + filled(np.ones((1, 4)))
    with pytest.raises(ValueError):
        a + filled(np.ones((2, 4)), np.arange(4, 8))


def test_estimates_against_direct_formulas():
    x = np.random.default_rng(1).standard_normal((2, 3200))
    x[1] = 0.5 * x[0] + x[1]
    acc = filled(x)
    assert acc.mean("o0").value == pytest.approx(x[0].mean(), abs=1e-12)
    assert acc.variance("o0").value == pytest.approx(x[0].var(), rel=1e-10)
    assert acc.correlation("o0", "o1").value == pytest.approx(np.corrcoef(x)[0, 1], rel=1e-10)
    z = (x[0] - x[0].mean()) / x[0].std()
    assert acc.standardized_moment("o0", 4).value == pytest.approx(np.mean(z**4), rel=1e-8)
    se = acc.mean("o0").se
    assert 0.7 < se / (x[0].std() / math.sqrt(3200)) < 1.3


def test_standard_errors_need_sixteen_batches():
    acc = filled(np.random.default_rng(2).standard_normal((1, 64)), n_batches=8)
    est = acc.variance("o0")
    assert math.isfinite(est.value) and math.isnan(est.se)


def test_npz_round_trip(tmp_path):
    acc = filled(np.random.default_rng(3).standard_normal((2, 40)))
    acc.to_npz(tmp_path / "acc.npz")
    back = en.EnsembleAccumulator.from_npz(tmp_path / "acc.npz")
    assert back.names == acc.names
    assert np.array_equal(back.powers, acc.powers)
    assert np.array_equal(back.sample_matrix()[1], acc.sample_matrix()[1])


def test_runs_are_reproducible_and_worker_independent(monkeypatch):
    p = small_params(lam=2.0)
    phi = TestFunction.make(p.grid, "gaussian_bump", 0.2)
    obs = [en.tested(phi, 0.01), en.pointwise_square(0.01)]
    a = en.ensemble_run(p, 64, obs, seed=5, chunk=8)
    b = en.ensemble_run(p, 64, obs, seed=5, chunk=8)
    c = en.ensemble_run(p, 64, obs, seed=5, chunk=8, workers=2)
    assert np.array_equal(a.powers, b.powers)
    assert np.array_equal(a.powers, c.powers)
    d = en.ensemble_run(p, 64, obs, seed=6, chunk=8)
    assert not np.array_equal(a.powers, d.powers)
    monkeypatch.setenv(en.WORKERS_ENV, "3")
    assert en.resolve_workers(1) == 3


def test_ensemble_needs_32_replicas():
    with pytest.raises(ValueError):
        en.ensemble_run(small_params(), 16, [en.pointwise_square(0.01)])


def test_free_variance_is_reproduced():
    p = small_params()
    phi = TestFunction.make(p.grid, "gaussian_bump", 0.2)
    acc = en.ensemble_run(p, 1024, [en.tested(phi, 0.01)], seed=2, chunk=64)
    est = acc.variance(f"u@0.01:{phi.name}")
    assert abs(est.z(free_variance(phi, p.moll, 0.01))) < 3


def test_standard_error_shrinks_with_replicas():
    p = small_params()
    phi = TestFunction.make(p.grid, "gaussian_bump", 0.2)
    se = [en.ensemble_run(p, n, [en.tested(phi, 0.01)], seed=4, chunk=64).variance(
        f"u@0.01:{phi.name}").se for n in (512, 2048)]
    assert 1.4 < se[0] / se[1] < 2.8


def test_non_finite_statistic_names_the_replica():
    p = small_params()

    def bad(u, ctx):
        out = np.zeros((1, u.shape[0]))
        out[0, 1] = np.nan
        return out

    with pytest.raises(ReplicaFailure) as info:
        en.ensemble_run(p, 32, [en.Observable(("bad",), 0.01, bad)], seed=9)
    assert info.value.replica == 1 and info.value.seed == 9
