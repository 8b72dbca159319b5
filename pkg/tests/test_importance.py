import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adamkml import importance as imp
from adamkml.errors import InvalidArgumentError, SingularityError, UnknownParameterError


def test_mean_squared_gradient():
    acc = imp.FisherAccumulator({"w": ()})
    for g in (1.0, -1.0, 2.0):
        acc.accumulate({"w": np.array(g)})
    assert acc.fisher("w") == pytest.approx(2.0)


def test_zero_gradients_zero_fisher():
    acc = imp.FisherAccumulator({"w": (3,)})
    imp.accumulate(acc, {"w": np.zeros(3)})
    assert (acc.fisher("w") == 0).all()


def test_doubling_gradients_quadruples_fisher():
    rng = np.random.default_rng(0)
    gs = rng.normal(size=(5, 4))
    a, b = imp.FisherAccumulator({"w": (4,)}), imp.FisherAccumulator({"w": (4,)})
    for g in gs:
        a.accumulate({"w": g})
        b.accumulate({"w": 2 * g})
    np.testing.assert_allclose(b.fisher("w"), 4 * a.fisher("w"), rtol=1e-14)


def test_fisher_ignores_gradient_sign():
    rng = np.random.default_rng(1)
    gs = rng.normal(size=(6, 3))
    a, b = imp.FisherAccumulator({"w": (3,)}), imp.FisherAccumulator({"w": (3,)})
    for g in gs:
        a.accumulate({"w": g})
        b.accumulate({"w": -g})
    assert a.fisher("w").tobytes() == b.fisher("w").tobytes()
    assert (a.fisher("w") >= 0).all()


def test_accumulator_errors():
    acc = imp.FisherAccumulator({"w": (2,)})
    with pytest.raises(InvalidArgumentError):
        acc.fisher("w")
    with pytest.raises(UnknownParameterError):
        acc.accumulate({"v": np.zeros(2)})


def test_class_saliency():
    acc = imp.FisherAccumulator({"w": ()})
    for _ in range(3):
        acc.accumulate({"w": np.array(1.0)})
    assert acc.saliency("w") == 1.0


def test_saliency_scales_linearly_and_keeps_ranking():
    rng = np.random.default_rng(2)
    gs = rng.normal(size=(8, 10))
    a, b = imp.FisherAccumulator({"w": (10,)}), imp.FisherAccumulator({"w": (10,)})
    for g in gs:
        a.accumulate({"w": g})
        b.accumulate({"w": 3.5 * g})
    np.testing.assert_allclose(b.saliency("w"), 3.5 * a.saliency("w"), rtol=1e-14)
    assert (np.argsort(a.saliency("w")) == np.argsort(b.saliency("w"))).all()


def test_kernel_estimate():
    assert imp.kernel_fi_estimate(0.4, [0.1, 0.3]) == pytest.approx(0.6)
    assert imp.kernel_fi_estimate(0.0, [0.0, 0.0]) == 0.0
    with pytest.raises(InvalidArgumentError):
        imp.kernel_fi_estimate(1.0, [])


def test_shared_m2_preserves_m1_ranking():
    rng = np.random.default_rng(3)
    f1, f2 = rng.random(20), rng.random(7)
    scores = imp.layer_kernel_scores(f1, f2)
    assert (np.argsort(scores) == np.argsort(f1)).all()


def test_oracle_single_step():
    assert imp.kernel_fi_oracle(1.0, [1.0], 2.0, [4.0]) == pytest.approx(9.0)
    assert imp.kernel_fi_oracle(0.5, [0.2, -0.3], 0.0, [0.0, 0.0]) == 0.0


def test_oracle_averages_steps():
    one = imp.kernel_fi_oracle(1.0, [1.0], 2.0, [4.0])
    two = imp.kernel_fi_oracle([1.0, 1.0], [[1.0], [1.0]], [2.0, 0.0], [[4.0], [0.0]])
    assert two == pytest.approx(one / 2)


def test_oracle_singularity():
    with pytest.raises(SingularityError):
        imp.kernel_fi_oracle(0.0, [1.0], 1.0, [1.0])


def test_threshold_small_example():
    rep = imp.threshold_mask({"a": 0.1, "b": 0.2, "c": 0.3, "d": 0.4}, 50)
    assert rep.threshold_value == 0.2
    assert rep.important == {"c", "d"}
    assert rep.mask() == {"a": 0, "b": 0, "c": 1, "d": 1}


def test_threshold_zero_uses_minimum():
    fi = {"a": 0.5, "b": 0.1, "c": 0.9}
    rep = imp.threshold_mask(fi, 0)
    assert rep.threshold_value == 0.1
    assert rep.important == {"a", "c"}


def test_ties_are_unimportant():
    rep = imp.threshold_mask({"a": 1.0, "b": 1.0, "c": 1.0, "d": 2.0}, 50)
    assert rep.important == {"d"}


def test_thousand_values():
    rng = np.random.default_rng(4)
    vals = rng.permutation(1000) + rng.random()
    rep = imp.threshold_mask({f"k{i}": v for i, v in enumerate(vals)}, 75)
    assert len(rep.important) == 250


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 300), t=st.integers(1, 100), seed=st.integers(0, 2**32 - 1))
def test_fraction_matches_quantile(n, t, seed):
    vals = np.random.default_rng(seed).permutation(n).astype(float)
    rep = imp.threshold_mask({f"k{i}": v for i, v in enumerate(vals)}, t)
    assert len(rep.important) == imp.expected_important(n, t)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), t=st.integers(0, 100))
def test_mask_invariant_under_monotone_maps(seed, t):
    rng = np.random.default_rng(seed)
    vals = rng.random(200)
    a, b = rng.uniform(0.1, 5.0), rng.uniform(-3, 3)
    fi = {f"k{i}": v for i, v in enumerate(vals)}
    mapped = {k: np.exp(a * v) + b for k, v in fi.items()}
    assert imp.threshold_mask(fi, t).important == imp.threshold_mask(mapped, t).important


def test_threshold_rejects_bad_input():
    with pytest.raises(InvalidArgumentError):
        imp.threshold_mask({}, 50)
    with pytest.raises(InvalidArgumentError):
        imp.threshold_mask({"a": 1.0}, 101)
    with pytest.raises(InvalidArgumentError):
        imp.threshold_mask({"a": 1.0}, 50, "entropy")
