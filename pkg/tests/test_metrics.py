import numpy as np
import pytest

from adamkml import data
from adamkml import metrics as m
from adamkml.errors import InvalidArgumentError, InvalidShapeError, NumericError
from adamkml.nets import build_gan


def test_frechet_self_distance_is_zero():
    x = np.random.default_rng(0).normal(size=(500, 3))
    assert m.frechet(x, x).total == pytest.approx(0.0, abs=1e-9)


def test_frechet_shifted_unit_gaussians():
    r = m.frechet_from_moments([0.0], [[1.0]], [1.0], [[1.0]])
    assert (r.total, r.mean_component, r.trace_component) == pytest.approx((1.0, 1.0, 0.0), abs=1e-12)


def test_frechet_scaled_gaussians():
    r = m.frechet_from_moments([0.0], [[4.0]], [0.0], [[1.0]])
    assert r.trace_component == pytest.approx(1.0, abs=1e-12)
    assert r.total == pytest.approx(1.0, abs=1e-12)


def test_frechet_decomposition_and_symmetry():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(400, 4)), rng.normal(1.0, 2.0, size=(300, 4))
    r = m.frechet(a, b)
    assert r.total == pytest.approx(r.mean_component + r.trace_component, abs=1e-9)
    assert min(r.mean_component, r.trace_component) >= 0
    assert m.frechet(b, a).total == pytest.approx(r.total, rel=1e-9)


def test_frechet_errors():
    with pytest.raises(InvalidShapeError):
        m.frechet(np.zeros((5, 2)), np.zeros((5, 3)))
    with pytest.raises(NumericError):
        m.frechet_from_moments([0.0, 0.0], [[1.0, 0.0], [0.0, -1.0]], [0.0, 0.0], np.eye(2))
    with pytest.warns(RuntimeWarning):
        m.frechet(np.random.default_rng(2).normal(size=(3, 4)), np.random.default_rng(3).normal(size=(9, 4)))


def test_kid_halves_within_bootstrap_noise():
    x = data.sample(data.builtin_domain("ring8_src"), 1000, seed=7)
    rng = np.random.default_rng(0)
    boot = [m.kid(*np.split(x[rng.integers(0, 1000, 1000)], 2)) for _ in range(30)]
    assert abs(m.kid(x[:500], x[500:])) < 3 * np.std(boot)


def test_kid_disjoint_point_masses():
    # kernel values are 1 within {0}, 26^3 within {(5,5)} and 1 across
    assert m.kid(np.zeros((10, 2)), np.full((10, 2), 5.0)) == pytest.approx(17575.0)


def test_kid_symmetric_and_rejects_tiny_batches():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(50, 2)), rng.normal(size=(60, 2)) + 1
    assert m.kid(a, b) == pytest.approx(m.kid(b, a), rel=1e-12)
    with pytest.raises(InvalidArgumentError):
        m.kid(a[:1], b)


def test_intra_diversity_degenerate_cases():
    anchors = np.array([[0.0, 0.0], [10.0, 0.0]])
    assert m.intra_diversity(np.ones((20, 2)), anchors) == 0.0
    assert m.intra_diversity(np.array([[0.1, 0.0], [9.9, 0.0]]), anchors) == 0.0


def test_intra_diversity_value_and_anchor_order():
    anchors = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    gen = np.array([[0.0, 0.0], [0.0, 2.0], [10.0, 0.0], [10.0, 4.0]])
    assert m.intra_diversity(gen, anchors) == pytest.approx(3.0)
    assert m.intra_diversity(gen, anchors[::-1]) == pytest.approx(3.0)


def test_mode_coverage_cases():
    ring = data.builtin_domain("ring8_src")
    assert m.mode_coverage(np.tile(ring.means[0], (100, 1)), ring) == (1, 8, 1.0)
    assert m.mode_coverage(data.sample(ring, 8000, seed=11), ring)[0] == 8
    assert m.mode_coverage(np.full((50, 2), 100.0), ring) == (0, 8, 0.0)
    with pytest.raises(InvalidArgumentError):
        m.mode_coverage(np.zeros((1, 2)), data.builtin_domain("gratings_src"))


def test_kernel_update_ratio_examples():
    w = np.array([[3.0, 4.0]])
    assert m.kernel_update_ratio(w, w)[0] == 0.0
    assert m.kernel_update_ratio(w, np.array([[3.0, 4.5]]))[0] == pytest.approx(10.0)
    with pytest.raises(NumericError):
        m.kernel_update_ratio(np.zeros((1, 2)), np.ones((1, 2)))


def test_update_ratio_homogeneous_scaling():
    gan = build_gan("conv16", 16, seed=2)
    scaled = gan.__class__(gan.arch, {k: 1.1 * v for k, v in gan.params.items()})
    q = m.update_ratio(gan, scaled)
    assert q["G"] == pytest.approx(10.0) and q["D"] == pytest.approx(10.0)
    assert m.update_ratio(gan, gan) == {"G": 0.0, "D": 0.0}


def test_feature_extractor_is_fixed():
    x = data.sample(data.builtin_domain("gratings_src"), 4, seed=0)
    a = m.FeatureExtractor("seeded_random_conv")(x)
    b = m.FeatureExtractor("seeded_random_conv")(x)
    assert a.shape == (4, 32) and a.tobytes() == b.tobytes()
    with pytest.raises(InvalidShapeError):
        m.FeatureExtractor("identity2d")(x)


@pytest.mark.filterwarnings("ignore:fewer than")
@pytest.mark.parametrize("domain,arch", [("ring8_src", "mlp2d"), ("gratings_src", "conv16")])
def test_fid_shrinks_with_sample_size(domain, arch):
    ext = m.extractor_for(arch)
    pool = ext(data.sample(data.builtin_domain(domain), 5200, seed=1))
    fids = [m.frechet(pool[:n], pool).total for n in (13, 130, 1300, 2600, 5200)]
    assert all(b <= a for a, b in zip(fids, fids[1:]))
    assert fids[-1] == pytest.approx(0.0, abs=1e-9)

