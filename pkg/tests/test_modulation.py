import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adamkml import diffcore as dc
from adamkml import modulation as mod
from adamkml.diffcore import Tensor
from adamkml.errors import InvalidArgumentError
from adamkml.nets import build_gan, kernel_ids


def test_zero_proxy_gives_base_exactly():
    W = np.random.default_rng(0).normal(size=(4, 3, 3, 3))
    mk = mod.init_modulation(W, "kml")
    mk.m1.data[:] = 0.0
    assert mod.effective_kernel(mk).data.tobytes() == W.tobytes()
    mk = mod.init_modulation(W, "kml")
    mk.m2.data[:] = 0.0
    assert mod.effective_kernel(mk).data.tobytes() == W.tobytes()


def test_single_entry_substitution():
    mk = mod.init_modulation(np.full((1, 1, 1, 1), 2.0), "kml")
    mk.m1.data[:] = 0.5
    mk.m2.data[:] = 3.0
    assert mod.effective_kernel(mk).data.item() == 5.0


def test_adafm_identity_init():
    W = np.random.default_rng(1).normal(size=(8, 4, 3, 3))
    assert mod.effective_kernel(mod.init_modulation(W, "adafm")).data.tobytes() == W.tobytes()


def test_init_is_near_identity():
    W = np.random.default_rng(2).normal(size=(16, 8, 3, 3))
    mk = mod.init_modulation(W, "kml", rng=np.random.default_rng(3))
    rel = np.abs(mod.effective_kernel(mk).data - W) / np.abs(W)
    assert rel.max() < 1e-2
    assert rel.mean() < 2e-4


def test_modulation_matrix_is_rank_one():
    W = np.random.default_rng(4).normal(size=(6, 5, 3, 3))
    mk = mod.init_modulation(W, "kml", rng=np.random.default_rng(5))
    mk.m1.data[:] = np.random.default_rng(6).normal(size=6)
    mk.m2.data[:] = np.random.default_rng(7).normal(size=45)
    M = (mod.effective_kernel(mk).data / W - 1.0).reshape(6, 45)
    assert np.linalg.matrix_rank(M, tol=1e-8) == 1
    # every filter's modulation is its own scalar times the shared m2
    np.testing.assert_allclose(M, np.outer(mk.m1.data, mk.m2.data), rtol=1e-9, atol=1e-12)


def test_d_out_bounds():
    W = np.zeros((4, 2, 3, 3))
    assert mod.init_modulation(W, "kml", d_out=2).m1.shape == (2,)
    with pytest.raises(InvalidArgumentError):
        mod.init_modulation(W, "kml", d_out=5)
    with pytest.raises(InvalidArgumentError):
        mod.init_modulation(W, "zoom")


def test_partial_rows_keep_other_filters():
    W = np.random.default_rng(8).normal(size=(5, 2, 3, 3))
    mk = mod.init_modulation(W, "kml", rows=[1, 3], rng=np.random.default_rng(0))
    mk.m1.data[:] = 1.0
    mk.m2.data[:] = 1.0
    eff = mod.effective_kernel(mk).data
    np.testing.assert_array_equal(eff[[0, 2, 4]], W[[0, 2, 4]])
    np.testing.assert_allclose(eff[[1, 3]], 2 * W[[1, 3]])


def test_trainable_counts():
    assert mod.trainable_param_count((8, 4, 3, 3), "kml", 8) == 44
    assert mod.trainable_param_count((8, 4, 3, 3), "adafm") == 64
    assert mod.trainable_param_count((8, 4, 3, 3), "freeze") == 0
    assert mod.trainable_param_count((8, 4, 3, 3), "finetune") == 288
    full = mod.trainable_param_count((512, 512, 3, 3), "finetune")
    kml = mod.trainable_param_count((512, 512, 3, 3), "kml", 512)
    assert (kml, full) == (5120, 2_359_296)
    assert 460 <= full / kml <= 462


@settings(max_examples=40, deadline=None)
@given(co=st.integers(1, 12), ci=st.integers(1, 12), k=st.sampled_from([1, 3]))
def test_kml_cheaper_than_finetune(co, ci, k):
    full = co * ci * k * k
    kml = mod.trainable_param_count((co, ci, k, k), "kml", co)
    if full > co + ci * k * k:
        assert kml < full


def test_freeze_has_nothing_to_train():
    mk = mod.init_modulation(np.ones((3, 2)), "freeze")
    assert mk.trainable() == {}
    assert mod.trainable_param_count((3, 2), "freeze") == 0


def test_gradient_reaches_only_proxies():
    rng = np.random.default_rng(9)
    W = rng.normal(size=(3, 4))
    mk = mod.init_modulation(W, "kml", rng=rng)
    x = Tensor(rng.normal(size=(5, 4)))
    loss = dc.tsum(dc.tanh(dc.linear(x, mod.effective_kernel(mk))))
    g = dc.backward(loss, mk.trainable())
    assert set(g) == {"m1", "m2"}
    assert np.abs(g["m1"]).sum() > 0
    assert mk.base_W.data.tobytes() == W.tobytes()


def test_proxy_gradients_match_finite_differences():
    rng = np.random.default_rng(10)
    W = rng.normal(size=(3, 2, 3, 3))
    x = Tensor(rng.normal(size=(2, 2, 5, 5)))
    m2 = rng.normal(size=18)

    def f(m1):
        mk = mod.ModulatedKernel(Tensor(W), "kml", np.arange(3), m1, Tensor(m2))
        return dc.tsum(dc.tanh(dc.conv2d(x, mod.effective_kernel(mk), padding=1)))

    assert dc.grad_check(f, rng.normal(size=3)) < 1e-4


def test_model_modes_and_probe_setup():
    gan = build_gan("conv16", 16, seed=1)
    modes = mod.uniform_modes(gan.arch, "kml", other="freeze")
    model = mod.AdaptedModel.from_gan(gan, modes, rng=np.random.default_rng(0), train_bias=False)
    assert set(model.trainable()) == {f"{s}.{p}" for s in ("G.l1", "G.l2", "D.l0", "D.l1") for p in ("m1", "m2")}
    assert model.trainable_count() == (16 + 288) + (1 + 144) + (16 + 9) + (32 + 144)


def test_modes_from_mask_routes_rows():
    gan = build_gan("mlp2d", 8, seed=1)
    ids = kernel_ids(gan.arch)
    modes = mod.modes_from_mask(gan.arch, ids[:3], "kml", "finetune")
    assert modes["G.l0"][:4] == ["kml", "kml", "kml", "finetune"]
    model = mod.AdaptedModel.from_gan(gan, modes)
    assert model.kernel_modes()[ids[0]] == "kml"
    # unmodified model reproduces the source weights exactly where modulation is zero
    model.layers["G.l0"].modulated.m1.data[:] = 0.0
    eff = model.to_gan()
    for k, v in gan.params.items():
        assert eff.params[k].tobytes() == v.tobytes()


def test_kml_and_adafm_cannot_share_a_layer():
    gan = build_gan("mlp2d", 8, seed=1)
    spec = gan.arch.generator[0]
    modes = ["kml"] * 32 + ["adafm"] * 32
    with pytest.raises(InvalidArgumentError):
        mod.build_layer(spec, gan.params["G.l0.weight"], gan.params["G.l0.bias"], modes)
