import numpy as np
import pytest

from qdistill.autodiff import ShapeError, Tape, Tensor, grad, rel_error
from qdistill.models import (
    VARIANTS,
    ModelConfig,
    ToyConfig,
    build_model,
    build_toy_model,
    init_params,
    load_params,
    save_params,
)


def test_classical_parameter_count():
    assert build_model(ModelConfig.from_variant("classical")).params.count() == 61706


def test_quantum_rh_parameter_shapes():
    p = build_model(ModelConfig.from_variant("q-r-h")).params
    assert p["qnn.coeffs"].shape == (6, 4)
    assert p["qnn.angles"].shape == (3, 6, 3)
    assert p["qnn.res_weights"].shape == (6, 64) and p["qnn.res_bias"].shape == (6,)
    extractor = 6 * 25 + 6 + 16 * 150 + 16 + 400 * 120 + 120
    assert p.count() == extractor + 120 * 64 + 64 + 54 + 24 + 6 * 64 + 6 + 6 * 10 + 10


@pytest.mark.parametrize("variant", list(VARIANTS))
@pytest.mark.parametrize("dataset", ["mnist", "cifar10"])
def test_forward_shape_and_finite(variant, dataset, rng):
    model = build_model(ModelConfig.from_variant(variant, dataset), seed=1)
    c = model.config.input_spec[0]
    out = model.forward(Tensor(rng.normal(size=(4, c, 32, 32)))).data
    assert out.shape == (4, 10) and np.all(np.isfinite(out))


def test_identical_images_identical_logits(rng):
    model = build_model(ModelConfig.from_variant("q-r-h"))
    img = rng.normal(size=(1, 1, 32, 32))
    out = model.forward(Tensor(np.concatenate([img, img]))).data
    np.testing.assert_array_equal(out[0], out[1])


def test_input_shape_errors():
    with pytest.raises(ValueError):
        ModelConfig(input_spec=(1, 28, 28))
    with pytest.raises(ShapeError):
        build_model(ModelConfig.from_variant("classical")).forward(Tensor(np.zeros((1, 3, 32, 32))))


def test_classical_residual_rejected():
    with pytest.raises(ValueError):
        ModelConfig(variant="classical", residual=True)


def test_init_determinism():
    cfg = ModelConfig.from_variant("q-r-h")
    assert init_params(cfg, 7).equal(init_params(cfg, 7))
    assert not init_params(cfg, 7).equal(init_params(cfg, 8))
    np.testing.assert_array_equal(init_params(cfg, 0)["qnn.coeffs"].data, np.tile([0, 0, 0, 1.0], (6, 1)))


def test_angles_in_range():
    a = init_params(ModelConfig.from_variant("q-nr-h"), 3)["qnn.angles"].data
    assert a.min() >= 0 and a.max() < 2 * np.pi


def test_nr_variants_agree_at_init(rng):
    x = Tensor(rng.normal(size=(3, 1, 32, 32)))
    a = build_model(ModelConfig.from_variant("q-nr-h"), seed=4).forward(x).data
    b = build_model(ModelConfig.from_variant("q-nr-nh"), seed=4).forward(x).data
    np.testing.assert_array_equal(a, b)


def test_frozen_variant_shares_everything_but_coeffs():
    t = init_params(ModelConfig.from_variant("q-r-h"), 2)
    f = init_params(ModelConfig.from_variant("q-r-h-frozen"), 2)
    assert t.names() == f.names()
    for n in t.names():
        same = np.array_equal(t[n].data, f[n].data)
        assert same == (n != "qnn.coeffs"), n
    assert "qnn.coeffs" in f.frozen and "qnn.coeffs" not in t.frozen


def test_classical_and_quantum_share_extractor(rng):
    q = build_model(ModelConfig.from_variant("q-r-h"), seed=5)
    c = build_model(ModelConfig.from_variant("classical"), seed=5)
    x = Tensor(rng.normal(size=(2, 1, 32, 32)))
    np.testing.assert_array_equal(q.features(x).data, c.features(x).data)


def test_input_gradient_matches_fd_on_tiny_model(rng):
    model = build_toy_model(ToyConfig(kind="dense_qnn", n_inputs=10, hidden=4, residual=True), seed=0)
    x0 = rng.normal(size=(2, 10))
    y = np.eye(2)[[0, 1]]
    x = Tensor(x0, requires_grad=True)
    with Tape():
        (g,) = grad(model.loss(x, y), [x])
    from qdistill.autodiff import finite_diff_gradient

    fd = finite_diff_gradient(lambda t: model.loss(t, y), x0).data
    assert rel_error(g.data, fd) < 1e-3


def test_checkpoint_round_trip(tmp_path):
    p = init_params(ModelConfig.from_variant("q-r-h"), 11)
    path = tmp_path / "theta.qdl"
    save_params(path, p)
    q = load_params(path, seed=11, frozen=p.frozen)
    assert p.equal(q)
    save_params(tmp_path / "again.qdl", q)
    assert path.read_bytes() == (tmp_path / "again.qdl").read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.qdl"
    path.write_bytes(b"NOPE" + b"\0" * 8)
    with pytest.raises(ValueError, match="bad QDL1 header"):
        load_params(path)


def test_toy_models():
    m = build_toy_model(ToyConfig(kind="mlp", n_inputs=8, hidden=8, n_classes=3))
    assert m.params.count() == 8 * 8 + 8 + 8 * 3 + 3
    assert m.forward(Tensor(np.zeros((2, 8)))).shape == (2, 3)
    with pytest.raises(ValueError):
        build_toy_model(ToyConfig(kind="transformer"))
