import numpy as np
import pytest
from conftest import make_batch
from hypothesis import given, settings
from hypothesis import strategies as st

from stagann import autodiff as ad
from stagann.checks import model_case
from stagann.dpm import DpmConfig
from stagann.graph import Adjacency, masked_gnn_layer
from stagann.model import Convergence, Discriminator, KrigeBatch, ModelConfig, RevIN, STAGANN, build_model


def small_model(seed=0, **kw):
    m = build_model(ModelConfig(hidden=16, **kw), seed)
    return m.eval()


def test_revin_examples():
    r = RevIN()
    y, stats = r.normalize(np.array([[1.0, 3.0]]))
    np.testing.assert_allclose(y.data, [[-1.0, 1.0]], atol=1e-4)
    x = np.random.default_rng(0).normal(size=(3, 24)) * 5 + 2
    y, stats = r.normalize(x)
    np.testing.assert_allclose(r.denormalize(y, stats).data, x, atol=1e-9)
    z = np.zeros((2, 24))
    y, stats = r.normalize(z)
    np.testing.assert_array_equal(r.denormalize(y, stats).data, z)


def test_convergence_pass_through_and_channel_count():
    c = Convergence(1, np.random.default_rng(0))
    c.conv1.weight.data[:] = 1.0
    c.conv2.weight.data[:] = 1.0
    x = np.random.default_rng(1).normal(size=(2, 3, 24))
    np.testing.assert_array_equal(c(ad.Tensor(x[..., None])).data, x)
    m = small_model()
    assert m.convergence.conv1.weight.shape == (5, 5)
    _, channels = m.decode(ad.Tensor(make_batch().x), make_batch(), return_channels=True)
    assert len(channels) == 5


def test_discriminator_shapes_and_patches():
    d = Discriminator(6, 8, np.random.default_rng(0))
    z = np.tile(np.random.default_rng(1).normal(size=6), 4)[None, None]
    out = d(z).data
    assert out.shape == (1, 1, 2, 4)
    # identical patches after standardisation give identical logits
    np.testing.assert_allclose(np.broadcast_to(out[..., :1], out.shape), out, atol=1e-12)
    with pytest.raises(ValueError):
        Discriminator(30, 8, np.random.default_rng(0))(np.zeros((1, 2, 24)))


def test_discriminator_permutation():
    d = Discriminator(6, 8, np.random.default_rng(0))
    z = np.random.default_rng(2).normal(size=(2, 5, 24))
    perm = np.array([3, 0, 4, 1, 2])
    np.testing.assert_allclose(d(z).data[:, perm], d(z[:, perm]).data, atol=1e-14)


def test_forward_shapes_and_finite():
    m = small_model()
    for seed in range(100):
        b = make_batch(n=4 + seed % 4, seed=seed, b=1)
        xhat, label = m.forward(b)
        assert xhat.shape == b.x.shape
        assert label.shape == b.x.shape[:2] + (2, 4)
        assert np.all(np.isfinite(xhat.data)) and np.all(np.isfinite(label.data))


def test_known_rows_restored_in_decoder():
    m = small_model()
    b = make_batch(n=6, unknown=(1, 4)).with_mask(np.array([0, 0, 1, 0, 0, 0], dtype=bool))
    z = m.encode(b)
    _, channels = m.decode(z, b, return_channels=True)
    keep = b.observed
    for ch in channels:
        np.testing.assert_array_equal(ch.data[:, keep], b.x[:, keep])


def test_unknown_rows_get_finite_nonzero_encoding():
    m = small_model()
    b = make_batch(n=5, unknown=(0, 2))
    z = m.encode(b).data
    assert np.all(np.isfinite(z[:, [0, 2]])) and np.abs(z[:, [0, 2]]).max() > 0


def test_encoder_matches_hand_composition():
    m = small_model()
    b = make_batch(n=3, unknown=(1,), b=1)
    graphs = m.graphs(b)
    h = masked_gnn_layer(b.x, b.observed_adjacency(), m.encoder[0]).data
    h = np.where(b.observed[:, None], b.x, h)
    h = masked_gnn_layer(h, b.adjacency, m.encoder[1])
    expected = m.dpm(h, graphs["trend"], graphs["residual"]).data
    np.testing.assert_allclose(m.encode(b, graphs).data, expected, atol=1e-13)


def test_inductive_over_sensor_counts():
    m = small_model()
    shapes = {k: v.shape for k, v in m.named_parameters().items()}
    for n in (5, 7, 35):
        xhat, _ = m.forward(make_batch(n=n, seed=n, unknown=(0, 1)))
        assert xhat.shape[1] == n
    assert {k: v.shape for k, v in m.named_parameters().items()} == shapes


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_forward_permutation_equivariant(seed):
    m = small_model(seed % 3)
    b = make_batch(n=7, seed=seed, unknown=(0, 3))
    perm = np.random.default_rng(seed).permutation(7)
    w = b.adjacency.weights
    pb = KrigeBatch(b.x[:, perm], Adjacency(w[np.ix_(perm, perm)], normalization="row-stochastic"),
                    b.timestamps, b.known[perm], b.masked[perm], b.coords[perm], b.target[:, perm])
    x1, d1 = m.forward(b)
    x2, d2 = m.forward(pb)
    np.testing.assert_allclose(x1.data[:, perm], x2.data, atol=1e-9)
    np.testing.assert_allclose(d1.data[:, perm], d2.data, atol=1e-9)


def test_ablation_s_uses_predefined_graph():
    m = small_model(use_d3mgm=False)
    b = make_batch()
    g = m.graphs(b)
    for name in ("trend", "residual", "decoder"):
        assert g[name] is b.adjacency.weights
    assert not hasattr(m, "d3mgm")


@pytest.mark.parametrize("flags", [
    {"use_dpm": False}, {"use_revin": False}, {"use_location": False}, {"use_timestamp": False},
    {"phase_graph": "predefined"}, {"dpm": DpmConfig(decouple=False)},
])
def test_ablated_models_run(flags):
    m = small_model(**flags)
    xhat, _ = m.forward(make_batch())
    assert np.all(np.isfinite(xhat.data))


def test_no_coordinates_falls_back_to_linear_path():
    m = build_model(ModelConfig(hidden=16), 0, has_coordinates=False).eval()
    xhat, _ = m.forward(make_batch(coords=False))
    assert not m.config.use_location and np.all(np.isfinite(xhat.data))


def test_model_gradient_check():
    model, fn, leaves = model_case(0)
    with model.frozen_discrete() as cache:
        fn()
        cache.replay = True
        err = ad.check_gradients(fn, leaves, max_checks_per_input=2, rng=np.random.default_rng(0))
    assert err < 1e-4


def test_config_round_trip():
    cfg = ModelConfig(hidden=7, use_dpm=False)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"nope": 1})


def test_state_dict_round_trip_changes_nothing():
    a, b = small_model(0), small_model(1)
    b.load_state_dict(a.state_dict())
    bt = make_batch()
    np.testing.assert_array_equal(a.forward(bt)[0].data, b.forward(bt)[0].data)
    assert isinstance(a, STAGANN)
