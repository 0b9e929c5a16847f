import numpy as np
import pytest

from ifol import autodiff as ad
from ifol.checks import check_meta_gradient
from ifol.fem import AllenCahn, StationaryDiffusion, dirichlet_from_sets
from ifol.field_net import FieldNetConfig, init_params
from ifol.learning import (AdamState, Sample, TrainConfig, TrainState, encode, infer, make_loss, meta_gradient,
                           named_rng, rollout, train)
from ifol.mesh import generate_grid
from ifol.sampling import FourierSpec, GrfSpec, make_dataset

MESH = generate_grid(2, (6, 6))
NET = FieldNetConfig(hidden=(12, 12), latent_dim=6)
BCS = (("left", 0, 1.0), ("right", 0, 0.0))
PROBLEM = StationaryDiffusion()


@pytest.fixture(scope="module")
def data():
    return make_dataset("fourier", 8, MESH, FourierSpec(sigmoid=True), 0)


def small_cfg(**kw):
    base = dict(epochs=3, batch_size=4, chunk_size=2, lr_start=1e-3, lr_end=1e-4, seed=9)
    base.update(kw)
    return TrainConfig(**base)


def test_learning_rate_schedule():
    cfg = TrainConfig(lr_start=1e-4, lr_end=1e-6, epochs=5)
    assert cfg.learning_rate(0) == 1e-4
    assert cfg.learning_rate(4) == pytest.approx(1e-6, rel=1e-12)
    assert cfg.learning_rate(2) == pytest.approx(1e-5, rel=1e-12)
    assert TrainConfig(lr_decay="constant", epochs=5).learning_rate(3) == TrainConfig().lr_start


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_start=1e-6, lr_end=1e-4)
    with pytest.raises(ValueError):
        TrainConfig(lr_decay="cosine")
    with pytest.raises(ValueError):
        TrainConfig(k_encode=-1)


def test_adam_first_step_is_lr_times_sign():
    st = AdamState.zeros(3)
    step, st2 = st.update(np.array([0.5, -2.0, 0.0]), 0.1)
    np.testing.assert_allclose(step, [-0.1, 0.1, 0.0], atol=1e-7)
    assert st2.step == 1 and st.step == 0


def test_named_streams_independent():
    a = named_rng(3, "init").random(4)
    assert np.array_equal(a, named_rng(3, "init").random(4))
    assert not np.array_equal(a, named_rng(3, "shuffle").random(4))


def test_encode_zero_steps_gives_zero_code(data):
    p = init_params(NET, 0)
    lat = encode(data[0], p, PROBLEM, MESH, TrainConfig(k_encode=0), BCS)
    np.testing.assert_array_equal(lat.values, 0.0)


def test_encode_steps_lower_the_loss(data):
    p = init_params(NET, 0)
    loss = make_loss(p, PROBLEM, MESH, data[:1], BCS)
    l0 = np.zeros((1, NET.latent_dim))
    l3 = encode(data[:1], p, PROBLEM, MESH, TrainConfig(k_encode=3, alpha=1e-3), BCS)
    assert float(ad.primal(loss(p.flat, l3))) < float(ad.primal(loss(p.flat, l0)))


@pytest.mark.parametrize("k", [1, 2, 3])
def test_meta_gradient_exact(k):
    assert check_meta_gradient(k) < 1e-6


def test_meta_gradient_chunking_invariant(data):
    p = init_params(NET, 0)
    a = meta_gradient(data[:6], p, PROBLEM, MESH, TrainConfig(chunk_size=6), BCS)
    b = meta_gradient(data[:6], p, PROBLEM, MESH, TrainConfig(chunk_size=2), BCS)
    assert a[0] == pytest.approx(b[0], rel=1e-12)
    np.testing.assert_allclose(a[1], b[1], rtol=1e-10, atol=1e-14)


def test_training_is_deterministic_and_thread_invariant(data):
    runs = [train(data, PROBLEM, MESH, small_cfg(threads=t), NET, BCS) for t in (1, 1, 2)]
    for p, h in runs[1:]:
        np.testing.assert_array_equal(p.flat, runs[0][0].flat)
        assert h.to_csv() == runs[0][1].to_csv()


def test_training_reduces_loss(data):
    _, h = train(data, PROBLEM, MESH, small_cfg(epochs=8), NET, BCS)
    assert h.loss[-1] < h.loss[0]


def test_resume_matches_uninterrupted(data):
    states = []
    full, hist = train(data, PROBLEM, MESH, small_cfg(), NET, BCS, callback=states.append)
    resumed, hist2 = train(data, PROBLEM, MESH, small_cfg(), NET, BCS, resume=states[0])
    np.testing.assert_array_equal(full.flat, resumed.flat)
    assert hist.to_csv() == hist2.to_csv()
    assert isinstance(states[0], TrainState) and states[-1].epoch == 2


def test_infer_applies_dirichlet_exactly(data):
    p = init_params(NET, 0)
    u = infer(data[0], p, PROBLEM, MESH, TrainConfig(), bcs=BCS)
    assert np.all(u[MESH.node_sets["left"]] == 1.0)
    assert np.all(u[MESH.node_sets["right"]] == 0.0)
    fine = generate_grid(2, (11, 11))
    uf = infer(data[0], p, PROBLEM, MESH, TrainConfig(), mesh_eval=fine, bcs=BCS)
    assert uf.shape == (fine.n_nodes,) and np.all(uf[fine.node_sets["left"]] == 1.0)


def test_rollout_length_and_transient_guard():
    p = init_params(NET, 0)
    ac = AllenCahn(eps=0.2, dt=0.01)
    u0 = make_dataset("grf", 1, MESH, GrfSpec(0.3), 0)[0].u_prev
    res = rollout(u0, p, ac, MESH, 3, TrainConfig())
    assert len(res.fields) == 3 and not res.diverged
    with pytest.raises(ValueError):
        rollout(u0, p, PROBLEM, MESH, 3, TrainConfig())


def test_detached_residual_needs_first_order(data):
    p = init_params(NET, 0)
    with pytest.raises(NotImplementedError):
        meta_gradient(data[:2], p, StationaryDiffusion(detach_residual=True), MESH, TrainConfig(), BCS)
    loss, g = meta_gradient(data[:2], p, StationaryDiffusion(detach_residual=True), MESH,
                            TrainConfig(first_order=True), BCS)
    assert np.isfinite(loss) and np.all(np.isfinite(g))


def test_sample_shape_checked():
    p = init_params(NET, 0)
    with pytest.raises(ValueError):
        encode(Sample(np.ones(5)), p, PROBLEM, MESH, TrainConfig(), BCS)
