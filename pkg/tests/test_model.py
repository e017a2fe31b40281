import numpy as np
import pytest

from dgan import autodiff as ad
from dgan.anchors import AnchorSet
from dgan.errors import MissingFeature, ShapeError
from dgan.gradcheck import check_gradients
from dgan.model import (
    ModelConfig,
    SceneInputs,
    encode_map,
    encode_state,
    encode_trajectory,
    forward,
    forward_tensors,
    fuse,
    gat_layer,
    init_params,
    observed_history,
    predict_head,
    prepare_scene,
)
from dgan.scene import AgentFrame, Scenario, SemanticMap, Track

from helpers import (
    V,
    jitter_params,
    loss_closure,
    random_anchors,
    small_config,
    tiny_config,
    toy_scenario,
)


def zero_out(params, prefix):
    for name, p in params.items():
        if name.startswith(prefix):
            p.data = np.zeros_like(p.data)


def synthetic_inputs(n, mask, config, seed=0):
    """SceneInputs built directly from random features, no raster."""
    rng = np.random.default_rng(seed)
    from dgan.model import STATE_FEATURES

    return SceneInputs(
        [f"a{i}" for i in range(n)],
        [V] * n,
        [AgentFrame((0.0, 0.0), 0.0)] * n,
        rng.normal(size=(n, config.t_ob, 2)),
        rng.normal(size=(n, STATE_FEATURES)),
        np.asarray(mask, dtype=bool),
    )


@pytest.fixture(scope="module")
def default_setup():
    anchors = random_anchors(horizon=15, k=20)
    cfg = ModelConfig().with_anchors(anchors)
    return cfg, init_params(cfg, seed=0), anchors


class TestEncoders:
    def test_default_dimensions(self, default_setup):
        cfg, params, _ = default_setup
        assert (cfg.d_map, cfg.d_traj, cfg.d_state, cfg.fused_dim) == (256, 256, 128, 640)
        raster = np.random.default_rng(0).random((3, 200, 200))
        assert encode_map(raster, [(100, 100), (3, 197)], params, cfg).shape == (2, 256)
        assert encode_trajectory(np.zeros((2, 10, 2)), params).shape == (2, 256)
        assert encode_state(np.zeros((2, 9)), params).shape == (2, 128)

    def test_zero_raster_gives_zero_map_feature(self, default_setup):
        cfg, params, _ = default_setup
        v = encode_map(np.zeros((3, 200, 200)), [(50, 50)], params, cfg)
        assert not v.data.any()

    def test_same_pixel_same_feature(self, default_setup):
        cfg, params, _ = default_setup
        raster = np.random.default_rng(1).random((3, 200, 200))
        v = encode_map(raster, [(70, 20), (70, 20)], params, cfg).data
        assert np.array_equal(v[0], v[1])

    def test_raster_shape_checked(self, default_setup):
        cfg, params, _ = default_setup
        with pytest.raises(ShapeError):
            encode_map(np.zeros((3, 100, 100)), [(5, 5)], params, cfg)

    def test_local_cnn_equals_full_pass(self):
        anchors = random_anchors()
        s = toy_scenario()
        cfg_local = small_config(anchors)
        cfg_full = small_config(anchors, local_cnn=False)
        params = jitter_params(init_params(cfg_local, seed=3), scale=0.1)
        inputs = prepare_scene(s, cfg_local, anchors)
        px = list(inputs.agent_px) + [(0, 0), (39, 39), (20, 0)]
        a = encode_map(inputs.raster, px, params, cfg_local).data
        b = encode_map(inputs.raster, px, params, cfg_full).data
        assert np.array_equal(a, b)

    def test_zero_params_trajectory_and_state(self):
        cfg = tiny_config(random_anchors())
        params = init_params(cfg)
        for prefix in ("traj.", "state."):
            zero_out(params, prefix)
        obs = np.random.default_rng(0).normal(size=(3, 5, 2))
        assert not encode_trajectory(obs, params).data.any()
        assert not encode_state(np.ones((2, 9)), params).data.any()

    def test_identical_histories_share_encoding(self):
        cfg = tiny_config(random_anchors())
        params = init_params(cfg, seed=2)
        obs = np.random.default_rng(0).normal(size=(1, 5, 2))
        h = encode_trajectory(np.concatenate([obs, obs]), params).data
        assert np.array_equal(h[0], h[1])
        st = np.random.default_rng(1).normal(size=(1, 9))
        e = encode_state(np.concatenate([st, st]), params).data
        assert np.array_equal(e[0], e[1])

    def test_short_history_front_padded(self):
        tr = Track.from_points("a", [(3, 1.0, 0.0), (4, 2.0, 0.0), (5, 3.0, 0.0)], V)
        obs = observed_history(tr, AgentFrame((3.0, 0.0), 0.0), 5, 5)
        assert obs[:, 0].tolist() == [-2.0, -2.0, -2.0, -1.0, 0.0]

    def test_fuse(self):
        a, b, c = (ad.Tensor(np.full((1, n), float(i))) for i, n in ((1, 256), (2, 256), (3, 128)))
        f = fuse(a, b, c, ModelConfig()).data
        assert f.shape == (1, 640)
        assert (f[0, :256] == 1).all() and (f[0, 256:512] == 2).all() and (f[0, 512:] == 3).all()
        zeros = [ad.Tensor(np.zeros((1, n))) for n in (256, 256, 128)]
        assert not fuse(*zeros).data.any()
        with pytest.raises(ShapeError):
            fuse(a, b, ad.Tensor(np.zeros((1, 127))), ModelConfig())


class TestGAT:
    def params(self, f=6, g=4, seed=0):
        rng = np.random.default_rng(seed)
        return {
            "gat.0.w": ad.parameter(rng.normal(size=(f, g))),
            "gat.0.a_src": ad.parameter(rng.normal(size=(g, 1))),
            "gat.0.a_dst": ad.parameter(rng.normal(size=(g, 1))),
        }

    def test_isolated_agent(self):
        p = self.params()
        h = np.random.default_rng(1).normal(size=(3, 6))
        out, att = gat_layer(ad.Tensor(h), np.eye(3, dtype=bool), p, 0)
        assert np.array_equal(out.data, h @ p["gat.0.w"].data)
        assert np.array_equal(att.data, np.eye(3))

    def test_identical_features_identical_outputs(self):
        p = self.params()
        h = np.tile(np.random.default_rng(2).normal(size=(1, 6)), (2, 1))
        out, _ = gat_layer(ad.Tensor(h), np.ones((2, 2), bool), p, 0)
        assert np.array_equal(out.data[0], out.data[1])

    def test_attention_sums_to_one(self):
        rng = np.random.default_rng(3)
        p = self.params()
        for _ in range(50):
            n = int(rng.integers(1, 30))
            m = rng.random((n, n)) < 0.3
            m = m | m.T | np.eye(n, dtype=bool)
            _, att = gat_layer(ad.Tensor(rng.normal(0, 5, (n, 6))), m, p, 0)
            assert np.abs(att.data.sum(axis=1) - 1.0).max() <= 1e-12
            assert not att.data[~m].any()

    def test_missing_feature(self):
        with pytest.raises(MissingFeature):
            gat_layer(ad.Tensor(np.zeros((2, 6))), np.ones((3, 3), bool), self.params(), 0)


class TestHead:
    def test_joint_normalized(self):
        anchors = random_anchors(k=4)
        cfg = tiny_config(anchors)
        params = jitter_params(init_params(cfg), scale=1.0)
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = ad.Tensor(rng.normal(0, 3, (5, cfg.gat_hidden)))
            v = ad.Tensor(rng.normal(0, 3, (5, cfg.fused_dim)))
            cp, aps, joint, _ = predict_head(p, v, params, cfg)
            assert np.abs(cp.data.sum(axis=1) - 1).max() <= 1e-12
            for a in aps:
                assert np.abs(a.data.sum(axis=1) - 1).max() <= 1e-12
            assert np.abs(joint.data.sum(axis=1) - 1).max() <= 1e-9

    def test_single_class_single_anchor(self):
        anchors = AnchorSet({V: np.ones((1, 3, 2))})
        cfg = tiny_config(anchors)
        params = jitter_params(init_params(cfg), scale=2.0)
        _, _, joint, _ = predict_head(ad.Tensor(np.ones((2, cfg.gat_hidden))), ad.Tensor(np.ones((2, cfg.fused_dim))), params, cfg)
        assert np.array_equal(joint.data, np.ones((2, 1)))

    def test_offsets_shape_logistic(self):
        anchors = random_anchors(horizon=15, k=3)
        cfg = tiny_config(anchors)
        params = init_params(cfg)
        *_, off = predict_head(ad.Tensor(np.ones((2, cfg.gat_hidden))), ad.Tensor(np.ones((2, cfg.fused_dim))), params, cfg)
        assert off.data.reshape(2, anchors.total, 15, 2).shape == (2, 9, 15, 2)


class TestForward:
    def test_stationary_agent_zero_head(self):
        anchors = random_anchors(k=3)
        cfg = tiny_config(anchors)
        params = init_params(cfg)
        zero_out(params, "head.")
        tr = Track.from_points("still", [(t, 4.0, -2.0) for t in range(1, 9)], V)
        s = Scenario([tr], SemanticMap.empty(), 5, 8, 0.4)
        (pred,) = forward(s, anchors, params, cfg)
        assert np.allclose(pred.trajectories, anchors.stacked() + np.array([4.0, -2.0]), atol=1e-12)
        assert np.allclose(pred.probabilities, 1.0 / anchors.total, atol=1e-15)

    def test_probabilities_sum_to_one(self):
        anchors = random_anchors(k=4)
        cfg = tiny_config(anchors)
        params = jitter_params(init_params(cfg, seed=4), scale=0.5)
        for pred in forward(toy_scenario(), anchors, params, cfg):
            assert abs(pred.probabilities.sum() - 1.0) <= 1e-9
            assert np.isfinite(pred.trajectories).all()

    def test_permutation_equivariance(self):
        anchors = random_anchors(k=3)
        cfg = small_config(anchors)
        params = jitter_params(init_params(cfg, seed=5), scale=0.2)
        s = toy_scenario()
        shuffled = Scenario(list(reversed(s.agents)), s.map, s.t_ob, s.t_f, s.frame_period)
        a = {p.agent_id: p for p in forward(s, anchors, params, cfg)}
        b = {p.agent_id: p for p in forward(shuffled, anchors, params, cfg)}
        assert list(a) == ["veh", "cyc", "ped"] and list(b) == ["ped", "cyc", "veh"]
        for aid in a:
            assert np.abs(a[aid].trajectories - b[aid].trajectories).max() <= 1e-9
            assert np.abs(a[aid].probabilities - b[aid].probabilities).max() <= 1e-9

    @pytest.mark.parametrize("layers", [1, 2])
    def test_locality(self, layers):
        # path graph a0 - a1 - a2 - a3; a3 is 3 hops from a0
        anchors = random_anchors(k=2)
        cfg = tiny_config(anchors, use_map=False, gat_layers=layers)
        params = jitter_params(init_params(cfg, seed=6))
        mask = np.eye(4, dtype=bool)
        for i in range(3):
            mask[i, i + 1] = mask[i + 1, i] = True
        base = synthetic_inputs(4, mask, cfg)
        moved = synthetic_inputs(4, mask, cfg)
        moved.observed[3] += 5.0
        moved.states[3] -= 2.0
        ja = forward_tensors(base, params, cfg).joint.data
        jb = forward_tensors(moved, params, cfg).joint.data
        for row in range(3 - layers):
            assert np.array_equal(ja[row], jb[row])
        assert not np.array_equal(ja[3], jb[3])


def test_full_loss_gradient_toy():
    anchors = random_anchors(k=2)
    cfg = tiny_config(anchors)
    params = jitter_params(init_params(cfg, seed=0))
    inputs = prepare_scene(toy_scenario(), cfg, anchors)
    assert len(inputs.target_rows) == 3
    errs = check_gradients(loss_closure(inputs, params, cfg, anchors), list(params.values()), h=1e-5)
    assert set(errs) == set(params) and max(errs.values()) < 1e-3, errs


def test_config_round_trip():
    cfg = ModelConfig(k_per_class=(3, 4, 5), cnn_channels=(4, 4))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ShapeError):
        ModelConfig(k_per_class=(0, 1, 1))
