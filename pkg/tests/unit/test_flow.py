import math
from dataclasses import replace

import numpy as np
import pytest

from flatlat.errors import ConfigError, ContractError, DimensionError, NumericError
from flatlat.flow import (
    LOG_COLUMNS,
    EmaState,
    FlowConfig,
    LatentStats,
    VelocityModel,
    default_labels,
    ema_init,
    ema_model,
    ema_update,
    euler_sample,
    fm_loss,
    grids_to_latents,
    guided_field,
    guided_velocity,
    interpolate,
    latents_to_grids,
    sample_latents,
    sampling_grid,
    time_shift,
    train_flow,
)
from flatlat.nd.gradcheck import grad_check_tensors
from flatlat.nd.rng import RngStream

pytestmark = pytest.mark.unit


class StubModel:
    """Velocity model with fixed conditional and unconditional outputs."""

    null_label = 9

    def __init__(self, v_cond=2.0, v_uncond=-1.0):
        self.v_cond, self.v_uncond = v_cond, v_uncond
        self.calls = []

    def velocity(self, z, t, labels):
        labels = np.asarray(labels)
        self.calls.append(labels.copy())
        value = self.v_uncond if (labels == self.null_label).all() else self.v_cond
        return np.full_like(z, value)


def make_model(config, tokens=3, dim=2, classes=4, seed=0, randomize=False):
    model = VelocityModel(tokens, dim, classes, config, RngStream(seed))
    if randomize:
        noise = RngStream(seed + 1)
        for p in model.parameters().values():
            if not p.data.any():
                p.data[...] = noise.normal(p.shape) * 0.2
    return model


def make_ema(decay):
    return EmaState({"w": np.zeros((2, 3))}, decay)


class TestTimeShift:
    @pytest.mark.parametrize("kappa", [1.0, 2.0, 3.0, 10.0])
    def test_endpoints_are_fixed(self, kappa):
        assert time_shift(0.0, kappa) == 0.0
        assert time_shift(1.0, kappa) == 1.0

    def test_unit_kappa_is_identity(self):
        t = np.linspace(0, 1, 11)
        np.testing.assert_array_equal(time_shift(t, 1.0), t)

    def test_midpoint_value(self):
        assert time_shift(0.5, 3.0) == pytest.approx(0.25)

    def test_shift_moves_time_towards_noise(self):
        t = np.linspace(0.05, 0.95, 19)
        assert (time_shift(t, 3.0) < t).all()
        assert np.all(np.diff(time_shift(t, 3.0)) > 0)

    @pytest.mark.parametrize("kappa", [2.0, 3.0, 7.5])
    def test_reciprocal_kappa_inverts_the_shift(self, kappa):
        t = np.linspace(0, 1, 101)
        np.testing.assert_allclose(time_shift(time_shift(t, kappa), 1.0 / kappa), t, rtol=0, atol=1e-12)

    def test_kappa_below_one_expands_early_times(self):
        assert time_shift(0.25, 1 / 3) == pytest.approx(0.5)

    def test_bad_arguments(self):
        for kappa in (0.0, -1.0):
            with pytest.raises(ConfigError):
                time_shift(0.5, kappa)
        with pytest.raises(ConfigError):
            FlowConfig(kappa=0.5)
        with pytest.raises(ContractError):
            time_shift(1.5, 3.0)

    def test_sampling_grid(self):
        grid = sampling_grid(4, 3.0)
        assert len(grid) == 5
        assert grid[0] == 0.0 and grid[-1] == 1.0
        assert grid[2] == pytest.approx(0.25)

    def test_interpolate(self):
        state = interpolate(np.zeros(3), np.full(3, 4.0), 0.25)
        np.testing.assert_array_equal(state.z_t, [1.0, 1.0, 1.0])
        with pytest.raises(DimensionError):
            interpolate(np.zeros(3), np.zeros(2), 0.5)


class TestConfig:
    @pytest.mark.parametrize(
        "field,value",
        [("kappa", 0.9), ("cfg_weight", 0.5), ("cfg_interval", (0.5, 0.5)), ("cfg_interval", (-0.1, 1.0)),
         ("euler_steps", 0), ("label_dropout", 1.0), ("heads", 5)],
    )
    def test_invalid_values(self, field, value):
        with pytest.raises(ConfigError):
            FlowConfig(**{field: value})

    def test_defaults(self):
        cfg = FlowConfig()
        assert (cfg.kappa, cfg.euler_steps, cfg.cfg_weight, cfg.cfg_interval) == (3.0, 50, 4.5, (0.225, 1.0))


class TestGuidance:
    def test_unit_weight_skips_unconditional_pass(self):
        model = StubModel()
        z = np.zeros((2, 3, 2))
        out = guided_velocity(model, z, 0.5, np.array([0, 1]), FlowConfig(cfg_weight=1.0))
        np.testing.assert_array_equal(out, model.velocity(z, 0.5, np.array([0, 1])))
        assert len(model.calls) == 2

    def test_outside_interval_ignores_weight(self):
        z = np.zeros((2, 3, 2))
        outs = []
        for w in (1.5, 4.5, 8.0):
            model = StubModel()
            outs.append(guided_velocity(model, z, 0.1, np.array([0, 1]), FlowConfig(cfg_weight=w)))
            assert len(model.calls) == 1
        np.testing.assert_array_equal(outs[0], outs[1])
        np.testing.assert_array_equal(outs[0], outs[2])

    def test_inside_interval_mixes(self):
        model = StubModel(v_cond=2.0, v_uncond=-1.0)
        out = guided_velocity(model, np.zeros((1, 2, 2)), 0.5, np.array([0]), FlowConfig(cfg_weight=3.0))
        np.testing.assert_allclose(out, -1.0 + 3.0 * 3.0)
        np.testing.assert_array_equal(model.calls[1], [9])

    def test_interval_endpoints_are_inclusive(self):
        model = StubModel()
        guided_velocity(model, np.zeros((1, 2, 2)), 0.225, np.array([0]), FlowConfig())
        assert len(model.calls) == 2


class TestSampler:
    def test_constant_field_moves_by_exactly_one_unit(self):
        z0 = RngStream(0).normal((3, 4, 2))
        res = euler_sample(lambda z, t, y: np.full_like(z, 0.7), np.zeros(3), FlowConfig(euler_steps=17), z0=z0)
        np.testing.assert_allclose(res.z, z0 + 0.7, atol=1e-12)

    @pytest.mark.parametrize("kappa", [1.0, 3.0])
    def test_linear_field_decays_like_exponential(self, kappa):
        z0 = np.ones((1, 2, 2))
        cfg = FlowConfig(euler_steps=1000, kappa=kappa)
        res = euler_sample(lambda z, t, y: -z, np.zeros(1), cfg, z0=z0)
        np.testing.assert_allclose(res.z, math.exp(-1.0), rtol=0.01)

    def test_straight_path_field_reaches_target(self):
        target = RngStream(1).normal((2, 3, 2))
        z0 = RngStream(2).normal((2, 3, 2))
        res = euler_sample(lambda z, t, y: (target - z) / (1.0 - t), np.zeros(2), FlowConfig(euler_steps=7), z0=z0)
        np.testing.assert_allclose(res.z, target, atol=1e-10)

    def test_record_trajectory(self):
        cfg = FlowConfig(euler_steps=5)
        res = euler_sample(lambda z, t, y: z * 0.0, np.zeros(2), cfg, RngStream(0), shape=(3, 2), record=True)
        assert len(res.trajectory) == 6
        np.testing.assert_array_equal(res.times, sampling_grid(5, 3.0))

    def test_needs_noise_source(self):
        with pytest.raises(ContractError):
            euler_sample(lambda z, t, y: z, np.zeros(2), FlowConfig())

    def test_blow_up_is_numeric_error(self):
        with pytest.raises(NumericError):
            euler_sample(lambda z, t, y: np.full_like(z, np.inf), np.zeros(1), FlowConfig(euler_steps=2),
                         z0=np.zeros((1, 1, 1)))

    def test_fresh_model_returns_its_noise(self, tiny_flow_config):
        model = make_model(tiny_flow_config)
        res = sample_latents(model, default_labels(6, 4), tiny_flow_config, RngStream(7))
        np.testing.assert_array_equal(res.z, RngStream(7).normal((6, 3, 2)))

    def test_guidance_leaves_the_pre_interval_prefix_untouched(self, tiny_flow_config):
        model = make_model(tiny_flow_config, randomize=True)
        labels = default_labels(4, 4)
        z0 = RngStream(3).normal((4, 3, 2))
        runs = []
        for w in (1.0, 4.5):
            cfg = replace(tiny_flow_config, euler_steps=8, cfg_weight=w)
            runs.append(euler_sample(guided_field(model, cfg), labels, cfg, z0=z0, record=True))
        plain, guided = runs
        t_lo = tiny_flow_config.cfg_interval[0]
        # state k is reached after the steps taken at times grid[0..k-1]
        first_guided = next(k for k in range(1, 9) if plain.times[k - 1] >= t_lo)
        assert first_guided > 1
        for k in range(first_guided):
            assert np.array_equal(plain.trajectory[k], guided.trajectory[k]), k
        assert not np.array_equal(plain.trajectory[first_guided], guided.trajectory[first_guided])


class TestLoss:
    def test_zero_velocity_loss_is_target_energy(self):
        z1 = RngStream(0).normal((4, 3, 2))
        cfg = FlowConfig(label_dropout=0.0)
        loss = fm_loss(lambda z, t, y: z * 0.0, z1, np.zeros(4), RngStream(3), cfg).item()
        z0 = RngStream(3).normal((4, 3, 2))
        assert loss == pytest.approx(((z1 - z0) ** 2).mean(), rel=1e-12)

    def test_label_dropout_uses_null_label(self):
        seen = []

        def velocity(z, t, labels):
            seen.append(labels)
            return z * 0.0

        z1 = np.zeros((64, 1, 1))
        fm_loss(velocity, z1, np.zeros(64), RngStream(0), FlowConfig(label_dropout=0.5), null_label=4)
        fm_loss(velocity, z1, np.zeros(64), RngStream(0), FlowConfig(label_dropout=0.5))
        assert 10 < (seen[0] == 4).sum() < 54
        assert not seen[1].any()

    def test_empty_batch(self):
        with pytest.raises(ContractError):
            fm_loss(lambda z, t, y: z, np.zeros((0, 2, 2)), np.zeros(0), RngStream(0), FlowConfig())

    def test_gradients(self, tiny_flow_config):
        model = make_model(tiny_flow_config, randomize=True)
        z1 = RngStream(4).normal((3, 3, 2))
        labels = np.array([0, 1, 2])
        tensors = [model.final.out.weight, model.latent_in.weight, model.label_embed.table, model.blocks[0].ada.weight]

        def loss():
            return fm_loss(model, z1, labels, RngStream(5), tiny_flow_config, model.null_label)

        assert grad_check_tensors(loss, tensors, max_coords=8) < 1e-4


class TestModel:
    def test_wrong_latent_shape(self, tiny_flow_config):
        with pytest.raises(DimensionError):
            make_model(tiny_flow_config).velocity(np.zeros((2, 4, 2)), 0.5, np.zeros(2))

    def test_null_label_is_last_row(self, tiny_flow_config):
        model = make_model(tiny_flow_config)
        assert (model.num_classes, model.null_label) == (4, 4)

    def test_labels_change_output(self, tiny_flow_config):
        model = make_model(tiny_flow_config, randomize=True)
        z = RngStream(1).normal((2, 3, 2))
        a = model.velocity(z, 0.3, np.array([0, 0]))
        b = model.velocity(z, 0.3, np.array([1, 1]))
        assert not np.allclose(a, b)


class TestEma:
    def test_update_blends(self, tiny_flow_config):
        model = make_model(tiny_flow_config)
        ema = ema_init(model, 0.75)
        before = {k: v.copy() for k, v in ema.shadow.items()}
        live = {k: v + 1.0 for k, v in model.state_dict().items()}
        ema_update(ema, live)
        for k in before:
            np.testing.assert_allclose(ema.shadow[k], before[k] + 0.25, atol=1e-12)

    def test_ema_model_is_a_copy(self, tiny_flow_config):
        model = make_model(tiny_flow_config)
        ema = ema_init(model, 0.0)
        ema_update(ema, {k: v + 1.0 for k, v in model.state_dict().items()})
        shadow = ema_model(model, ema)
        assert not np.array_equal(shadow.latent_in.weight.data, model.latent_in.weight.data)
        np.testing.assert_allclose(shadow.latent_in.weight.data, model.latent_in.weight.data + 1.0)

    def test_name_mismatch(self, tiny_flow_config):
        ema = ema_init(make_model(tiny_flow_config), 0.5)
        with pytest.raises(DimensionError):
            ema_update(ema, {"other": np.zeros(1)})

    def test_unit_decay_freezes_the_shadow(self):
        ema = make_ema(1.0)
        ema_update(ema, {"w": np.full((2, 3), 5.0)})
        np.testing.assert_array_equal(ema.shadow["w"], np.zeros((2, 3)))

    def test_two_half_steps_reach_three_quarters(self):
        ema = make_ema(0.5)
        for _ in range(2):
            ema_update(ema, {"w": np.ones((2, 3))})
        np.testing.assert_allclose(ema.shadow["w"], 0.75, atol=1e-15)

    def test_converges_to_a_constant_target(self):
        ema = make_ema(0.9)
        for _ in range(300):
            ema_update(ema, {"w": np.full((2, 3), -2.0)})
        np.testing.assert_allclose(ema.shadow["w"], -2.0, atol=1e-10)


class TestTraining:
    def test_tiny_run(self, tiny_flow_config):
        latents = RngStream(0).normal((16, 3, 2))
        result = train_flow(latents, default_labels(16, 4), 4, tiny_flow_config, RngStream(1))
        assert list(result.log.columns) == LOG_COLUMNS
        assert result.log["step"].tolist() == [1, 2, 3]
        assert np.isfinite(result.log[["loss", "ema_loss"]].to_numpy()).all()
        assert result.ema_model().tokens == 3

    def test_deterministic(self, tiny_flow_config):
        latents = RngStream(0).normal((16, 3, 2))
        logs = [train_flow(latents, default_labels(16, 4), 4, tiny_flow_config, RngStream(1)).log for _ in range(2)]
        assert logs[0].equals(logs[1])

    def test_zero_steps_keeps_initial_weights(self, tiny_flow_config):
        cfg = replace(tiny_flow_config, train_steps=0)
        result = train_flow(RngStream(0).normal((8, 3, 2)), default_labels(8, 4), 4, cfg, RngStream(1))
        assert result.log.empty

    def test_label_count_mismatch(self, tiny_flow_config):
        with pytest.raises(DimensionError):
            train_flow(np.zeros((4, 3, 2)), np.zeros(3), 4, tiny_flow_config, RngStream(0))


class TestHelpers:
    def test_latent_stats_round_trip(self):
        z = RngStream(0).normal((50, 3, 2)) * 4.0 + 2.0
        stats = LatentStats.fit(z)
        s = stats.standardize(z)
        np.testing.assert_allclose(s.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(stats.destandardize(s), z, atol=1e-12)

    def test_default_labels_cycle(self):
        assert default_labels(6, 4).tolist() == [0, 1, 2, 3, 0, 1]

    def test_latents_as_grids(self):
        z = RngStream(0).normal((3, 4, 2))
        grids = latents_to_grids(z, np.array([2, 0, 1]))
        assert (grids[0].grid_h, grids[0].grid_w, grids[0].feature_dim) == (1, 4, 2)
        back, labels = grids_to_latents(grids)
        np.testing.assert_allclose(back, z, atol=1e-6)
        assert labels.tolist() == [2, 0, 1]
