import pytest
import torch
from errors import ContractError
from latent_loss import total_loss
from models import GaussianField, LatentSample
from network import (
    VRNN,
    ConvLSTMCell,
    make_generators,
    mean_prior_sigma,
    parameter_count,
    sample_latent,
)


def clip(batch: int, cfg, frames: int | None = None, seed: int = 0) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    shape = (batch, cfg.channels, frames or cfg.window, cfg.frame_height, cfg.frame_width)
    return torch.rand(shape, generator=g)


@pytest.fixture
def model(tiny_model_config, seeded):
    return VRNN(tiny_model_config())


class TestShapes:
    @pytest.mark.parametrize("window", [2, 4, 8])
    @pytest.mark.parametrize("size", [32, 64])
    @pytest.mark.parametrize("full_horizon", [False, True])
    def test_step_shapes(self, tiny_model_config, window, size, full_horizon):
        horizon = window if full_horizon else window // 2
        cfg = tiny_model_config(window=window, horizon=horizon, frame_height=size, frame_width=size)
        net = VRNN(cfg).eval()
        x = clip(2, cfg)
        encoded = net.encode(x)
        assert tuple(encoded.shape) == (2, 8, window // 2, size // 4, size // 4)

        state = net.init_state(2, x)
        z_prev = x.new_zeros(net.grid_shape(2, cfg.latent_channels))
        state, pred, prior, posterior, z = net._step(x, state, z_prev, None, target=x)
        assert tuple(pred.shape) == tuple(x.shape)
        assert tuple(prior.mu.shape) == net.grid_shape(2, cfg.latent_channels)
        assert posterior.mu.shape == prior.mu.shape
        assert z.shape == prior.mu.shape

    @pytest.mark.parametrize("window,horizon", [(2, 1), (2, 2), (4, 2), (4, 4), (8, 4)])
    @pytest.mark.parametrize("size", [32, 64])
    def test_sequence_shapes(self, tiny_model_config, seeded, window, horizon, size):
        cfg = tiny_model_config(window=window, horizon=horizon, frame_height=size, frame_width=size)
        net = VRNN(cfg)
        n_frames = 2 * window + 2 * horizon
        sequence = clip(2, cfg, frames=n_frames)

        result = net.forward_train(sequence, teacher_forcing_prob=0.0)
        n_steps = (n_frames - window) // horizon
        assert len(result.predictions) == len(result.targets) == len(result.priors) == n_steps
        for k, (pred, target) in enumerate(zip(result.predictions, result.targets)):
            assert pred.shape == target.shape == (2, 1, window, size, size)
            end = window - 1 + k * horizon + horizon
            assert torch.equal(target, sequence[:, :, end - window + 1 : end + 1])
        # the second window keeps its older frames and takes the newest from the first prediction
        keep = window - horizon
        assert torch.equal(result.inputs[1][:, :, :keep], sequence[:, :, horizon:window])
        assert torch.equal(result.inputs[1][:, :, keep:], result.predictions[0][:, :, keep:])

        context = clip(2, cfg, frames=max(window, 10), seed=1)
        rolled = net.rollout(context, 7, seed=[0, 1])
        assert tuple(rolled.shape) == (2, 1, 7, size, size)
        assert rolled.min() >= 0 and rolled.max() <= 1
        warmup, generate = net.generation_ends(context.shape[2], 7)
        assert generate[0] == context.shape[2] - 1 and len(generate) == -(-7 // horizon)
        assert all(t - window + 1 >= 0 for t in warmup)

    def test_full_width_grid(self, tiny_model_config):
        cfg = tiny_model_config(
            window=4, frame_height=64, frame_width=64, stem_channels=64, block_channels=(64, 128)
        )
        net = VRNN(cfg).eval()
        assert tuple(net.encode(clip(1, cfg)).shape) == (1, 128, 2, 16, 16)

    def test_2d_grid_has_one_timestep(self, tiny_model_config):
        cfg = tiny_model_config(conv_dims=2, window=1, horizon=1)
        net = VRNN(cfg).eval()
        assert tuple(net.encode(clip(3, cfg)).shape) == (3, 8, 1, 4, 4)

    def test_wrong_window(self, model):
        with pytest.raises(ContractError):
            model.encode(clip(1, model.cfg, frames=3))

    def test_invalid_configs(self, tiny_model_config):
        for overrides in (
            dict(window=3),
            dict(horizon=3),
            dict(horizon=0),
            dict(frame_height=18),
            dict(conv_dims=2),
        ):
            with pytest.raises(ContractError):
                VRNN(tiny_model_config(**overrides))


class TestComponents:
    def test_zero_clip_is_finite(self, model):
        model.eval()
        pred = model.rollout(torch.zeros(2, 1, 4, 16, 16), 4, seed=0)
        assert torch.isfinite(pred).all()

    def test_prior_of_zero_state_is_standard(self, model):
        state = model.init_state(2, torch.zeros(1))
        prior = model.prior_params(state)
        assert torch.equal(prior.mu, torch.zeros_like(prior.mu))
        assert torch.equal(prior.log_sigma, torch.zeros_like(prior.log_sigma))

    def test_log_sigma_is_clamped(self, model):
        with torch.no_grad():
            model.prior.log_sigma.bias.fill_(100.0)
        prior = model.prior_params(model.init_state(1, torch.zeros(1)))
        assert torch.all(prior.log_sigma == 7.0)

    def test_posterior_shape_mismatch(self, model):
        state = model.init_state(2, torch.zeros(1))
        with pytest.raises(ContractError):
            model.posterior_params(state, torch.zeros(2, 8, 1, 3, 3))

    def test_state_layer_mismatch(self, model):
        state = model.init_state(2, torch.zeros(1))
        with pytest.raises(ContractError):
            model.prior_params(state._replace(layers=state.layers[:1]))

    def test_decode_needs_latent(self, model):
        hidden = torch.zeros(model.grid_shape(1, model.cfg.lstm_hidden))
        with pytest.raises(ContractError):
            model.decode(hidden)

    def test_decode_shape_range_and_determinism(self, model):
        model.eval()
        g = torch.Generator().manual_seed(1)
        hidden = torch.randn(model.grid_shape(2, model.cfg.lstm_hidden), generator=g)
        z = LatentSample(torch.randn(model.grid_shape(2, model.cfg.latent_channels), generator=g), "prior")
        first = model.decode(hidden, z)
        assert tuple(first.shape) == (2, 1, 2, 16, 16)
        assert first.min() > 0 and first.max() < 1
        assert torch.equal(first, model.decode(hidden, z))


class TestSampleLatent:
    def test_zero_noise_is_the_mean(self):
        field = GaussianField(torch.full((2, 3), 1.5), torch.zeros(2, 3))
        sample = sample_latent(field, torch.zeros(2, 3))
        assert torch.equal(sample.z, field.mu)
        assert sample.source == "prior"

    def test_scales_noise_by_sigma(self):
        field = GaussianField(torch.zeros(4), torch.full((4,), 0.5).log())
        sample = sample_latent(field, torch.ones(4), source="posterior")
        torch.testing.assert_close(sample.z, torch.full((4,), 0.5))
        assert sample.source == "posterior"

    def test_shape_mismatch(self):
        field = GaussianField(torch.zeros(4), torch.zeros(4))
        with pytest.raises(ContractError):
            sample_latent(field, torch.zeros(5))


class TestConvLSTMCell:
    def test_zero_weights_keep_zero_state(self):
        cell = ConvLSTMCell(3, 5, (3, 3, 3))
        with torch.no_grad():
            cell.gates.weight.zero_()
            cell.gates.bias.zero_()
        zeros = torch.zeros(2, 5, 1, 4, 4)
        hidden, cell_state = cell(torch.randn(2, 3, 1, 4, 4), (zeros, zeros))
        assert torch.equal(hidden, zeros) and torch.equal(cell_state, zeros)

    def test_gate_ranges(self, seeded):
        cell = ConvLSTMCell(3, 5, (1, 3, 3))
        gates = cell.gate_activations(torch.randn(2, 3, 1, 4, 4) * 5, torch.randn(2, 5, 1, 4, 4) * 5)
        for gate in gates[:3]:
            assert gate.min() >= 0 and gate.max() <= 1
        assert gates[3].min() >= -1 and gates[3].max() <= 1

    def test_forget_bias_starts_at_one(self):
        cell = ConvLSTMCell(3, 5, (3, 3, 3))
        assert torch.equal(cell.gates.bias[5:10], torch.ones(5))
        assert torch.equal(cell.gates.bias[:5], torch.zeros(5))


class TestForwardTrain:
    def test_step_count(self, model):
        sequence = clip(2, model.cfg, frames=20)
        result = model.forward_train(sequence)
        assert model.n_train_steps(20) == 9
        assert len(result.predictions) == len(result.priors) == len(result.posteriors) == 9

    def test_windows_cover_the_horizon(self, tiny_model_config):
        net = VRNN(tiny_model_config(window=4, horizon=2))
        sequence = clip(1, net.cfg, frames=12)
        result = net.forward_train(sequence)
        assert len(result.targets) == 4
        # window ending at t=3 decodes frames [2, 5]
        assert torch.equal(result.targets[0], sequence[:, :, 2:6])
        assert torch.equal(result.targets[1], sequence[:, :, 4:8])

    def test_full_teacher_forcing_feeds_ground_truth(self, model):
        sequence = clip(2, model.cfg, frames=8)
        result = model.forward_train(sequence, teacher_forcing_prob=1.0)
        for k, inputs in enumerate(result.inputs):
            assert torch.equal(inputs, sequence[:, :, 2 * k : 2 * k + 2])

    def test_no_teacher_forcing_feeds_predictions(self, model):
        sequence = clip(2, model.cfg, frames=8)
        result = model.forward_train(sequence, teacher_forcing_prob=0.0)
        assert torch.equal(result.inputs[0], sequence[:, :, 0:2])
        for k in range(1, len(result.inputs)):
            assert torch.equal(result.inputs[k], result.predictions[k - 1])

    def test_partial_teacher_forcing_is_seeded(self, model):
        sequence = clip(2, model.cfg, frames=8)
        model.eval()
        a = model.forward_train(sequence, 0.5, make_generators(4))
        b = model.forward_train(sequence, 0.5, make_generators(4))
        for x, y in zip(a.inputs, b.inputs):
            assert torch.equal(x, y)

    def test_too_short(self, model):
        with pytest.raises(ContractError):
            model.forward_train(clip(1, model.cfg, frames=3))

    def test_deterministic_variant_has_no_fields(self, tiny_model_config):
        net = VRNN(tiny_model_config(conv_dims=2, window=1, horizon=1, latent=False))
        result = net.forward_train(clip(1, net.cfg, frames=6))
        assert len(result.predictions) == 5
        assert result.priors == [] and result.posteriors == []

    def test_prior_training_source(self, tiny_model_config):
        net = VRNN(tiny_model_config(train_latent_source="prior"))
        result = net.forward_train(clip(1, net.cfg, frames=6))
        assert len(result.posteriors) == 2

    def test_gradients_match_finite_differences(self, tiny_model_config):
        torch.manual_seed(0)
        net = VRNN(tiny_model_config(lstm_layers=1)).double()
        sequence = clip(2, net.cfg, frames=6).double()

        def loss() -> torch.Tensor:
            result = net.forward_train(sequence, generator=make_generators(5))
            return total_loss(
                torch.cat(result.predictions, dim=2),
                torch.cat(result.targets, dim=2),
                result.priors,
                result.posteriors,
                beta=0.5,
            ).total

        params = [p for p in net.parameters() if p.requires_grad]
        grads = torch.autograd.grad(loss(), params)
        g = torch.Generator().manual_seed(1)
        eps = 1e-6
        for _ in range(50):
            i = int(torch.randint(len(params), (1,), generator=g))
            j = int(torch.randint(params[i].numel(), (1,), generator=g))
            flat = params[i].data.view(-1)
            original = float(flat[j])
            with torch.no_grad():
                flat[j] = original + eps
                upper = float(loss())
                flat[j] = original - eps
                lower = float(loss())
                flat[j] = original
            numeric = (upper - lower) / (2 * eps)
            analytic = float(grads[i].view(-1)[j])
            assert abs(numeric - analytic) <= 1e-6 + 1e-2 * abs(analytic)


class TestRollout:
    def test_empty_future(self, model):
        context = clip(2, model.cfg, frames=4)
        assert tuple(model.rollout(context, 0).shape) == (2, 1, 0, 16, 16)

    def test_short_context(self, model):
        with pytest.raises(ContractError):
            model.rollout(clip(1, model.cfg, frames=1), 4)

    def test_output_shape_and_range(self, model):
        pred = model.rollout(clip(2, model.cfg, frames=4), 5)
        assert tuple(pred.shape) == (2, 1, 5, 16, 16)
        assert pred.min() >= 0 and pred.max() <= 1

    def test_same_seed_is_identical(self, model):
        context = clip(2, model.cfg, frames=4)
        assert torch.equal(model.rollout(context, 4, seed=3), model.rollout(context, 4, seed=3))

    def test_different_seeds_differ(self, model):
        context = clip(1, model.cfg, frames=4)
        assert not torch.equal(model.rollout(context, 4, seed=1), model.rollout(context, 4, seed=2))

    def test_generation_steps(self, tiny_model_config):
        net = VRNN(tiny_model_config(window=4, horizon=2))
        warmup, generate = net.generation_ends(10, 10)
        assert generate == [9, 11, 13, 15, 17]
        assert warmup == [3, 5, 7]
        assert net.generation_ends(10, 9)[1] == [9, 11, 13, 15, 17]

    def test_context_not_mutated(self, model):
        context = clip(2, model.cfg, frames=4)
        before = context.clone()
        model.rollout(context, 4)
        assert torch.equal(context, before)

    def test_training_mode_restored(self, model):
        model.train()
        model.rollout(clip(1, model.cfg, frames=4), 2)
        assert model.training
        model.eval()
        model.rollout(clip(1, model.cfg, frames=4), 2)
        assert not model.training

    def test_global_rng_untouched(self, model):
        torch.manual_seed(11)
        expected = torch.rand(3)
        torch.manual_seed(11)
        model.rollout(clip(1, model.cfg, frames=4), 4, seed=0)
        assert torch.equal(torch.rand(3), expected)

    def test_per_row_seeds_match_single_runs(self, model):
        context = clip(1, model.cfg, frames=4)
        batched = model.rollout(context.expand(3, -1, -1, -1, -1), 4, seed=[5, 6, 7])
        for row, seed in enumerate([5, 6, 7]):
            single = model.rollout(context, 4, seed=seed)
            torch.testing.assert_close(batched[row : row + 1], single, rtol=0, atol=1e-5)

    def test_rows_are_independent(self, model):
        context = clip(2, model.cfg, frames=4)
        pair = model.rollout(context, 4, seed=[1, 2])
        altered = context.clone()
        altered[1] = 0.0
        torch.testing.assert_close(
            model.rollout(altered, 4, seed=[1, 2])[0], pair[0], rtol=0, atol=1e-5
        )

    def test_deterministic_variant_ignores_seed(self, tiny_model_config):
        net = VRNN(tiny_model_config(conv_dims=2, window=1, horizon=1, latent=False))
        context = clip(1, net.cfg, frames=4)
        assert torch.equal(net.rollout(context, 3, seed=1), net.rollout(context, 3, seed=99))


def test_parameter_count_grows_with_latents(tiny_model_config):
    assert parameter_count(VRNN(tiny_model_config())) > parameter_count(
        VRNN(tiny_model_config(latent=False))
    )


def test_mean_prior_sigma():
    fields = [
        GaussianField(torch.zeros(4), torch.zeros(4)),
        GaussianField(torch.zeros(4), torch.full((4,), 2.0).log()),
    ]
    assert mean_prior_sigma(fields) == pytest.approx(1.5)
    assert mean_prior_sigma([]) == 0.0
