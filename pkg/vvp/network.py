"""3D-convolutional variational recurrent network.

Tensors are channels-first, [B, C, T, H, W]. A clip of M frames is encoded to
[B, C_enc, M/2, H/4, W/4]; the recurrent state, latent fields and samples share
that grid. The 2D ablations reuse the same modules with a temporal kernel of 1,
no temporal stride and single-frame windows.
"""

import torch
import torch.nn as nn
from config import ModelConfig, validate_model_config
from errors import ContractError
from latent_loss import make_field
from models import GaussianField, LatentSample, RecurrentState, TrainForward


def _kernel(cfg: ModelConfig, size: int | None = None) -> tuple[int, int, int]:
    size = size or cfg.kernel_size
    return (size if cfg.conv_dims == 3 else 1, size, size)


def _same_padding(kernel: tuple[int, int, int]) -> tuple[int, int, int]:
    return tuple(k // 2 for k in kernel)


def _draw(
    sampler,
    shape: tuple[int, ...],
    like: torch.Tensor,
    generator: torch.Generator | list[torch.Generator] | None,
) -> torch.Tensor:
    """torch.randn or torch.rand on like's device; a list holds one generator per batch row."""
    if generator is None:
        return sampler(shape, device=like.device, dtype=like.dtype)
    if isinstance(generator, list):
        if len(generator) != shape[0]:
            raise ContractError(f"{len(generator)} generators for batch of {shape[0]}")
        rows = [_draw(sampler, (1, *shape[1:]), like, g) for g in generator]
        return torch.cat(rows, dim=0)
    values = sampler(shape, generator=generator, device=generator.device, dtype=like.dtype)
    return values.to(like.device)


def make_generators(
    seed: int | list[int], device: torch.device | str = "cpu"
) -> torch.Generator | list[torch.Generator]:
    """One generator for a seed, or one per batch row for a list of seeds."""
    if isinstance(seed, (list, tuple)):
        return [torch.Generator(device=device).manual_seed(int(s)) for s in seed]
    return torch.Generator(device=device).manual_seed(int(seed))


def sample_latent(
    field: GaussianField, noise: torch.Tensor, source: str = "prior"
) -> LatentSample:
    """Reparameterized sample z = mu + sigma * noise."""
    if noise.shape != field.mu.shape:
        raise ContractError(
            f"noise {tuple(noise.shape)} does not match field {tuple(field.mu.shape)}"
        )
    return LatentSample(z=field.mu + field.log_sigma.exp() * noise, source=source)


class ResBlock(nn.Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: tuple[int, int, int],
        stride: tuple[int, int, int] = (1, 1, 1),
    ) -> None:
        super().__init__()
        padding = _same_padding(kernel)
        self.conv1 = nn.Conv3d(
            in_channels, out_channels, kernel, stride=stride, padding=padding, bias=False
        )
        self.bn1 = nn.BatchNorm3d(out_channels)
        self.conv2 = nn.Conv3d(out_channels, out_channels, kernel, padding=padding, bias=False)
        self.bn2 = nn.BatchNorm3d(out_channels)
        self.relu = nn.ReLU()
        if in_channels != out_channels or stride != (1, 1, 1):
            self.down_sample = nn.Sequential(
                nn.Conv3d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm3d(out_channels),
            )
        else:
            self.down_sample = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        branch = self.relu(self.bn1(self.conv1(x)))
        branch = self.bn2(self.conv2(branch))
        if self.down_sample is not None:
            x = self.down_sample(x)
        return self.relu(branch + x)


class Encoder(nn.Module):
    """Stem plus two residual stages: spatial /4, temporal /2 (3D only)."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        kernel = _kernel(cfg)
        t_stride = 2 if cfg.conv_dims == 3 else 1
        width1, width2 = cfg.block_channels
        self.stem = nn.Sequential(
            nn.Conv3d(
                cfg.channels,
                cfg.stem_channels,
                kernel,
                stride=(1, 2, 2),
                padding=_same_padding(kernel),
                bias=False,
            ),
            nn.BatchNorm3d(cfg.stem_channels),
            nn.ReLU(),
        )
        self.layer1 = nn.Sequential(
            ResBlock(cfg.stem_channels, width1, kernel),
            ResBlock(width1, width1, kernel),
        )
        self.layer2 = nn.Sequential(
            ResBlock(width1, width2, kernel, stride=(t_stride, 2, 2)),
            ResBlock(width2, width2, kernel),
        )
        self.out_channels = width2

    def forward(self, clip: torch.Tensor) -> torch.Tensor:
        return self.layer2(self.layer1(self.stem(clip)))


class Decoder(nn.Module):
    """Mirror of the encoder with stride-2 up-convolutions and a sigmoid output."""

    def __init__(self, cfg: ModelConfig, in_channels: int) -> None:
        super().__init__()
        kernel = _kernel(cfg)
        width1, width2 = cfg.block_channels
        if cfg.conv_dims == 3:
            up_kernel, up_stride, up_padding = (4, 4, 4), (2, 2, 2), (1, 1, 1)
        else:
            up_kernel, up_stride, up_padding = (1, 4, 4), (1, 2, 2), (0, 1, 1)

        self.layer2 = ResBlock(in_channels, width2, kernel)
        self.up2 = nn.Sequential(
            nn.ConvTranspose3d(
                width2, width1, up_kernel, stride=up_stride, padding=up_padding, bias=False
            ),
            nn.BatchNorm3d(width1),
            nn.ReLU(),
        )
        self.layer1 = ResBlock(width1, width1, kernel)
        self.up1 = nn.Sequential(
            nn.ConvTranspose3d(
                width1, cfg.stem_channels, (1, 4, 4), stride=(1, 2, 2), padding=(0, 1, 1), bias=False
            ),
            nn.BatchNorm3d(cfg.stem_channels),
            nn.ReLU(),
        )
        self.out = nn.Conv3d(
            cfg.stem_channels, cfg.channels, kernel, padding=_same_padding(kernel)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.up2(self.layer2(x))
        x = self.up1(self.layer1(x))
        return torch.sigmoid(self.out(x))


class ConvLSTMCell(nn.Module):
    """LSTM cell whose four gates are one convolution over [input, hidden]."""

    def __init__(
        self, input_channels: int, hidden_channels: int, kernel: tuple[int, int, int]
    ) -> None:
        super().__init__()
        self.hidden_channels = hidden_channels
        self.gates = nn.Conv3d(
            input_channels + hidden_channels,
            4 * hidden_channels,
            kernel,
            padding=_same_padding(kernel),
        )
        with torch.no_grad():
            self.gates.bias.zero_()
            # forget gate starts open
            self.gates.bias[hidden_channels : 2 * hidden_channels].fill_(1.0)

    def gate_activations(
        self, x: torch.Tensor, hidden: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """Input, forget, output and cell-candidate activations."""
        in_gate, forget_gate, out_gate, cell_gate = self.gates(
            torch.cat((x, hidden), dim=1)
        ).chunk(4, dim=1)
        return (
            torch.sigmoid(in_gate),
            torch.sigmoid(forget_gate),
            torch.sigmoid(out_gate),
            torch.tanh(cell_gate),
        )

    def forward(
        self, x: torch.Tensor, state: tuple[torch.Tensor, torch.Tensor]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        hidden, cell = state
        in_gate, forget_gate, out_gate, cell_gate = self.gate_activations(x, hidden)
        cell = forget_gate * cell + in_gate * cell_gate
        hidden = out_gate * torch.tanh(cell)
        return hidden, cell


class GaussianHead(nn.Module):
    """Two shared bias-free convolutions and 1x1x1 heads for mu and log-sigma."""

    def __init__(self, cfg: ModelConfig, in_channels: int) -> None:
        super().__init__()
        kernel = _kernel(cfg)
        padding = _same_padding(kernel)
        self.shared = nn.Sequential(
            nn.Conv3d(in_channels, cfg.head_channels, kernel, padding=padding, bias=False),
            nn.ReLU(),
            nn.Conv3d(cfg.head_channels, cfg.head_channels, kernel, padding=padding, bias=False),
            nn.ReLU(),
        )
        self.mu = nn.Conv3d(cfg.head_channels, cfg.latent_channels, 1)
        self.log_sigma = nn.Conv3d(cfg.head_channels, cfg.latent_channels, 1)
        nn.init.zeros_(self.mu.bias)
        nn.init.zeros_(self.log_sigma.bias)
        self.log_sigma_range = (cfg.log_sigma_min, cfg.log_sigma_max)

    def forward(self, x: torch.Tensor) -> GaussianField:
        features = self.shared(x)
        return make_field(
            self.mu(features), self.log_sigma(features), *self.log_sigma_range
        )


class VRNN(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = validate_model_config(cfg)
        kernel = _kernel(cfg)
        latent_channels = cfg.latent_channels if cfg.latent else 0

        self.encoder = Encoder(cfg)
        enc_channels = self.encoder.out_channels
        cells = []
        for layer in range(cfg.lstm_layers):
            input_channels = enc_channels + latent_channels if layer == 0 else cfg.lstm_hidden
            cells.append(ConvLSTMCell(input_channels, cfg.lstm_hidden, kernel))
        self.cells = nn.ModuleList(cells)
        self.decoder = Decoder(cfg, cfg.lstm_hidden + latent_channels)

        if cfg.latent:
            self.prior = GaussianHead(cfg, cfg.lstm_hidden)
            self.posterior_encoder = Encoder(cfg)
            self.posterior = GaussianHead(cfg, cfg.lstm_hidden + enc_channels)

    ###
    # SHAPES
    ###

    def grid_shape(self, batch: int, channels: int) -> tuple[int, ...]:
        cfg = self.cfg
        depth = cfg.window // 2 if cfg.conv_dims == 3 else 1
        return (batch, channels, depth, cfg.frame_height // 4, cfg.frame_width // 4)

    def init_state(self, batch: int, like: torch.Tensor) -> RecurrentState:
        shape = self.grid_shape(batch, self.cfg.lstm_hidden)
        return RecurrentState(
            layers=tuple(
                (like.new_zeros(shape), like.new_zeros(shape)) for _ in self.cells
            )
        )

    def _check_clip(self, clip: torch.Tensor) -> None:
        cfg = self.cfg
        expected = (cfg.channels, cfg.window, cfg.frame_height, cfg.frame_width)
        if clip.dim() != 5 or tuple(clip.shape[1:]) != expected:
            raise ContractError(
                f"clip {tuple(clip.shape)} does not match [B, {', '.join(map(str, expected))}]"
            )

    def _check_state(self, state: RecurrentState) -> None:
        if len(state.layers) != len(self.cells):
            raise ContractError(
                f"state has {len(state.layers)} layers, model has {len(self.cells)}"
            )

    ###
    # COMPONENTS
    ###

    def encode(self, clip: torch.Tensor) -> torch.Tensor:
        self._check_clip(clip)
        return self.encoder(clip)

    def encode_target(self, clip: torch.Tensor) -> torch.Tensor:
        self._check_clip(clip)
        return self.posterior_encoder(clip)

    def prior_params(self, state: RecurrentState) -> GaussianField:
        self._check_state(state)
        return self.prior(state.layers[-1][0])

    def posterior_params(
        self, state: RecurrentState, encoded_target: torch.Tensor
    ) -> GaussianField:
        self._check_state(state)
        hidden = state.layers[-1][0]
        if encoded_target.shape[0] != hidden.shape[0] or encoded_target.shape[2:] != hidden.shape[2:]:
            raise ContractError(
                f"encoded target {tuple(encoded_target.shape)} does not match "
                f"state {tuple(hidden.shape)}"
            )
        return self.posterior(torch.cat((hidden, encoded_target), dim=1))

    def convlstm_step(self, x: torch.Tensor, state: RecurrentState) -> RecurrentState:
        self._check_state(state)
        hidden = state.layers[0][0]
        if x.shape[0] != hidden.shape[0] or x.shape[2:] != hidden.shape[2:]:
            raise ContractError(
                f"LSTM input {tuple(x.shape)} does not match state {tuple(hidden.shape)}"
            )
        layers = []
        for cell, layer_state in zip(self.cells, state.layers):
            hidden, cell_state = cell(x, layer_state)
            layers.append((hidden, cell_state))
            x = hidden
        return RecurrentState(layers=tuple(layers))

    def decode(self, hidden: torch.Tensor, z: LatentSample | None = None) -> torch.Tensor:
        if self.cfg.latent:
            if z is None:
                raise ContractError("decode needs a latent sample")
            if z.z.shape[0] != hidden.shape[0] or z.z.shape[2:] != hidden.shape[2:]:
                raise ContractError(
                    f"latent {tuple(z.z.shape)} does not match state {tuple(hidden.shape)}"
                )
            hidden = torch.cat((hidden, z.z), dim=1)
        return self.decoder(hidden)

    def _step(
        self,
        window: torch.Tensor,
        state: RecurrentState,
        z_prev: torch.Tensor | None,
        generator,
        target: torch.Tensor | None = None,
    ) -> tuple[RecurrentState, torch.Tensor, GaussianField | None, GaussianField | None, torch.Tensor | None]:
        encoded = self.encode(window)
        lstm_input = torch.cat((encoded, z_prev), dim=1) if self.cfg.latent else encoded
        state = self.convlstm_step(lstm_input, state)
        hidden = state.layers[-1][0]
        if not self.cfg.latent:
            return state, self.decode(hidden), None, None, None

        prior = self.prior_params(state)
        posterior = None
        source, field = "prior", prior
        if target is not None:
            posterior = self.posterior_params(state, self.encode_target(target))
            if self.cfg.train_latent_source == "posterior":
                source, field = "posterior", posterior
        sample = sample_latent(
            field, _draw(torch.randn, field.mu.shape, field.mu, generator), source
        )
        return state, self.decode(hidden, sample), prior, posterior, sample.z

    ###
    # SEQUENCES
    ###

    def n_train_steps(self, n_frames: int) -> int:
        return (n_frames - self.cfg.window) // self.cfg.horizon

    def forward_train(
        self,
        sequence: torch.Tensor,
        teacher_forcing_prob: float = 1.0,
        generator: torch.Generator | list[torch.Generator] | None = None,
    ) -> TrainForward:
        """Slide the window over a [B, C, T, H, W] batch, decoding 𝓗 frames ahead.

        After each step the next 𝓗 input frames are the ground truth with
        probability teacher_forcing_prob (one draw per window and batch row),
        else the model's own predictions.
        """
        cfg = self.cfg
        window, horizon = cfg.window, cfg.horizon
        batch, _, n_frames = sequence.shape[:3]
        if n_frames < 2 * window:
            raise ContractError(f"Sequence of {n_frames} frames is shorter than 2M={2 * window}")

        state = self.init_state(batch, sequence)
        z_prev = sequence.new_zeros(self.grid_shape(batch, cfg.latent_channels))
        timeline = list(sequence.unbind(dim=2))
        result = TrainForward([], [], [], [], [])

        for k in range(self.n_train_steps(n_frames)):
            t = window - 1 + k * horizon
            inputs = torch.stack(timeline[t - window + 1 : t + 1], dim=2)
            target = sequence[:, :, t + horizon - window + 1 : t + horizon + 1]
            state, pred, prior, posterior, z_prev = self._step(
                inputs, state, z_prev, generator, target
            )
            result.inputs.append(inputs)
            result.predictions.append(pred)
            result.targets.append(target)
            if prior is not None:
                result.priors.append(prior)
                result.posteriors.append(posterior)

            if teacher_forcing_prob >= 1.0:
                continue
            if teacher_forcing_prob <= 0.0:
                keep_truth = None
            else:
                draw = _draw(torch.rand, (batch,), sequence, generator)
                keep_truth = (draw < teacher_forcing_prob).view(batch, 1, 1, 1)
            for j in range(horizon):
                index = t + 1 + j
                if index >= n_frames:
                    break
                predicted = pred[:, :, window - horizon + j]
                if keep_truth is None:
                    timeline[index] = predicted
                else:
                    timeline[index] = torch.where(keep_truth, sequence[:, :, index], predicted)
        return result

    def generation_ends(self, context_len: int, n_future: int) -> tuple[list[int], list[int]]:
        """Window end indices for warm-up steps and for generating steps."""
        window, horizon = self.cfg.window, self.cfg.horizon
        last = context_len - 1
        first = last - ((last - (window - 1)) // horizon) * horizon
        warmup = list(range(first, last, horizon))
        n_generate = -(-n_future // horizon)
        generate = [last + k * horizon for k in range(n_generate)]
        return warmup, generate

    @torch.no_grad()
    def rollout(
        self,
        context: torch.Tensor,
        n_future: int,
        seed: int | list[int] = 0,
    ) -> torch.Tensor:
        """Predict n_future frames after a [B, C, C_len, H, W] context from prior samples.

        seed may be one int for the batch or one per batch row.
        """
        cfg = self.cfg
        batch, channels, context_len, height, width = context.shape
        if context_len < cfg.window:
            raise ContractError(f"Context of {context_len} frames is shorter than M={cfg.window}")
        if n_future <= 0:
            return context.new_zeros((batch, channels, 0, height, width))

        was_training = self.training
        self.eval()
        try:
            generator = make_generators(seed, context.device)
            warmup, generate = self.generation_ends(context_len, n_future)
            state = self.init_state(batch, context)
            z_prev = context.new_zeros(self.grid_shape(batch, cfg.latent_channels))
            timeline = list(context.unbind(dim=2))
            outputs: list[torch.Tensor] = []

            for t in warmup + generate:
                inputs = torch.stack(timeline[t - cfg.window + 1 : t + 1], dim=2)
                state, pred, _, _, z_prev = self._step(inputs, state, z_prev, generator)
                if t < context_len - 1:
                    continue
                new_frames = list(pred[:, :, cfg.window - cfg.horizon :].unbind(dim=2))
                timeline.extend(new_frames)
                outputs.extend(new_frames)
        finally:
            self.train(was_training)
        return torch.stack(outputs[:n_future], dim=2)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def mean_prior_sigma(priors: list[GaussianField]) -> float:
    if not priors:
        return 0.0
    return float(torch.stack([field.sigma.mean() for field in priors]).mean())
