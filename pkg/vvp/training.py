import os
import random

import numpy as np
import torch
from checkpoint import load_checkpoint, save_checkpoint
from config import (
    TrainConfig,
    is_deterministic,
    save_train_config,
    set_reproducible_mode,
    validate_train_config,
)
from datasets import tensor_to_frames
from errors import ContractError, NumericError
from evaluation import copy_last_frame_baseline, derived_seed, frame_report, mse_framewise
from filesystem import Filesystem
from latent_loss import first_non_finite, total_loss
from models import LossBreakdown, TrainSummary
from network import VRNN, mean_prior_sigma
from torch.utils.data import DataLoader, Dataset
from variants import ll_weight_for

METRICS_FILE = "metrics.jsonl"
VALIDATION_FILE = "validation.jsonl"
BEST_CHECKPOINT = "best.pt"
CONFIG_FILE = "train.cfg"


def beta_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear 0 -> 1 over the first warmup_fraction of the epochs, then 1."""
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    warmup_epochs = cfg.warmup_fraction * cfg.epochs
    return min(1.0, epoch / warmup_epochs)


def sampling_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Teacher-forcing probability: 1 before ss_start_epoch, 0 from ss_end_epoch."""
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    if epoch < cfg.ss_start_epoch:
        return 1.0
    if epoch >= cfg.ss_end_epoch:
        return 0.0
    span = cfg.ss_end_epoch - cfg.ss_start_epoch
    return 1.0 - (epoch - cfg.ss_start_epoch) / span


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def epoch_generator(seed: int, epoch: int) -> torch.Generator:
    """Shuffle order for one epoch, a function of (seed, epoch) only."""
    state = np.random.SeedSequence([seed, epoch]).generate_state(1)[0]
    return torch.Generator().manual_seed(int(state))


def compute_loss(forward, cfg: TrainConfig, beta: float) -> LossBreakdown:
    predictions = torch.cat(forward.predictions, dim=2)
    targets = torch.cat(forward.targets, dim=2)
    return total_loss(
        predictions,
        targets,
        forward.priors,
        forward.posteriors,
        lambda_rec=cfg.lambda_rec,
        lambda_latent=cfg.lambda_latent,
        beta=beta,
        ll_weight=ll_weight_for(cfg.variant),
    )


class Trainer:
    def __init__(
        self,
        model: VRNN,
        cfg: TrainConfig,
        out_dir: str | None = None,
        device: torch.device | str = "cpu",
    ) -> None:
        self.cfg = validate_train_config(cfg)
        self.device = torch.device(device)
        self.model = model.to(self.device)
        self.filesystem = Filesystem()
        self.out_dir = self.filesystem.ensure_dir(out_dir or cfg.out_dir)
        self.deterministic = is_deterministic()

        seed_everything(cfg.seed)
        set_reproducible_mode(self.deterministic)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.lr)
        self.generator = torch.Generator(device=self.device).manual_seed(cfg.seed)

        self.start_epoch = 0
        self.global_step = 0
        self.best_val_mse: float | None = None

    ###
    # CHECKPOINTS
    ###

    def save(self, path: str) -> str:
        return save_checkpoint(
            path,
            self.model,
            self.cfg,
            self.start_epoch,
            optimizer=self.optimizer,
            best_val_mse=self.best_val_mse,
            extra={
                "global_step": self.global_step,
                "generator_state": self.generator.get_state(),
            },
        )

    def resume(self, path: str) -> None:
        payload = load_checkpoint(
            path, self.model, self.optimizer, restore_rng=True, map_location=self.device
        )
        self.start_epoch = int(payload["epoch"])
        self.best_val_mse = payload["best_val_mse"]
        extra = payload.get("extra", {})
        self.global_step = int(extra.get("global_step", 0))
        if "generator_state" in extra:
            self.generator.set_state(extra["generator_state"].cpu())
        print(f"Resumed from {path} at epoch {self.start_epoch}")

    ###
    # LOOP
    ###

    def _loader(self, dataset: Dataset, epoch: int) -> DataLoader:
        return DataLoader(
            dataset,
            batch_size=self.cfg.batch_size,
            shuffle=True,
            generator=epoch_generator(self.cfg.seed, epoch),
            num_workers=0 if self.deterministic else self.cfg.num_workers,
        )

    def train_step(self, batch: torch.Tensor, beta: float, tf_prob: float) -> LossBreakdown:
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        forward = self.model.forward_train(batch, tf_prob, self.generator)
        breakdown = compute_loss(forward, self.cfg, beta)

        bad_term = first_non_finite(breakdown)
        if bad_term:
            raise NumericError(
                bad_term,
                f"Non-finite {bad_term} at epoch {self.start_epoch} step {self.global_step}",
            )
        breakdown.total.backward()
        if self.cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.optimizer.step()
        return breakdown

    def train_epoch(self, dataset: Dataset) -> dict[str, float]:
        epoch = self.start_epoch
        beta = beta_schedule(epoch, self.cfg)
        tf_prob = sampling_schedule(epoch, self.cfg)
        metrics_path = os.path.join(self.out_dir, METRICS_FILE)

        totals: dict[str, float] = {}
        n_steps = 0
        for batch in self._loader(dataset, epoch):
            breakdown = self.train_step(batch.to(self.device), beta, tf_prob)
            record = breakdown.as_floats()
            self.filesystem.append_jsonl(
                metrics_path,
                {"epoch": epoch, "step": self.global_step, **record, "tf_prob": tf_prob},
            )
            for key, value in record.items():
                totals[key] = totals.get(key, 0.0) + value
            self.global_step += 1
            n_steps += 1
        return {key: value / max(n_steps, 1) for key, value in totals.items()}

    def validate(self, valset: Dataset) -> dict[str, float]:
        record = validate(self.model, valset, self.cfg, self.device)
        return {"epoch": self.start_epoch, **record}

    def run(self, dataset: Dataset, valset: Dataset | None = None) -> TrainSummary:
        if len(dataset) == 0:
            raise ContractError("Empty training set")
        save_train_config(self.cfg, os.path.join(self.out_dir, CONFIG_FILE))

        checkpoints = []
        history = []
        best_path = None
        while self.start_epoch < self.cfg.epochs:
            epoch = self.start_epoch
            means = self.train_epoch(dataset)
            summary = f"Epoch {epoch + 1}/{self.cfg.epochs}: total={means.get('total', 0.0):.5f}"

            improved = False
            if valset is not None and len(valset) > 0:
                record = self.validate(valset)
                history.append(record)
                self.filesystem.append_jsonl(
                    os.path.join(self.out_dir, VALIDATION_FILE), record
                )
                summary += (
                    f" val_mse={record['mse_mean']:.5f}"
                    f" baseline={record['baseline_mse_mean']:.5f}"
                )
                if self.best_val_mse is None or record["mse_mean"] < self.best_val_mse:
                    self.best_val_mse = record["mse_mean"]
                    improved = True

            self.start_epoch += 1
            path = self.save(self.filesystem.checkpoint_path(self.out_dir, self.start_epoch))
            checkpoints.append(path)
            if improved:
                best_path = self.save(os.path.join(self.out_dir, BEST_CHECKPOINT))
            print(summary)

        if best_path is None and os.path.exists(os.path.join(self.out_dir, BEST_CHECKPOINT)):
            best_path = os.path.join(self.out_dir, BEST_CHECKPOINT)
        return TrainSummary(
            epochs_completed=self.start_epoch,
            checkpoints=checkpoints,
            best_checkpoint=best_path,
            best_val_mse=self.best_val_mse,
            history=history,
        )


@torch.no_grad()
def validate(
    model: VRNN, valset: Dataset, cfg: TrainConfig, device: torch.device | str = "cpu"
) -> dict[str, float]:
    """One prior rollout per validation sequence, the copy-last-frame baseline
    and the mean prior sigma of a teacher-forced pass."""
    context_len, pred_len = cfg.context_frames, cfg.predict_frames
    loader = DataLoader(valset, batch_size=cfg.batch_size, shuffle=False)
    generator = torch.Generator(device=device).manual_seed(cfg.seed)

    reports, baseline_mse, sigmas = [], [], []
    index = 0
    was_training = model.training
    model.eval()
    try:
        for batch in loader:
            batch = batch.to(device)
            if batch.shape[2] < context_len + pred_len:
                raise ContractError(
                    f"Validation sequences have {batch.shape[2]} frames; "
                    f"{context_len + pred_len} needed"
                )
            n = batch.shape[0]
            seeds = [derived_seed(cfg.seed, index + i, 0) for i in range(n)]
            predictions = model.rollout(batch[:, :, :context_len], pred_len, seeds)
            for i in range(n):
                frames = tensor_to_frames(batch[i])
                truth = frames[context_len : context_len + pred_len]
                reports.append(frame_report(tensor_to_frames(predictions[i]), truth))
                baseline = copy_last_frame_baseline(frames[:context_len], pred_len)
                baseline_mse.append(float(np.mean(mse_framewise(baseline, truth))))
            if model.cfg.latent:
                forward = model.forward_train(batch, 1.0, generator)
                sigmas.append(mean_prior_sigma(forward.priors))
            index += n
    finally:
        model.train(was_training)

    return {
        "mse_mean": float(np.mean([r.mse_mean for r in reports])),
        "ssim_mean": float(np.mean([r.ssim_mean for r in reports])),
        "psnr_mean": float(np.mean([r.psnr_mean for r in reports])),
        "baseline_mse_mean": float(np.mean(baseline_mse)),
        "mean_prior_sigma": float(np.mean(sigmas)) if sigmas else 0.0,
    }


def train(
    model: VRNN,
    dataset: Dataset,
    cfg: TrainConfig,
    valset: Dataset | None = None,
    out_dir: str | None = None,
    resume: str | None = None,
    device: torch.device | str = "cpu",
) -> TrainSummary:
    """Train for cfg.epochs total epochs, writing logs and checkpoints to out_dir."""
    trainer = Trainer(model, cfg, out_dir=out_dir, device=device)
    if resume:
        trainer.resume(resume)
    return trainer.run(dataset, valset)
