"""Closed-form latent losses between the prior and posterior Gaussian fields.

All functions are pure and elementwise over matching fields. Fields carry
log-sigma, so every formula below is written in terms of log_sigma to stay
finite over the clamped range.
"""

import math

import torch
import torch.nn.functional as F
from errors import ContractError, NumericError
from models import GaussianField, LossBreakdown

LOG_SIGMA_MIN = -7.0
LOG_SIGMA_MAX = 7.0

# Samples drawn per chunk by the Monte-Carlo oracle, times field elements
_MC_CHUNK_ELEMENTS = 1 << 22


def make_field(
    mu: torch.Tensor,
    log_sigma: torch.Tensor,
    log_sigma_min: float = LOG_SIGMA_MIN,
    log_sigma_max: float = LOG_SIGMA_MAX,
) -> GaussianField:
    """Build a GaussianField, clamping log_sigma to [log_sigma_min, log_sigma_max]."""
    if mu.shape != log_sigma.shape:
        raise ContractError(
            f"mu {tuple(mu.shape)} and log_sigma {tuple(log_sigma.shape)} differ"
        )
    return GaussianField(mu, log_sigma.clamp(log_sigma_min, log_sigma_max))


def _check_pair(prior: GaussianField, posterior: GaussianField) -> None:
    for name, field in (("prior", prior), ("posterior", posterior)):
        if field.mu.shape != field.log_sigma.shape:
            raise ContractError(f"{name}.mu and {name}.log_sigma shapes differ")
    if prior.mu.shape != posterior.mu.shape:
        raise ContractError(
            f"prior {tuple(prior.mu.shape)} and posterior "
            f"{tuple(posterior.mu.shape)} shapes differ"
        )
    for name, field in (("prior", prior), ("posterior", posterior)):
        for part in ("mu", "log_sigma"):
            if not torch.isfinite(getattr(field, part)).all():
                raise NumericError(f"{name}.{part}")


def kl_elementwise(prior: GaussianField, posterior: GaussianField) -> torch.Tensor:
    """log σq − log σp + (σp² + (μp − μq)²) / (2σq²) − ½, per element.

    Evaluated as ½(expm1(2r) − 2r) + (μp − μq)² / (2σq²) with r = log σp − log σq,
    which is the same expression rearranged so rounding never dips below zero.
    """
    _check_pair(prior, posterior)
    r = prior.log_sigma - posterior.log_sigma
    mean_term = (prior.mu - posterior.mu).pow(2) * torch.exp(-2 * posterior.log_sigma)
    return 0.5 * (torch.expm1(2 * r) - 2 * r) + 0.5 * mean_term


def neg_ll_elementwise(prior: GaussianField, posterior: GaussianField) -> torch.Tensor:
    """log σq + ((μp − μq) / σq)², without a ½ factor or 2π constant."""
    _check_pair(prior, posterior)
    residual = (prior.mu - posterior.mu) * torch.exp(-posterior.log_sigma)
    return posterior.log_sigma + residual.pow(2)


def combined_latent_elementwise(
    prior: GaussianField, posterior: GaussianField
) -> torch.Tensor:
    """2 log σq − log σp + (σp² + 3(μp − μq)²) / (2σq²) − ½, per element."""
    _check_pair(prior, posterior)
    variance_ratio = torch.exp(2 * (prior.log_sigma - posterior.log_sigma))
    mean_term = 3 * (prior.mu - posterior.mu).pow(2) * torch.exp(-2 * posterior.log_sigma)
    return (
        2 * posterior.log_sigma
        - prior.log_sigma
        + 0.5 * (variance_ratio + mean_term)
        - 0.5
    )


def mc_kl_estimate(
    prior: GaussianField, posterior: GaussianField, n_samples: int, seed: int
) -> tuple[float, float]:
    """Monte-Carlo mean and standard error of log p(x) − log q(x), x ~ prior."""
    if n_samples < 1:
        raise ContractError(f"n_samples must be >= 1, got {n_samples}")
    _check_pair(prior, posterior)

    mu_p = prior.mu.detach().double().cpu()
    mu_q = posterior.mu.detach().double().cpu()
    ls_p = prior.log_sigma.detach().double().cpu()
    ls_q = posterior.log_sigma.detach().double().cpu()
    sigma_p = ls_p.exp()

    generator = torch.Generator().manual_seed(seed)
    chunk = max(1, _MC_CHUNK_ELEMENTS // max(1, mu_p.numel()))
    total = 0.0
    total_sq = 0.0
    drawn = 0
    while drawn < n_samples:
        n = min(chunk, n_samples - drawn)
        eps = torch.randn((n, *mu_p.shape), generator=generator, dtype=torch.float64)
        x = mu_p + sigma_p * eps
        # log N(x; μp, σp) − log N(x; μq, σq); the 2π constants cancel
        log_ratio = (
            ls_q
            - ls_p
            - 0.5 * eps.pow(2)
            + 0.5 * ((x - mu_q) * torch.exp(-ls_q)).pow(2)
        )
        per_sample = log_ratio.reshape(n, -1).mean(dim=1)
        total += float(per_sample.sum())
        total_sq += float(per_sample.pow(2).sum())
        drawn += n

    mean = total / n_samples
    variance = max(total_sq / n_samples - mean * mean, 0.0)
    return mean, math.sqrt(variance / n_samples)


def mc_kl_oracle(
    prior: GaussianField, posterior: GaussianField, n_samples: int, seed: int
) -> float:
    """Monte-Carlo estimate of E_prior[log p − log q], averaged over elements."""
    return mc_kl_estimate(prior, posterior, n_samples, seed)[0]


def reconstruction_loss(
    pred: torch.Tensor, target: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    if pred.shape != target.shape:
        raise ContractError(
            f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ"
        )
    return F.l1_loss(pred, target), F.mse_loss(pred, target)


def total_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    priors: list[GaussianField],
    posteriors: list[GaussianField],
    lambda_rec: float = 1.0,
    lambda_latent: float = 1.0,
    beta: float = 1.0,
    ll_weight: float = 1.0,
) -> LossBreakdown:
    """L = λrec (L1 + L2) + β λlatent (KL + w·(−LL)).

    Latent terms are averaged over the elements of each timestep (batch
    included) and summed over timesteps. ll_weight is 1 for the full loss and
    0 for the KL-only ablation; neg_ll is reported either way.
    """
    if len(priors) != len(posteriors):
        raise ContractError(
            f"{len(priors)} priors but {len(posteriors)} posteriors"
        )
    rec_l1, rec_l2 = reconstruction_loss(pred, target)

    kl = pred.new_zeros(())
    neg_ll = pred.new_zeros(())
    for prior, posterior in zip(priors, posteriors):
        kl = kl + kl_elementwise(prior, posterior).mean()
        neg_ll = neg_ll + neg_ll_elementwise(prior, posterior).mean()

    latent = kl + ll_weight * neg_ll
    total = lambda_rec * (rec_l1 + rec_l2) + beta * lambda_latent * latent
    return LossBreakdown(
        rec_l1=rec_l1,
        rec_l2=rec_l2,
        kl=kl,
        neg_ll=neg_ll,
        latent=latent,
        total=total,
        beta=float(beta),
        ll_weight=float(ll_weight),
    )


def first_non_finite(breakdown: LossBreakdown) -> str | None:
    """Name of the first non-finite loss term, or None."""
    for name in ("rec_l1", "rec_l2", "kl", "neg_ll", "latent", "total"):
        if not torch.isfinite(getattr(breakdown, name)).all():
            return name
    return None
