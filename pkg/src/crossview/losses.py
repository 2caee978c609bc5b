"""Weighted soft-margin triplet loss, counterfactual loss and their sum."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 10.0
    beta_ground: float = 5.0
    beta_aerial: float = 5.0
    cf_enabled: bool = True

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta_ground > 0 and self.beta_aerial > 0):
            raise ValueError("alpha and betas must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def softplus(x: torch.Tensor) -> torch.Tensor:
    """``log(1 + exp(x))`` without overflow."""
    return torch.logaddexp(torch.zeros_like(x), x)


def _l2(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.linalg.vector_norm(a - b, dim=-1)


def triplet_term(anchor: torch.Tensor, positive: torch.Tensor, negative: torch.Tensor, alpha: float) -> torch.Tensor:
    if not (anchor.shape == positive.shape == negative.shape):
        raise ValueError(
            f"dimension mismatch: {tuple(anchor.shape)}, {tuple(positive.shape)}, {tuple(negative.shape)}"
        )
    return softplus(alpha * (_l2(anchor, positive) - _l2(anchor, negative)))


def pairwise_l2(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Exact ``[N, M]`` distance matrix (no Gram-matrix shortcut, so zero distances stay exact)."""
    return _l2(x[:, None, :], y[None, :, :])


def exhaustive_triplet_loss(ground: torch.Tensor, aerial: torch.Tensor, alpha: float = 10.0) -> torch.Tensor:
    """Mean soft-margin triplet loss over every in-batch negative, in both anchor directions.

    Row ``m`` of ``ground`` and ``aerial`` is a matched pair. For each ordered
    ``(m, n)`` with ``m != n`` there is one ground-anchored term (positive
    ``aerial[m]``, negative ``aerial[n]``) and one aerial-anchored term
    (positive ``ground[m]``, negative ``ground[n]``): ``2 N (N - 1)`` terms.
    """
    if ground.ndim != 2 or ground.shape != aerial.shape:
        raise ValueError(f"expected matching [N, D] embeddings, got {tuple(ground.shape)} and {tuple(aerial.shape)}")
    n = ground.shape[0]
    if n < 2:
        raise ValueError("exhaustive triplet loss needs at least 2 pairs")
    d = pairwise_l2(ground, aerial)  # d[m, n] = |g_m - a_n|
    pos = torch.diagonal(d)
    off = ~torch.eye(n, dtype=torch.bool, device=d.device)
    g_anchor = softplus(alpha * (pos[:, None] - d))[off]
    a_anchor = softplus(alpha * (pos[:, None] - d.T))[off]
    return torch.cat([g_anchor, a_anchor]).mean()


def counterfactual_loss(f: torch.Tensor, f_hat: torch.Tensor, beta: float) -> torch.Tensor:
    """``log(1 + exp(-beta * |f - f_hat|))`` averaged over the batch."""
    if f.shape != f_hat.shape:
        raise ValueError(f"dimension mismatch: {tuple(f.shape)} vs {tuple(f_hat.shape)}")
    return softplus(-beta * _l2(f, f_hat)).mean()


def total_loss(
    f_ground: torch.Tensor,
    f_aerial: torch.Tensor,
    f_hat_ground: torch.Tensor | None,
    f_hat_aerial: torch.Tensor | None,
    cfg: LossConfig,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Triplet loss plus one counterfactual term per view; returns the scalar and a float breakdown."""
    l_triplet = exhaustive_triplet_loss(f_ground, f_aerial, cfg.alpha)
    if cfg.cf_enabled:
        if f_hat_ground is None or f_hat_aerial is None:
            raise ValueError("counterfactual embeddings are required when cf_enabled")
        l_cf_g = counterfactual_loss(f_ground, f_hat_ground, cfg.beta_ground)
        l_cf_a = counterfactual_loss(f_aerial, f_hat_aerial, cfg.beta_aerial)
        total = l_triplet + l_cf_a + l_cf_g
    else:
        l_cf_g = l_cf_a = torch.zeros((), dtype=l_triplet.dtype)
        total = l_triplet
    breakdown = {
        "L_total": float(total.detach()),
        "L_triplet": float(l_triplet.detach()),
        "L_cf_a": float(l_cf_a.detach()),
        "L_cf_g": float(l_cf_g.detach()),
    }
    return total, breakdown
