"""Generalized cross-entropy loss and its gradient-scaling identity.

For a softmax output p and target class y, the loss is (1 - p_y^q) / q with
q in (0, 1]. At q=1 this is exactly 1 - p_y; as q -> 0 it converges to the
cross-entropy -ln p_y. Its parameter gradient equals p_y^q times the
cross-entropy gradient, which is what down-weights hard (bias-conflict)
samples and makes the trained classifier lean on the easy spurious cue.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch

PROB_CLAMP = 1e-12


class LossDomainError(ValueError):
    """Probability outside the loss's domain (p_y == 0 has unbounded gradient)."""


def _check_q(q: float) -> None:
    if not 0.0 < q <= 1.0:
        raise ValueError(f"q must be in (0, 1], got {q}")


def gce_loss(probs: Sequence[float], target: int, q: float = 0.7) -> float:
    """(1 - p_y^q) / q for a single probability vector.

    Strictly decreasing in p_y, zero at p_y=1, bounded above by 1/q.
    """
    _check_q(q)
    if not 0 <= target < len(probs):
        raise ValueError(f"target {target} out of range for {len(probs)} classes")
    p_y = float(probs[target])
    if p_y <= 0.0:
        raise LossDomainError(f"p_target={p_y}; loss gradient is unbounded at 0")
    if p_y > 1.0:
        raise ValueError(f"p_target={p_y} is not a probability")
    return (1.0 - p_y**q) / q


def ce_loss(probs: Sequence[float], target: int) -> float:
    """-ln p_y for a single probability vector."""
    p_y = float(probs[target])
    if p_y <= 0.0:
        raise LossDomainError(f"p_target={p_y}; log loss undefined")
    return -math.log(p_y)


def gce_loss_from_logits(
    logits: torch.Tensor, targets: torch.Tensor, q: float = 0.7
) -> torch.Tensor:
    """Per-sample GCE losses for a (B, C) logits batch; probabilities clamped
    at 1e-12 before the power so early training cannot blow up."""
    _check_q(q)
    p = torch.softmax(logits, dim=1).clamp_min(PROB_CLAMP)
    p_y = p.gather(1, targets.view(-1, 1)).squeeze(1)
    return (1.0 - p_y.pow(q)) / q


def ce_loss_from_logits(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-sample cross-entropy losses, clamped identically to the GCE path."""
    p = torch.softmax(logits, dim=1).clamp_min(PROB_CLAMP)
    p_y = p.gather(1, targets.view(-1, 1)).squeeze(1)
    return -torch.log(p_y)


def batch_loss(logits: torch.Tensor, targets: torch.Tensor, loss_mode: str, q: float) -> torch.Tensor:
    if loss_mode == "GCE":
        return gce_loss_from_logits(logits, targets, q).mean()
    if loss_mode == "CE":
        return ce_loss_from_logits(logits, targets).mean()
    raise ValueError(f"loss_mode must be 'CE' or 'GCE', got {loss_mode!r}")


def gce_grad_check(
    model: torch.nn.Module,
    inputs: torch.Tensor,
    targets: torch.Tensor,
    q: float = 0.7,
) -> float:
    """Max relative deviation between d(GCE)/dtheta and p_y^q * d(CE)/dtheta.

    Checked per sample against every parameter; deviations are measured
    relative to the sample's largest gradient entry so that zero-gradient
    parameters do not divide by roundoff. Contract: <= 1e-5 in float64.
    """
    _check_q(q)
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise ValueError("model has no trainable parameters")
    worst = 0.0
    for i in range(inputs.shape[0]):
        x = inputs[i : i + 1]
        y = targets[i : i + 1]
        logits = model(x)
        p_y = torch.softmax(logits, dim=1).gather(1, y.view(-1, 1)).squeeze().detach()
        g_gce = torch.autograd.grad(gce_loss_from_logits(logits, y, q).sum(), params, retain_graph=True)
        g_ce = torch.autograd.grad(ce_loss_from_logits(logits, y).sum(), params)
        scale = float(p_y.pow(q))
        gmax = max(float(g.abs().max()) for g in g_ce) * max(scale, 1e-30)
        denom = max(gmax, 1e-30)
        for a, b in zip(g_gce, g_ce):
            dev = float((a - scale * b).abs().max()) / denom
            worst = max(worst, dev)
    return worst
