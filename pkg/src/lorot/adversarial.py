"""Projected gradient descent attack in the l-infinity ball.

Standard signed-gradient iteration with a uniform random start, projection to
the epsilon ball around the original input, and clipping to the valid pixel
range [0, 1]. Default budget: epsilon 8/255; step size 2/255 for 10- and
20-step attacks and 0.3/255 for 100-step attacks.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

EVAL_ALPHA = {20: 2.0 / 255.0, 100: 0.3 / 255.0}


@dataclass(frozen=True)
class AdversarialConfig:
    epsilon: float = 8.0 / 255.0
    alpha: float = 2.0 / 255.0
    train_steps: int = 10
    eval_steps: int = 20
    rand_init: bool = True
    # Apply the pretext transform before crafting the perturbation, so the
    # pretext label stays consistent with the visible patch.
    transform_first: bool = True

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.alpha < 0 or self.alpha > self.epsilon:
            raise ValueError(
                f"alpha must satisfy 0 <= alpha <= epsilon, got alpha={self.alpha}, epsilon={self.epsilon}"
            )
        if self.train_steps < 1:
            raise ValueError(f"train_steps must be >= 1, got {self.train_steps}")
        if self.eval_steps not in EVAL_ALPHA:
            raise ValueError(f"eval_steps must be one of {sorted(EVAL_ALPHA)}, got {self.eval_steps}")

    def eval_alpha(self, steps: int | None = None) -> float:
        steps = self.eval_steps if steps is None else steps
        if steps not in EVAL_ALPHA:
            raise ValueError(f"no step-size schedule for {steps}-step evaluation")
        return EVAL_ALPHA[steps]


def pgd_attack(
    model,
    images: torch.Tensor,
    labels: torch.Tensor,
    config: AdversarialConfig,
    steps: int | None = None,
    alpha: float | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Return adversarial examples for the primary task.

    The output always satisfies ||x_adv - x||_inf <= epsilon and lies in
    [0, 1]; with epsilon 0 the input is returned bit-exactly. The model is
    queried in eval mode (gradients w.r.t. the input only) and restored to
    its previous mode afterwards.
    """
    if images.min() < -1e-6 or images.max() > 1 + 1e-6:
        raise ValueError("pgd_attack expects inputs in the valid pixel range [0, 1]")
    steps = config.train_steps if steps is None else steps
    alpha = config.alpha if alpha is None else alpha
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    eps = config.epsilon

    x0 = images.detach().clone()
    was_training = model.training
    model.eval()
    try:
        if config.rand_init and eps > 0:
            noise = (torch.rand(x0.shape, dtype=x0.dtype, generator=generator) * 2.0 - 1.0) * eps
            x = (x0 + noise).clamp(0.0, 1.0)
        else:
            x = x0.clone()
        for _ in range(steps):
            x = x.detach().requires_grad_(True)
            logits_u, _ = model.logits(x)
            loss = F.cross_entropy(logits_u, labels)
            (grad,) = torch.autograd.grad(loss, x)
            if not torch.isfinite(grad).all():
                raise RuntimeError("non-finite gradient encountered in PGD attack")
            with torch.no_grad():
                x = x + alpha * grad.sign()
                x = torch.min(torch.max(x, x0 - eps), x0 + eps).clamp(0.0, 1.0)
        with torch.no_grad():
            # computing x0 +/- eps rounds, so |x - x0| can overshoot eps by an
            # ulp; nudge such pixels back toward x0 until the ball constraint
            # holds bitwise
            for _ in range(4):
                over = (x - x0).abs() > eps
                if not bool(over.any()):
                    break
                x = torch.where(over, torch.nextafter(x, x0), x)
    finally:
        model.train(was_training)
    return x.detach()
