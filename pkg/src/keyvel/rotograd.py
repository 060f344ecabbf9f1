"""Per-task latent rotations with a gradient-alignment update rule."""

from typing import Sequence

import torch
from torch import nn
from torch.nn import functional as F

_TINY_NORM = 1e-12


class TaskRotations(nn.Module):
    """Skew-generated rotation matrices, one per task head.

    Each task k owns a generator G_k; its rotation is matrix_exp(G_k -
    G_k^T), orthogonal with determinant +1 by construction. Task heads
    see the rotated latent. The task losses never differentiate through
    the rotations; instead `update` takes one gradient step on a cosine
    objective that aligns every task's back-rotated latent gradient
    with their across-task mean direction.
    """

    def __init__(self, n_tasks: int, dim: int):
        super().__init__()
        if n_tasks < 1:
            raise ValueError("need at least one task")
        if dim < 2 and n_tasks > 1:
            raise ValueError("rotations need latent dimension >= 2")
        self.n_tasks = n_tasks
        self.dim = dim
        self.generators = nn.ParameterList(
            nn.Parameter(torch.zeros(dim, dim)) for _ in range(n_tasks))

    def rotation(self, task: int) -> torch.Tensor:
        """Orthogonal rotation matrix of task `task`."""
        g = self.generators[task]
        return torch.matrix_exp(g - g.T)

    def apply(self, task: int, latent: torch.Tensor) -> torch.Tensor:
        """Rotate a (B, dim) latent batch for one task head.

        The rotation tensor is detached so task losses treat it as a
        constant; gradients still flow through the latent itself.
        """
        if self.n_tasks == 1:
            return latent
        return latent @ self.rotation(task).detach().T

    def update(self, task_grads: Sequence[torch.Tensor], lr: float = 0.1) -> float:
        """One alignment step from the task gradients w.r.t. rotated latents.

        Args:
            task_grads: per task, gradient of its loss w.r.t. the rotated
                latent, shaped (B, dim) or (dim,).
            lr: step size on the generators.
        Returns:
            Largest absolute generator change (0.0 when degenerate).
        """
        if self.n_tasks == 1:
            return 0.0
        if len(task_grads) != self.n_tasks:
            raise ValueError(f"expected {self.n_tasks} gradients, got {len(task_grads)}")
        grads = []
        for g in task_grads:
            g = g.detach()
            grads.append(g.mean(0) if g.ndim == 2 else g)
        if any(float(g.norm()) < _TINY_NORM for g in grads):
            return 0.0
        with torch.no_grad():
            target = torch.stack(
                [self.rotation(k).T @ grads[k] for k in range(self.n_tasks)]
            ).mean(0)
        if float(target.norm()) < _TINY_NORM:
            return 0.0
        loss = sum(
            1.0 - F.cosine_similarity(self.rotation(k).T @ grads[k], target, dim=0)
            for k in range(self.n_tasks))
        gen_grads = torch.autograd.grad(
            loss, list(self.generators), allow_unused=True)
        magnitude = 0.0
        with torch.no_grad():
            for param, grad in zip(self.generators, gen_grads):
                if grad is None:
                    continue
                param.sub_(lr * grad)
                magnitude = max(magnitude, float((lr * grad).abs().max()))
        return magnitude

    def alignment(self, task_grads: Sequence[torch.Tensor]) -> float:
        """Mean pairwise cosine between back-rotated task gradients."""
        grads = []
        with torch.no_grad():
            for k, g in enumerate(task_grads):
                g = g.detach()
                g = g.mean(0) if g.ndim == 2 else g
                grads.append(self.rotation(k).T @ g)
            cosines = []
            for i in range(len(grads)):
                for j in range(i + 1, len(grads)):
                    cosines.append(float(F.cosine_similarity(grads[i], grads[j], dim=0)))
        return sum(cosines) / len(cosines) if cosines else 1.0
