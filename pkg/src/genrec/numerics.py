"""Dense tensor operations with reverse-mode gradients.

Tensors are ``torch.Tensor`` objects in float64; torch's autograd tape does
the recording and backward traversal. This module pins down the handful of
operations the models rely on, with the error behaviour the rest of the
package expects, plus an AdamW wrapper and a finite-difference gradient
checker that never touches autograd.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import EmptyAllowedSet, IndexOutOfRange, NonScalarLoss, ShapeMismatch

DTYPE = torch.float64
# Stand-in for -inf on masked entries; keeps every arithmetic path finite.
NEG_INF = -1e30

Tensor = torch.Tensor


def tensor(data, requires_grad: bool = False) -> Tensor:
    t = torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE).clone()
    t.requires_grad_(requires_grad)
    return t


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeMismatch(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return a @ b


def _allowed_mask(allowed, n: int, device=None) -> Tensor:
    if isinstance(allowed, torch.Tensor) and allowed.dtype == torch.bool:
        mask = allowed
    elif isinstance(allowed, np.ndarray) and allowed.dtype == bool:
        mask = torch.from_numpy(allowed)
    else:
        idx = sorted(set(int(i) for i in allowed))
        if idx and (idx[0] < 0 or idx[-1] >= n):
            raise IndexOutOfRange(f"allowed index out of range for {n} logits: {idx}")
        mask = torch.zeros(n, dtype=torch.bool)
        mask[idx] = True
    if mask.shape[-1] != n:
        raise ShapeMismatch(f"allowed mask of width {mask.shape[-1]} for {n} logits")
    if not bool(mask.any(dim=-1).all()):
        raise EmptyAllowedSet("masked_log_softmax needs at least one permissible entry")
    return mask


def masked_log_softmax(logits: Tensor, allowed) -> Tensor:
    """Log-softmax normalized over ``allowed`` only; other entries get ``NEG_INF``.

    ``allowed`` is either an iterable of indices (applied to every row) or a
    boolean mask broadcastable to ``logits``.
    """
    mask = _allowed_mask(allowed, logits.shape[-1])
    mask = mask.expand_as(logits)
    masked = torch.where(mask, logits, torch.full_like(logits, NEG_INF))
    shift = masked.max(dim=-1, keepdim=True).values.detach()
    z = masked - shift
    lse = torch.log(torch.where(mask, torch.exp(z), torch.zeros_like(z)).sum(dim=-1, keepdim=True))
    return torch.where(mask, z - lse, torch.full_like(z, NEG_INF))


def softmax_rows(x: Tensor) -> Tensor:
    return torch.softmax(x, dim=-1)


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x)


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    out = centered / torch.sqrt(var + eps)
    if weight is not None:
        out = out * weight
    if bias is not None:
        out = out + bias
    return out


def embedding_lookup(table: Tensor, indices) -> Tensor:
    idx = torch.as_tensor(indices, dtype=torch.long)
    if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= table.shape[0]):
        raise IndexOutOfRange(
            f"embedding index out of range [0, {table.shape[0]}): "
            f"min={int(idx.min())} max={int(idx.max())}"
        )
    return table[idx]


def backward(loss: Tensor) -> None:
    if loss.numel() != 1:
        raise NonScalarLoss(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward()


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        if p.grad is not None:
            p.grad.zero_()


@dataclass
class OptimizerState:
    """AdamW with bias correction and decoupled weight decay."""

    params: list[Tensor]
    lr: float = 0.002
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    optimizer: torch.optim.AdamW = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.params = list(self.params)
        self.optimizer = torch.optim.AdamW(
            self.params, lr=self.lr, betas=self.betas, eps=self.eps, weight_decay=self.weight_decay
        )

    @property
    def step_count(self) -> int:
        steps = [int(s["step"]) for s in self.optimizer.state.values() if "step" in s]
        return max(steps, default=0)

    def moments(self, param: Tensor) -> tuple[Tensor, Tensor] | None:
        s = self.optimizer.state.get(param)
        if not s:
            return None
        return s["exp_avg"], s["exp_avg_sq"]

    def zero_grad(self) -> None:
        self.optimizer.zero_grad(set_to_none=False)


def adamw_step(state: OptimizerState) -> None:
    state.optimizer.step()


def grad_check(
    f: Callable[..., Tensor],
    point: Tensor | Sequence[Tensor],
    step: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> float:
    """Compare autograd gradients of scalar ``f`` with central differences.

    ``point`` is one tensor or a list of tensors passed positionally to ``f``.
    Returns the largest absolute discrepancy divided by the largest gradient
    magnitude seen (0.0 when both gradients vanish). ``coords`` restricts the
    finite-difference probe to selected flat indices of every input.
    """
    single = isinstance(point, torch.Tensor)
    inputs = [point] if single else list(point)
    leaves = [x.detach().clone().to(DTYPE).requires_grad_(True) for x in inputs]
    out = f(*leaves)
    if out.numel() != 1:
        raise NonScalarLoss(f"grad_check needs a scalar function, got shape {tuple(out.shape)}")
    grads = torch.autograd.grad(out.reshape(()), leaves, allow_unused=True)

    worst = 0.0
    scale = 0.0
    with torch.no_grad():
        for i, leaf in enumerate(leaves):
            analytic = grads[i] if grads[i] is not None else torch.zeros_like(leaf)
            flat = leaf.detach().clone().reshape(-1)
            probe = range(flat.numel()) if coords is None else [c for c in coords if c < flat.numel()]
            for j in probe:
                args = [x.detach() for x in leaves]
                plus = flat.clone()
                plus[j] += step
                args[i] = plus.reshape(leaf.shape)
                f_plus = float(f(*args))
                minus = flat.clone()
                minus[j] -= step
                args[i] = minus.reshape(leaf.shape)
                f_minus = float(f(*args))
                numeric = (f_plus - f_minus) / (2.0 * step)
                a = float(analytic.reshape(-1)[j])
                worst = max(worst, abs(a - numeric))
                scale = max(scale, abs(a), abs(numeric))
    if scale == 0.0:
        return 0.0
    return worst / scale
