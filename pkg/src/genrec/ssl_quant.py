"""Self-distillation with an EMA teacher where only the student is quantized.

Small multilayer networks on vector surrogates stand in for the image
backbone. The student embedding passes through a residual quantizer before
its projection head; gradients skip the quantizer (straight-through), a
commitment term pulls embeddings toward their codes, and the codebooks follow
the assigned residuals by EMA. The teacher sees the unquantized path and is an
exponential average of the student.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from . import rq
from .errors import BatchTooSmall, DimensionMismatch

KOLEO_EPS = 1e-8


@dataclass
class DistillConfig:
    teacher_momentum: float = 0.99
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9
    proj_dim: int = 64
    hidden: int = 64
    embed_dim: int = 16
    alpha_ibot: float = 0.0
    alpha_koleo: float = 0.1
    alpha_commit: float = 0.01
    levels: int = 2
    codebook_size: int = 4
    aug_sigma: float = 0.1
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    quantize: bool = True

    def __post_init__(self) -> None:
        for name in ("teacher_momentum", "center_momentum"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.student_temp <= 0 or self.teacher_temp <= 0:
            raise ValueError("temperatures must be positive")
        if self.alpha_commit < 0 or self.alpha_koleo < 0:
            raise ValueError("loss weights must be non-negative")


def backbone(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, hidden, dtype=nx.DTYPE), nn.GELU(),
        nn.Linear(hidden, hidden, dtype=nx.DTYPE), nn.GELU(),
        nn.Linear(hidden, out_dim, dtype=nx.DTYPE),
    )


def projection(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden, dtype=nx.DTYPE), nn.GELU(), nn.Linear(hidden, out_dim, dtype=nx.DTYPE))


@dataclass
class DistillState:
    cfg: DistillConfig
    student: nn.Sequential
    student_head: nn.Sequential
    teacher: nn.Sequential
    teacher_head: nn.Sequential
    center: torch.Tensor
    codec: rq.RqCodec | None = None
    history: list[dict] = field(default_factory=list)

    @classmethod
    def create(cls, in_dim: int, cfg: DistillConfig, seed: int = 0) -> "DistillState":
        torch.manual_seed(seed)
        g = backbone(in_dim, cfg.hidden, cfg.embed_dim)
        f = projection(cfg.embed_dim, cfg.hidden, cfg.proj_dim)
        gt, ft = copy.deepcopy(g), copy.deepcopy(f)
        for p in list(gt.parameters()) + list(ft.parameters()):
            p.requires_grad_(False)
        return cls(cfg, g, f, gt, ft, torch.zeros(cfg.proj_dim, dtype=nx.DTYPE))

    def student_params(self) -> list[torch.Tensor]:
        return list(self.student.parameters()) + list(self.student_head.parameters())

    def embed(self, x) -> np.ndarray:
        with torch.no_grad():
            return self.student(torch.as_tensor(np.asarray(x), dtype=nx.DTYPE)).numpy()

    def codes(self, x) -> np.ndarray:
        return self.codec.encode(self.embed(x))[0]


def teacher_update(state: DistillState, momentum: float | None = None) -> None:
    m = state.cfg.teacher_momentum if momentum is None else momentum
    with torch.no_grad():
        for net_t, net_s in ((state.teacher, state.student), (state.teacher_head, state.student_head)):
            for pt, ps in zip(net_t.parameters(), net_s.parameters()):
                if pt.shape != ps.shape:
                    raise DimensionMismatch(f"teacher {tuple(pt.shape)} vs student {tuple(ps.shape)}")
                pt.mul_(m).add_(ps.detach(), alpha=1.0 - m)


def dino_ce(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    center: torch.Tensor,
    student_temp: float,
    teacher_temp: float,
    center_momentum: float | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Cross-entropy of the centred, sharpened teacher against the student.

    Returns ``(loss, new_center)``; the center is unchanged when
    ``center_momentum`` is None.
    """
    if student_logits.shape != teacher_logits.shape:
        raise DimensionMismatch(f"student {tuple(student_logits.shape)} vs teacher {tuple(teacher_logits.shape)}")
    t = teacher_logits.detach()
    target = torch.softmax((t - center) / teacher_temp, dim=-1)
    logp = torch.log_softmax(student_logits / student_temp, dim=-1)
    loss = -(target * logp).sum(-1).mean()
    new_center = center
    if center_momentum is not None:
        batch_center = t.reshape(-1, t.shape[-1]).mean(0)
        new_center = center * center_momentum + batch_center * (1.0 - center_momentum)
    return loss, new_center


def quantized_student_forward(state: DistillState, x: torch.Tensor, update_codebooks: bool = True):
    """``(z_hat, codes, commitment)`` with a straight-through gradient to ``z = g^s(x)``."""
    return quantize(state.codec, state.student(x), update_codebooks)


def quantize(codec: rq.RqCodec, z: torch.Tensor, update_codebooks: bool = True):
    codes, residuals = codec.encode(z.detach().numpy())
    codes = np.atleast_2d(codes)
    z_hat = torch.as_tensor(codec.decode(codes), dtype=z.dtype).reshape(z.shape)
    commit = z.new_zeros(())
    res = z
    for level, cb in enumerate(codec.codebooks):
        entry = torch.as_tensor(cb.entries[codes[:, level]], dtype=z.dtype).reshape(z.shape)
        commit = commit + rq.commitment_loss(res, entry) / max(len(codes), 1)
        res = res - entry
    if update_codebooks:
        codec.ema_update({level: (codes[:, level], np.atleast_2d(residuals[level])) for level in range(codec.levels)})
    out = z + (z_hat - z).detach()
    return out, codes, commit


def koleo(z: torch.Tensor, eps: float = KOLEO_EPS) -> torch.Tensor:
    """Kozachenko-Leonenko spreading term on l2-normalised embeddings."""
    if z.shape[0] < 2:
        raise BatchTooSmall(f"KoLeo needs at least 2 embeddings, got {z.shape[0]}")
    u = z / z.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    diff = u[:, None, :] - u[None, :, :]
    d2 = (diff * diff).sum(-1)
    d2 = d2 + torch.diag(torch.full((len(u),), float("inf"), dtype=u.dtype))
    nearest = d2.min(dim=1).values
    # sqrt has an infinite slope at zero; keep the gradient finite for coincident points
    dist = torch.sqrt(nearest.clamp_min(eps * eps))
    return -torch.log(dist + eps).mean()


def jitter(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return x + sigma * rng.standard_normal(x.shape)


def distill_loss(state: DistillState, v1: torch.Tensor, v2: torch.Tensor, update_codebooks: bool = True):
    """Total loss on one pair of views, plus the updated center and level-1 codes."""
    cfg = state.cfg
    losses, commits, teach = [], [], []
    codes = None
    zs = []
    for a, b in ((v1, v2), (v2, v1)):
        z = state.student(a)
        zs.append(z)
        if cfg.quantize:
            z_hat, c, commit = quantize(state.codec, z, update_codebooks)
            codes = c if codes is None else codes
            commits.append(commit)
        else:
            z_hat = z
        with torch.no_grad():
            t = state.teacher_head(state.teacher(b))
        teach.append(t)
        loss, _ = dino_ce(state.student_head(z_hat), t, state.center, cfg.student_temp, cfg.teacher_temp)
        losses.append(loss)
    dino = sum(losses) / 2
    total = dino + cfg.alpha_ibot * 0.0
    ko = koleo(torch.cat(zs)) if cfg.alpha_koleo > 0 else dino.new_zeros(())
    total = total + cfg.alpha_koleo * ko
    commit = sum(commits) / 2 if commits else dino.new_zeros(())
    total = total + cfg.alpha_commit * commit
    t_all = torch.cat(teach)
    center = state.center * cfg.center_momentum + t_all.mean(0) * (1.0 - cfg.center_momentum)
    parts = {"dino": float(dino.detach()), "koleo": float(ko.detach()), "commit": float(commit.detach())}
    return total, center, parts


def init_codec(state: DistillState, x: np.ndarray, seed: int) -> None:
    cfg = state.cfg
    state.codec = rq.fit(state.embed(x), L=cfg.levels, K=cfg.codebook_size, seed=seed)


def train_rq_dino(x: np.ndarray, cfg: DistillConfig | None = None, seed: int = 0, log=None) -> DistillState:
    """Two jittered views per sample; only the student is optimised."""
    cfg = cfg or DistillConfig()
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 2:
        raise BatchTooSmall("RQ-DINO needs at least two samples")
    state = DistillState.create(x.shape[1], cfg, seed)
    rng = np.random.default_rng(seed)
    if cfg.quantize:
        init_codec(state, x, seed)
    scale = float(x.std())
    opt = nx.OptimizerState(state.student_params(), lr=cfg.lr)
    for epoch in range(1, cfg.epochs + 1):
        total, parts_sum, n = 0.0, {"dino": 0.0, "koleo": 0.0, "commit": 0.0}, 0
        order = rng.permutation(len(x))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s: s + cfg.batch_size]
            if len(idx) < 2:
                continue
            v1 = torch.as_tensor(jitter(x[idx], cfg.aug_sigma * scale, rng), dtype=nx.DTYPE)
            v2 = torch.as_tensor(jitter(x[idx], cfg.aug_sigma * scale, rng), dtype=nx.DTYPE)
            loss, center, parts = distill_loss(state, v1, v2)
            opt.zero_grad()
            nx.backward(loss)
            nx.adamw_step(opt)
            teacher_update(state)
            state.center = center.detach()
            total += float(loss.detach()) * len(idx)
            for k in parts_sum:
                parts_sum[k] += parts[k] * len(idx)
            n += len(idx)
        record = {"epoch": epoch, "split": "train", "loss": total / n, **{k: v / n for k, v in parts_sum.items()}}
        state.history.append(record)
        if log is not None:
            log(record)
    return state


def gaussian_hierarchy(
    n_per_leaf: int = 40,
    branching: tuple[int, int] = (4, 4),
    dim: int = 16,
    sigma: float = 0.25,
    super_scale: float = 10.0,
    sub_scale: float = 1.5,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Two-level Gaussian mixture: ``(points, super labels, sub labels)``."""
    rng = np.random.default_rng(seed)
    n_super, n_sub = branching
    supers = rng.normal(scale=super_scale, size=(n_super, dim))
    subs = supers[:, None, :] + rng.normal(scale=sub_scale, size=(n_super, n_sub, dim))
    sup = np.repeat(np.arange(n_super), n_sub * n_per_leaf)
    sub = np.repeat(np.arange(n_super * n_sub), n_per_leaf)
    pts = subs.reshape(-1, dim)[sub] + sigma * rng.normal(size=(len(sub), dim))
    perm = rng.permutation(len(pts))
    return pts[perm], sup[perm], sub[perm]
