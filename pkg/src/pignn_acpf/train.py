"""Label-free training: discounted mismatch loss, AdamW, cosine schedule and the epoch loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .batch import BatchedGraph, block_diag_batch
from .model import LsConfig, ModelConfig, ModelParams, NonFiniteStateError, Trajectory, unroll

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.9
    K: int = 10  # 40 at full scale
    batch_size: int = 16  # 64 at full scale
    weight_decay: float = 1e-3
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    cosine_period: int = 20
    cosine_restart: bool = True
    epochs: int = 30
    seed: int = 0
    grad_clip: float = 1.0
    loss_steps: str = "post"  # "post": states 1..K, "pre": states 0..K-1
    unroll_mode: str = "train"  # "train": caps and bounds; "train_ls": line search step sizes as constants

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.K < 1:
            raise ValueError(f"K must be at least 1, got {self.K}")
        if self.batch_size < 1 or self.epochs < 0 or self.cosine_period < 1:
            raise ValueError("batch_size and cosine_period must be positive and epochs non-negative")
        if self.unroll_mode not in ("train", "train_ls"):
            raise ValueError(f"unroll_mode must be 'train' or 'train_ls', got {self.unroll_mode!r}")
        if self.loss_steps not in ("post", "pre"):
            raise ValueError(f"loss_steps must be 'post' or 'pre', got {self.loss_steps!r}")


def step_penalties(traj: Trajectory, graph: BatchedGraph, steps: str = "post") -> list[Tensor]:
    """Per-step mean squared mismatch, one (B,) tensor per penalised step.

    Each graph's sum of squares is divided by its own bus count.
    """
    if traj.steps < 1:
        raise ValueError("trajectory has no correction steps")
    index = range(1, traj.steps + 1) if steps == "post" else range(traj.steps)
    inv_sizes = 1.0 / graph.sizes.astype(float)
    out = []
    for k in index:
        dp, dq = traj.dp[k], traj.dq[k]
        sq = dp * dp + dq * dq
        out.append(ad.scatter_add(sq, graph.node_graph, graph.n_graphs) * inv_sizes)
    return out


def discounted_sum(penalties, gamma: float):
    """``sum_k gamma**(K-1-k) * penalties[k]`` with the latest step weighted 1."""
    if len(penalties) == 0:
        raise ValueError("empty trajectory: no step penalties to sum")
    K = len(penalties)
    total = None
    for k, term in enumerate(penalties):
        weighted = term * gamma ** (K - 1 - k)
        total = weighted if total is None else total + weighted
    return total


def physics_loss(traj: Trajectory, graph: BatchedGraph, gamma: float, steps: str = "post") -> Tensor:
    """Discounted physics loss averaged over the graphs of the batch."""
    per_graph = discounted_sum(step_penalties(traj, graph, steps), gamma)
    return ad.mean(per_graph)


def per_graph_loss(traj: Trajectory, graph: BatchedGraph, gamma: float, steps: str = "post") -> np.ndarray:
    per_graph = discounted_sum(step_penalties(traj, graph, steps), gamma)
    return np.asarray(per_graph.data if isinstance(per_graph, Tensor) else per_graph)


# --- optimisation -------------------------------------------------------------------

@dataclass
class AdamW:
    """Adam moments with decoupled weight decay: ``w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + wd * w)``."""

    params: list[Tensor]
    weight_decay: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros(p.shape) for p in self.params]
            self.v = [np.zeros(p.shape) for p in self.params]

    def step(self, lr: float, grads=None):
        grads = [p.grad for p in self.params] if grads is None else grads
        self.t += 1
        b1, b2 = self.betas
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            adamw_step(p.data, g, m, v, lr, self.weight_decay, b1, b2, self.eps, self.t)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(self.t)}
        for k, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{k}"] = m
            out[f"v{k}"] = v
        return out


def adamw_step(w, g, m, v, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8, t=1):
    """In-place AdamW update of ``w`` and its moment buffers; ``g=None`` counts as zero."""
    if g is None:
        g = np.zeros_like(w)
    w *= 1.0 - lr * weight_decay
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    w -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return w


def clip_by_global_norm(grads, max_norm: float) -> float:
    """Scale gradients in place so their joint 2-norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads:
            if g is not None:
                g *= scale
    return total


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    """Cosine anneal from lr_max to lr_min; restarts every period unless ``cosine_restart`` is off."""
    period = cfg.cosine_period
    phase = epoch % period if cfg.cosine_restart else min(epoch, period)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * phase / period))


# --- loop ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    wall_time: float
    grad_norm: float

    def line(self) -> str:
        return (f"epoch={self.epoch} lr={self.lr:.6e} train_loss={self.train_loss:.17g} "
                f"val_loss={self.val_loss:.17g} grad_norm={self.grad_norm:.4e} wall={self.wall_time:.3f}")


@dataclass
class TrainResult:
    params: ModelParams
    best_epoch: int
    best_val_loss: float
    history: list[EpochRecord]
    initial_val_loss: float
    aborted: str = ""

    @property
    def train_losses(self) -> list[float]:
        return [r.train_loss for r in self.history]


def _batches(items, batch_size):
    return [items[i:i + batch_size] for i in range(0, len(items), batch_size)]


def evaluate_loss(params: ModelParams, graphs: list[BatchedGraph], cfg: TrainConfig, ls_config=None) -> float:
    """Mean per-scenario training-mode loss (no graph recorded)."""
    if not graphs:
        return float("nan")
    total, count = 0.0, 0
    with ad.no_grad():
        for g in graphs:
            traj = unroll(g, params, cfg.K, cfg.unroll_mode, ls_config)
            per = per_graph_loss(traj, g, cfg.gamma, cfg.loss_steps)
            total += float(per.sum())
            count += per.size
    return total / count


def train(train_set, val_set, model_config: ModelConfig | str, cfg: TrainConfig,
          ls_config: LsConfig | None = None, init_params: ModelParams | None = None,
          on_epoch=None) -> TrainResult:
    """Shuffled mini-batch training; keeps the parameters with the lowest validation loss.

    A non-finite loss or state aborts the run and returns the best parameters so far.
    """
    if isinstance(model_config, str):
        model_config = ModelConfig(kind=model_config)
    if not train_set:
        raise ValueError("training set is empty")
    ls_config = ls_config or LsConfig()
    rng = np.random.default_rng(cfg.seed)
    params = init_params.copy() if init_params is not None else ModelParams.init(model_config, seed=cfg.seed)
    opt = AdamW(params.parameters(), weight_decay=cfg.weight_decay)
    val_graphs = [block_diag_batch(b) for b in _batches(list(val_set), cfg.batch_size)]
    monitor = val_graphs or [block_diag_batch(b) for b in _batches(list(train_set), cfg.batch_size)]

    try:
        initial_val = evaluate_loss(params, monitor, cfg, ls_config)
    except NonFiniteStateError as exc:
        log.warning("training aborted before the first epoch: %s", exc)
        return TrainResult(params, -1, float("nan"), [], float("nan"), str(exc))
    best = params.copy()
    best_val, best_epoch = initial_val, -1
    history: list[EpochRecord] = []
    aborted = ""
    order = np.arange(len(train_set))
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        lr = cosine_lr(epoch, cfg)
        rng.shuffle(order)
        losses, weights, norms = [], [], []
        try:
            for idx in _batches(order, cfg.batch_size):
                graph = block_diag_batch([train_set[i] for i in idx])
                traj = unroll(graph, params, cfg.K, cfg.unroll_mode, ls_config)
                loss = physics_loss(traj, graph, cfg.gamma, cfg.loss_steps)
                if not np.isfinite(loss.item()):
                    raise NonFiniteStateError(f"non-finite loss in epoch {epoch}")
                params.zero_grad()
                ad.backward(loss)
                grads = [p.grad if p.grad is not None else np.zeros(p.shape) for p in params.parameters()]
                norms.append(clip_by_global_norm(grads, cfg.grad_clip))
                opt.step(lr, grads)
                losses.append(loss.item())
                weights.append(len(idx))
        except NonFiniteStateError as exc:
            aborted = str(exc)
            log.warning("training aborted: %s", exc)
            break
        train_loss = float(np.average(losses, weights=weights))
        val_loss = evaluate_loss(params, monitor, cfg, ls_config)
        record = EpochRecord(epoch, lr, train_loss, val_loss, time.perf_counter() - start, float(np.max(norms)))
        history.append(record)
        log.info(record.line())
        if on_epoch is not None:
            on_epoch(record)
        if np.isfinite(val_loss) and val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            best = params.copy()
    params.zero_grad()
    return TrainResult(best, best_epoch, best_val, history, initial_val, aborted)


def with_epochs(cfg: TrainConfig, epochs: int) -> TrainConfig:
    return replace(cfg, epochs=epochs)
