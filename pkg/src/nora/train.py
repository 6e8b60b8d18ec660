"""AdamW training loop with cosine decay, deterministic under a fixed seed."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .adapter import count_trainable
from .data import Dataset
from .errors import ConfigError, ContractError, NumericError
from .nn import Module
from .tensor import Parameter, Tensor


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.05
    schedule: str = "cosine"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    grad_clip: float | None = None
    eval_every: int = 1

    def validate(self) -> None:
        if not self.lr > 0:
            raise ConfigError("lr must be > 0", field="train.lr")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1", field="train.epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", field="train.batch_size")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError("schedule must be 'cosine' or 'constant'", field="train.schedule")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1", field="train.eval_every")


def config_hash(obj) -> str:
    """Stable short hash of a dataclass or JSON-able object."""
    payload = asdict(obj) if hasattr(obj, "__dataclass_fields__") else obj
    blob = json.dumps(payload, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def cosine_lr(base: float, step: int, total: int) -> float:
    """``base * (1 + cos(pi * step / total)) / 2``; reaches 0 at ``step == total``."""
    return base * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


class AdamW:
    """Adam with decoupled weight decay over the given parameters only."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params: list[Parameter] = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay and getattr(p, "decay", True):
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}


@dataclass
class RunMetrics:
    run_id: str
    stage: str
    rows: list[dict]
    initial: dict
    trainable_params: int
    config_hash: str
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def final(self) -> dict:
        return self.rows[-1] if self.rows else self.initial

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(NumericError):
    """Raised when the loss turns non-finite; carries the last good parameter state."""


def evaluate(model: Module, data: Dataset, batch_size: int = 512) -> tuple[float, float]:
    """Mean cross-entropy and top-1 accuracy; records no graph."""
    if len(data) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    total_loss = 0.0
    correct = 0
    with T.no_grad():
        for s in range(0, len(data), batch_size):
            xb, yb = data.x[s : s + batch_size], data.y[s : s + batch_size]
            logits = model(Tensor(xb))
            total_loss += T.cross_entropy(logits, yb).item() * len(yb)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
    return total_loss / len(data), correct / len(data)


def _global_norm(params) -> float:
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))


def train(
    model: Module,
    data: Dataset,
    cfg: TrainConfig,
    eval_data: Dataset | None = None,
    run_id: str = "run",
    stage: str = "adapt",
    time_fn=time.perf_counter,
) -> RunMetrics:
    """Train the parameters of ``model`` currently marked trainable.

    Frozen parameters never receive gradients and are never touched by the
    optimizer.  Returns per-epoch metrics; ``initial`` holds the evaluation
    before the first step.
    """
    cfg.validate()
    params = [p for p in model.parameters() if p.trainable]
    opt = AdamW(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    eval_set = eval_data if eval_data is not None else data

    start = time_fn()
    init_loss, init_acc = evaluate(model, eval_set)
    initial = {"epoch": 0, "eval_loss": init_loss, "eval_acc": init_acc}
    rows = []
    step = 0
    last_good = [p.data.copy() for p in params]
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(data))
        loss_sum = 0.0
        correct = 0
        for s in range(0, len(data), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            xb, yb = data.x[idx], data.y[idx]
            lr = cosine_lr(cfg.lr, step, total) if cfg.schedule == "cosine" else cfg.lr
            opt.zero_grad()
            try:
                logits = model(Tensor(xb))
                loss = T.cross_entropy(logits, yb)
                lv = loss.item()
                if not math.isfinite(lv):
                    raise NumericError(f"loss is {lv}")
                if params:
                    loss.backward()
            except NumericError as exc:
                for p, saved in zip(params, last_good):
                    p.data[...] = saved
                raise TrainingDiverged(
                    f"non-finite value at step {step} (lr={lr:.3g}): {exc}",
                    step=step,
                    lr=lr,
                    grad_norm=_global_norm(params),
                ) from exc
            if params:
                for p, saved in zip(params, last_good):
                    saved[...] = p.data
                if cfg.grad_clip is not None:
                    norm = _global_norm(params)
                    if norm > cfg.grad_clip:
                        for p in params:
                            if p.grad is not None:
                                p.grad = p.grad * (cfg.grad_clip / norm)
                opt.step(lr)
            loss_sum += lv * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
            step += 1
        row = {
            "epoch": epoch,
            "train_loss": loss_sum / len(data),
            "train_acc": correct / len(data),
            "eval_loss": None,
            "eval_acc": None,
            "lr": lr,
        }
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            row["eval_loss"], row["eval_acc"] = evaluate(model, eval_set)
        rows.append(row)
    return RunMetrics(
        run_id=run_id,
        stage=stage,
        rows=rows,
        initial=initial,
        trainable_params=count_trainable(model),
        config_hash=config_hash(cfg),
        seconds=time_fn() - start,
    )
