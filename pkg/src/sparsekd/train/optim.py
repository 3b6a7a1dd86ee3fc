from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..nn import Parameter


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    kind: str = "sgd_momentum"
    lr: float = 0.1
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step_size: int = 30
    gamma: float = 0.1

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.step_size < 1:
            raise ValueError("step_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OptimConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def step_lr(lr0: float, gamma: float, step_size: int, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr0 * gamma ** (epoch // step_size)


class Optimizer:
    """SGD with momentum or Adam over named parameters, weight decay decoupled.

    State is keyed by parameter name so it can be checkpointed.
    """

    def __init__(self, named_params, cfg: OptimConfig):
        self.params: dict[str, Parameter] = dict(named_params)
        self.cfg = cfg
        self.state: dict[str, np.ndarray] = {}
        self.steps = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if not np.isfinite(p.grad).all():
                raise DivergenceError(f"divergence detected: non-finite gradient in {name}")
        self.steps += 1
        cfg = self.cfg
        for name, p in self.params.items():
            if p.frozen:
                continue
            g = p.grad
            if cfg.kind == "sgd_momentum":
                buf = self.state.get(f"{name}/momentum")
                buf = g.copy() if buf is None else cfg.momentum * buf + g
                self.state[f"{name}/momentum"] = buf
                update = buf
            else:
                b1, b2 = cfg.betas
                m = self.state.get(f"{name}/exp_avg", np.zeros_like(g))
                v = self.state.get(f"{name}/exp_avg_sq", np.zeros_like(g))
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                self.state[f"{name}/exp_avg"], self.state[f"{name}/exp_avg_sq"] = m, v
                m_hat = m / (1 - b1**self.steps)
                v_hat = v / (1 - b2**self.steps)
                update = m_hat / (np.sqrt(v_hat) + cfg.eps)
            if cfg.weight_decay:
                p.values -= (lr * cfg.weight_decay) * p.values
            p.values -= (lr * update).astype(p.values.dtype, copy=False)

    def state_dict(self) -> tuple[dict, dict]:
        """Tensors and scalar metadata."""
        return dict(self.state), {"steps": self.steps, "config": self.cfg.to_dict()}

    def load_state_dict(self, tensors: dict, meta: dict) -> None:
        self.state = {k: np.array(v) for k, v in tensors.items()}
        self.steps = int(meta["steps"])

