"""Affine layers, two-layer MLPs, gradient reversal and momentum SGD."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .rng import SplitMix64


def init_params(shape: Sequence[int], scheme: str, rng: SplitMix64 | None = None) -> Tensor:
    """Kaiming-uniform ``U(-sqrt(6/fan_in), sqrt(6/fan_in))`` or zeros.

    ``fan_in`` is the last dimension of ``shape``.
    """
    shape = tuple(int(s) for s in shape)
    n = int(np.prod(shape)) if shape else 1
    if scheme == "zeros":
        return Tensor(np.zeros(shape), requires_grad=True)
    if scheme == "kaiming_uniform":
        if rng is None:
            raise ValueError("kaiming_uniform needs an rng")
        fan_in = shape[-1] if shape else 1
        bound = math.sqrt(6.0 / fan_in)
        return Tensor(rng.uniform(n, -bound, bound).reshape(shape), requires_grad=True)
    raise ValueError(f"unknown init scheme {scheme!r}")


@dataclass
class AffineLayer:
    weight: Tensor  # [out, in]
    bias: Tensor | None = None
    activation: str = "none"

    @classmethod
    def create(cls, d_in: int, d_out: int, rng: SplitMix64, bias: bool = True,
               activation: str = "none") -> "AffineLayer":
        w = init_params((d_out, d_in), "kaiming_uniform", rng)
        b = init_params((d_out,), "zeros") if bias else None
        return cls(w, b, activation)

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        out = ag.linear(x, self.weight)
        if self.bias is not None:
            out = ag.add_rowvec(out, self.bias)
        if self.activation == "relu":
            out = ag.relu(out)
        return out

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias


@dataclass
class TwoLayerMLP:
    layer1: AffineLayer
    layer2: AffineLayer

    @classmethod
    def create(cls, d_in: int, hidden: int, d_out: int, rng: SplitMix64) -> "TwoLayerMLP":
        if hidden <= 0:
            raise ValueError(f"hidden width must be positive, got {hidden}")
        return cls(AffineLayer.create(d_in, hidden, rng, activation="relu"),
                   AffineLayer.create(hidden, d_out, rng))

    def __call__(self, x: Tensor) -> Tensor:
        return self.layer2(self.layer1(x))

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for prefix, layer in (("layer1", self.layer1), ("layer2", self.layer2)):
            for name, p in layer.named_parameters():
                yield f"{prefix}.{name}", p


def forward_mlp(net: TwoLayerMLP, x: Tensor) -> Tensor:
    return net(x)


def grad_reverse(x: Tensor, coeff: float) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by ``-coeff``."""
    c = float(coeff)
    if c < 0:
        raise ValueError(f"gradient reversal coefficient must be >= 0, got {c}")
    return ag.custom(x, x.data, lambda g: g * (-c), "grad_reverse")


def inverse_decay_lr(base_lr: float, progress: float) -> float:
    return base_lr * (1.0 + 10.0 * progress) ** (-0.75)


@dataclass
class SgdState:
    """Momentum SGD over one parameter group with the inverse-decay schedule.

    ``v <- momentum * v + g (+ weight_decay * p)``; ``p <- p - lr_t * v`` with
    ``lr_t = base_lr * (1 + 10 * step / total_steps) ** -0.75``.
    """

    params: list[Tensor]
    base_lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    total_steps: int = 1
    velocity: list[np.ndarray] = field(default_factory=list)
    step_count: int = 0

    def __post_init__(self):
        if self.base_lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.base_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.velocity:
            self.velocity = [np.zeros(p.shape) for p in self.params]

    @property
    def learning_rate(self) -> float:
        return self.lr_at(self.step_count)

    def lr_at(self, step: int) -> float:
        return inverse_decay_lr(self.base_lr, step / max(self.total_steps, 1))

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, progress_step: int | None = None) -> None:
        """Apply one update; ``progress_step`` overrides the internal counter for the schedule."""
        lr = self.lr_at(self.step_count if progress_step is None else progress_step)
        for i, (p, v) in enumerate(zip(self.params, self.velocity)):
            if p.grad is None:
                raise ValueError(f"sgd_step: parameter {i} of shape {list(p.shape)} has no gradient")
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data = p.data - lr * v
        self.step_count += 1


def sgd_step(state: SgdState, progress_step: int | None = None) -> None:
    state.step(progress_step)


# ---------------------------------------------------------------- checkpoint I/O

def tensor_to_json(t: Tensor | np.ndarray) -> dict:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    # float repr is the shortest string that round-trips the exact double
    return {"shape": list(arr.shape), "values": [float(v) for v in arr.reshape(-1)]}


def tensor_from_json(obj: dict) -> np.ndarray:
    shape = tuple(int(s) for s in obj["shape"])
    values = np.array(obj["values"], dtype=np.float64)
    if values.size != (int(np.prod(shape)) if shape else 1):
        raise ValueError(f"checkpoint tensor: {values.size} values do not fill shape {list(shape)}")
    return values.reshape(shape)


def save_json(path: str | Path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, allow_nan=False))


def load_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
