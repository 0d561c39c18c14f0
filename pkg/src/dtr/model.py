"""The nine-group DTR network ensemble and its forward dataflow."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import AffineLayer, TwoLayerMLP, tensor_from_json, tensor_to_json
from .rng import SplitMix64

GROUPS = ("G", "D_di", "D_ds", "C_di", "C_ds", "F_D", "R", "C_s", "C_t")
HEADS = ("C_di", "C_s", "C_t", "C_ds")

# row index of each domain in the C_ds weight (source labelled 1, target 0)
SOURCE_DOMAIN = 1
TARGET_DOMAIN = 0


@dataclass
class Dims:
    input_dim: int = 2
    d_g: int = 32
    d_di: int = 16
    d_ds: int = 8
    hidden: int = 64
    n_classes: int = 3

    def validate(self) -> None:
        for name in ("input_dim", "d_g", "d_di", "d_ds", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"dims.{name} must be >= 1")
        if self.n_classes < 1:
            raise ValueError("dims.n_classes must be >= 1")


@dataclass
class NetworkEnsemble:
    G: TwoLayerMLP
    D_di: TwoLayerMLP
    D_ds: TwoLayerMLP
    C_di: AffineLayer
    C_ds: AffineLayer
    F_D: TwoLayerMLP
    R: TwoLayerMLP
    C_s: AffineLayer
    C_t: AffineLayer

    @classmethod
    def create(cls, dims: Dims, rng: SplitMix64, conditional: bool = True) -> "NetworkEnsemble":
        """``conditional=False`` sizes F_D for plain ``f_di`` inputs (DANN) instead of ``h_hat``."""
        dims.validate()
        K, h = dims.n_classes, dims.hidden
        ens = cls(
            G=TwoLayerMLP.create(dims.input_dim, h, dims.d_g, rng),
            D_di=TwoLayerMLP.create(dims.d_g, h, dims.d_di, rng),
            D_ds=TwoLayerMLP.create(dims.d_g, h, dims.d_ds, rng),
            C_di=AffineLayer.create(dims.d_di, K, rng, bias=False),
            C_ds=AffineLayer.create(dims.d_ds, 2, rng, bias=False),
            F_D=TwoLayerMLP.create(dims.d_di * K if conditional else dims.d_di, h, 1, rng),
            R=TwoLayerMLP.create(dims.d_di + dims.d_ds, h, dims.d_g, rng),
            C_s=AffineLayer.create(dims.d_g, K, rng, bias=False),
            C_t=AffineLayer.create(dims.d_g, K, rng, bias=False),
        )
        # prototype classifiers only ever receive values from refresh_prototypes
        ens.C_s.weight.requires_grad = False
        ens.C_t.weight.requires_grad = False
        return ens

    @property
    def n_classes(self) -> int:
        return self.C_di.d_out

    def group(self, name: str):
        if name not in GROUPS:
            raise KeyError(f"unknown parameter group {name!r}")
        return getattr(self, name)

    def group_params(self, name: str) -> list[Tensor]:
        return [p for _, p in self.group(name).named_parameters()]

    def named_parameters(self) -> Iterator[tuple[str, str, Tensor]]:
        for g in GROUPS:
            for name, p in self.group(g).named_parameters():
                yield g, name, p

    def snapshot(self) -> dict[str, np.ndarray]:
        return {f"{g}.{n}": p.data.copy() for g, n, p in self.named_parameters()}

    def to_json(self) -> dict:
        out: dict = {}
        for g, n, p in self.named_parameters():
            out.setdefault(g, {})[n] = tensor_to_json(p)
        return out

    def load_json(self, doc: dict) -> None:
        for g, n, p in self.named_parameters():
            try:
                arr = tensor_from_json(doc[g][n])
            except KeyError as exc:
                raise ValueError(f"checkpoint lacks parameter {g}.{n}") from exc
            if arr.shape != p.shape:
                raise ValueError(f"checkpoint {g}.{n} has shape {list(arr.shape)}, "
                                 f"model expects {list(p.shape)}")
            p.data = arr


@dataclass
class ForwardBundle:
    f_g: Tensor
    f_di: Tensor
    f_ds: Tensor
    logits: Tensor  # C_di(f_di)
    p: Tensor
    domain_logits: Tensor
    h_hat: Tensor


@dataclass
class PrototypeBank:
    w_c: np.ndarray
    w_d_s: np.ndarray
    w_d_t: np.ndarray
    w_s: np.ndarray
    w_t: np.ndarray
    last_refresh_step: int = 0
    refresh_steps: list[int] = field(default_factory=list)

    @classmethod
    def empty(cls, dims: Dims) -> "PrototypeBank":
        K = dims.n_classes
        return cls(np.zeros((K, dims.d_di)), np.zeros(dims.d_ds), np.zeros(dims.d_ds),
                   np.zeros((K, dims.d_g)), np.zeros((K, dims.d_g)))

    def to_json(self) -> dict:
        return {
            "w_c": tensor_to_json(self.w_c), "w_d_s": tensor_to_json(self.w_d_s),
            "w_d_t": tensor_to_json(self.w_d_t), "w_s": tensor_to_json(self.w_s),
            "w_t": tensor_to_json(self.w_t), "last_refresh_step": self.last_refresh_step,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PrototypeBank":
        return cls(*(tensor_from_json(doc[k]) for k in ("w_c", "w_d_s", "w_d_t", "w_s", "w_t")),
                   last_refresh_step=int(doc["last_refresh_step"]))


def multilinear_map(f: Tensor, p: Tensor) -> Tensor:
    return ag.outer_rows(f, p)


def forward_all(ens: NetworkEnsemble, x: Tensor | np.ndarray, detach_p: bool = False) -> ForwardBundle:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 2 or x.shape[1] != ens.G.layer1.d_in:
        raise ag.DimensionError(f"forward_all: input {list(x.shape)} but G expects "
                                f"[n, {ens.G.layer1.d_in}]")
    f_g = ens.G(x)
    f_di = ens.D_di(f_g)
    f_ds = ens.D_ds(f_g)
    logits = ens.C_di(f_di)
    p = ag.softmax_rows(logits)
    h_hat = multilinear_map(f_di, ag.detach(p) if detach_p else p)
    return ForwardBundle(f_g, f_di, f_ds, logits, p, ens.C_ds(f_ds), h_hat)


def reconstruct(ens: NetworkEnsemble, f_di: Tensor, f_ds: Tensor) -> Tensor:
    return ens.R(ag.concat_cols(f_di, f_ds))


def refresh_prototypes(ens: NetworkEnsemble, bank: PrototypeBank, step: int = 0) -> None:
    """Rebuild original-feature prototypes from the class and domain prototypes.

    Each class row is pushed through ``R`` on its own so the result is
    reproducible by any single-row recomputation.
    """
    w_c = ens.C_di.weight.data.copy()
    w_d_s = ens.C_ds.weight.data[SOURCE_DOMAIN].copy()
    w_d_t = ens.C_ds.weight.data[TARGET_DOMAIN].copy()
    K = w_c.shape[0]
    w_s = np.zeros((K, ens.R.layer2.d_out))
    w_t = np.zeros_like(w_s)
    for i in range(K):
        w_s[i] = reconstruct(ens, Tensor(w_c[i:i + 1]), Tensor(w_d_s[None, :])).data[0]
        w_t[i] = reconstruct(ens, Tensor(w_c[i:i + 1]), Tensor(w_d_t[None, :])).data[0]
    bank.w_c, bank.w_d_s, bank.w_d_t, bank.w_s, bank.w_t = w_c, w_d_s, w_d_t, w_s, w_t
    bank.last_refresh_step = step
    bank.refresh_steps.append(step)
    ens.C_s.weight.data = w_s.copy()
    ens.C_t.weight.data = w_t.copy()


def head_logits(ens: NetworkEnsemble, x: Tensor | np.ndarray, head: str) -> np.ndarray:
    b = forward_all(ens, x)
    if head == "C_di":
        return b.logits.data
    if head == "C_s":
        return ens.C_s(b.f_g).data
    if head == "C_t":
        return ens.C_t(b.f_g).data
    if head == "C_ds":
        return b.domain_logits.data
    raise ValueError(f"unknown head {head!r}; expected one of {HEADS}")


def argmax_rows(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return np.argmax(logits, axis=1) if logits.shape[0] else np.zeros(0, dtype=np.int64)


def classify(ens: NetworkEnsemble, x: Tensor | np.ndarray, head: str = "C_di") -> np.ndarray:
    return argmax_rows(head_logits(ens, x, head))
