"""Parameter containers, functional forward passes and loss functions.

Forward passes take the parameters explicitly so that adapted per-task
parameters (which are graph nodes) can be pushed through the same code
path as the meta-parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from random import Random
from typing import Sequence

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, StructuralError


class ModelKind(Enum):
    LINEAR_SCALAR_OUT = "linear_scalar_out"
    LINEAR_VECTOR_FILTER = "linear_vector_filter"
    MLP = "mlp"


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    layer_sizes: tuple[int, ...]
    bias: tuple[bool, ...]

    @staticmethod
    def linear_scalar_out(d: int) -> "ModelSpec":
        return ModelSpec(ModelKind.LINEAR_SCALAR_OUT, (d, 1), (True,))

    @staticmethod
    def linear_vector_filter(n: int) -> "ModelSpec":
        return ModelSpec(ModelKind.LINEAR_VECTOR_FILTER, (n,), (False,))

    @staticmethod
    def mlp(sizes: Sequence[int], bias: Sequence[bool] | None = None) -> "ModelSpec":
        sizes = tuple(sizes)
        if len(sizes) < 2:
            raise StructuralError("mlp needs at least input and output sizes")
        if bias is None:
            bias = (True,) * (len(sizes) - 1)
        bias = tuple(bias)
        if len(bias) != len(sizes) - 1:
            raise StructuralError("need one bias flag per affine layer")
        return ModelSpec(ModelKind.MLP, sizes, bias)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]


@dataclass(frozen=True)
class ParamEntry:
    name: str
    tensor: Tensor
    layer_index: int


class ParamSet:
    """Ordered, uniquely named collection of parameter tensors."""

    __slots__ = ("entries",)

    def __init__(self, entries: Sequence[ParamEntry]):
        entries = tuple(entries)
        names = [e.name for e in entries]
        if len(set(names)) != len(names):
            raise StructuralError(f"duplicate parameter names: {names}")
        self.entries = entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def get(self, name: str) -> Tensor:
        for e in self.entries:
            if e.name == name:
                return e.tensor
        raise StructuralError(f"no parameter named {name!r}")

    def tensors(self) -> list[Tensor]:
        return [e.tensor for e in self.entries]

    @property
    def total_dim(self) -> int:
        return sum(e.tensor.size for e in self.entries)

    def layer_indices(self) -> tuple[int, ...]:
        seen: list[int] = []
        for e in self.entries:
            if e.layer_index not in seen:
                seen.append(e.layer_index)
        return tuple(seen)

    def flatten(self) -> list[float]:
        out: list[float] = []
        for e in self.entries:
            out.extend(e.tensor.data)
        return out

    def unflatten(self, values: Sequence[float]) -> "ParamSet":
        if len(values) != self.total_dim:
            raise StructuralError(
                f"expected {self.total_dim} values, got {len(values)}"
            )
        new = []
        off = 0
        for e in self.entries:
            n = e.tensor.size
            t = ad.tensor_new(e.tensor.shape, values[off:off + n])
            new.append(ParamEntry(e.name, t, e.layer_index))
            off += n
        return ParamSet(new)

    def with_tensors(self, tensors: Sequence[Tensor]) -> "ParamSet":
        if len(tensors) != len(self.entries):
            raise StructuralError("tensor count mismatch")
        return ParamSet(
            [ParamEntry(e.name, t, e.layer_index) for e, t in zip(self.entries, tensors)]
        )

    def tracked_copy(self) -> "ParamSet":
        """Fresh leaf tensors (same values) on the active tape."""
        return self.with_tensors(
            [ad.tensor_new(e.tensor.shape, e.tensor.data, track=True) for e in self.entries]
        )

    def l2_norm(self) -> float:
        return math.sqrt(sum(v * v for v in self.flatten()))


def init_params(spec: ModelSpec, rng: Random, wavelet_demo_init: bool = False) -> ParamSet:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases.

    ``wavelet_demo_init`` switches the vector filter to Uniform(-2, 3),
    the wide init used for the figure-style wavelet demonstration runs.
    """
    if not spec.layer_sizes:
        raise StructuralError("empty layer sizes")
    entries: list[ParamEntry] = []
    if spec.kind is ModelKind.LINEAR_VECTOR_FILTER:
        n = spec.layer_sizes[0]
        if wavelet_demo_init:
            w = [rng.uniform(-2.0, 3.0) for _ in range(n)]
        else:
            bound = 1.0 / math.sqrt(n)
            w = [rng.uniform(-bound, bound) for _ in range(n)]
        entries.append(ParamEntry("w", ad.tensor_new((n,), w), 0))
        return ParamSet(entries)

    for layer, (fan_in, fan_out) in enumerate(
        zip(spec.layer_sizes[:-1], spec.layer_sizes[1:])
    ):
        bound = 1.0 / math.sqrt(fan_in)
        w = [rng.uniform(-bound, bound) for _ in range(fan_out * fan_in)]
        entries.append(ParamEntry(f"W{layer}", ad.tensor_new((fan_out, fan_in), w), layer))
        if spec.bias[layer]:
            entries.append(
                ParamEntry(f"b{layer}", ad.tensor_new((fan_out,), [0.0] * fan_out), layer)
            )
    return ParamSet(entries)


def forward(spec: ModelSpec, params: ParamSet, x: Tensor) -> Tensor:
    """Batch of inputs [batch, d] -> pre-activation logits.

    linear_scalar_out / linear_vector_filter emit [batch, 1]; mlp emits
    [batch, classes].
    """
    if len(x.shape) != 2 or x.shape[1] != spec.input_dim:
        raise StructuralError(
            f"input shape {x.shape} does not match model input dim {spec.input_dim}"
        )

    if spec.kind is ModelKind.LINEAR_VECTOR_FILTER:
        w = params.get("w")
        return ad.matmul(x, ad.reshape(w, (w.shape[0], 1)))

    h = x
    n_layers = len(spec.layer_sizes) - 1
    for layer in range(n_layers):
        w = params.get(f"W{layer}")
        h = ad.matmul(h, ad.transpose(w))
        if spec.bias[layer]:
            h = ad.add(h, params.get(f"b{layer}"))
        if layer < n_layers - 1:
            h = ad.relu(h)
    return h


def _as_column(t: Tensor) -> Tensor:
    if len(t.shape) == 1:
        return ad.reshape(t, (t.shape[0], 1))
    return t


def bce_with_logits(logits: Tensor, labels: Tensor) -> Tensor:
    """Binary cross-entropy against {0,1} labels, SUMMED over the batch.

    Computed stably as sum(softplus((1 - 2y) * z)).
    """
    z = _as_column(logits)
    y = _as_column(labels)
    if z.shape != y.shape:
        raise StructuralError(f"logits {z.shape} vs labels {y.shape}")
    signs = []
    for v in y.data:
        if v not in (0.0, 1.0):
            raise ContractError(f"bce labels must be 0 or 1, got {v}")
        signs.append(1.0 - 2.0 * v)
    sign_t = ad.tensor_new(z.shape, signs)
    return ad.sum_all(ad.softplus(ad.mul(z, sign_t)))


def softmax_ce(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Cross-entropy between row softmax and integer labels, MEAN over batch."""
    if len(logits.shape) != 2:
        raise StructuralError(f"softmax_ce needs [batch, k] logits, got {logits.shape}")
    b, k = logits.shape
    labels = list(labels)
    if len(labels) != b:
        raise StructuralError(f"{b} rows but {len(labels)} labels")
    onehot = [0.0] * (b * k)
    for r, lab in enumerate(labels):
        if not 0 <= lab < k:
            raise ContractError(f"label {lab} outside [0, {k})")
        onehot[r * k + int(lab)] = 1.0
    oh = ad.tensor_new((b, k), onehot)
    lse = ad.logsumexp_rows(logits)
    picked = ad.sum_axis(ad.mul(logits, oh), 1)
    return ad.mean_all(ad.sub(lse, picked))


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Sum of squared differences divided by the batch count (dim 0)."""
    if pred.shape != target.shape:
        raise StructuralError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    batch = pred.shape[0] if pred.shape else 1
    d = ad.sub(pred, target)
    return ad.scalar_mul(1.0 / batch, ad.sum_all(ad.square(d)))


def episode_objective(name: str, logits: Tensor, targets: Tensor) -> Tensor:
    """Per-episode outer/query objective by loss selector ('bce'|'mse'|'ce').

    bce is the summed batch loss; mse and ce are batch means. These are the
    units the per-task metrics are reported in.
    """
    if name == "bce":
        return bce_with_logits(logits, targets)
    if name == "mse":
        return mse(logits, _as_column(targets))
    if name == "ce":
        return softmax_ce(logits, [int(v) for v in targets.data])
    raise ContractError(f"unknown loss selector {name!r}")


def adaptation_loss(name: str, logits: Tensor, targets: Tensor) -> Tensor:
    """Inner-loop loss: the episode objective, batch-mean normalized.

    Dividing the summed bce by the shot count keeps the adaptation step
    sizes in a stable regime independent of K; mse and ce are already
    means. The outer objective stays in summed units (see
    ``episode_objective``).
    """
    obj = episode_objective(name, logits, targets)
    if name == "bce":
        batch = logits.shape[0] if logits.shape else 1
        return ad.scalar_mul(1.0 / batch, obj)
    return obj
