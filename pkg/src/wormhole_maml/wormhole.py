"""Multiplicative task parameter C and the two-phase inner loop.

The inner-loop update is phi_i = C_i * theta + additive gradient-descent
steps. C_i is task-specific, re-initialized for every episode, and is
itself adapted by gradient descent on the support loss *before* the
additive phase starts. With kind=identity the whole machinery reduces
exactly to the vanilla inner loop phi_i = theta - alpha * grad.

Sign convention: both phases take descent steps (minus step size times
gradient). C multiplies weights and biases of the selected layers, so a
scalar c = -1 flips the full affine map, which is what lets c act as a
sign changer for label-inverted tasks.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Sequence

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, StructuralError
from .models import ModelSpec, ParamSet, adaptation_loss, forward

if TYPE_CHECKING:
    from .tasks import Episode


class WormholeKind(Enum):
    IDENTITY = "identity"
    RAW_SCALAR = "raw_scalar"
    TANH_SCALAR = "tanh_scalar"
    PER_LAYER = "per_layer"
    PER_WEIGHT = "per_weight"


@dataclass(frozen=True)
class WormholeSpec:
    """Which multiplier parameterization to use and which layers it touches.

    ``selector=None`` means every layer.
    """

    kind: WormholeKind
    selector: frozenset[int] | None = None

    def selected(self, layer_index: int) -> bool:
        return self.selector is None or layer_index in self.selector


@dataclass(frozen=True)
class InnerLoopConfig:
    alpha: float = 1.0
    gamma: float = 1.0
    n_inner: int = 1
    n_c: int = 0
    c_init: float = 1.0
    second_order: bool = True
    # None follows second_order, mirroring the outer gradient being taken
    # through everything the tape recorded
    differentiate_through_c: bool | None = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ContractError(f"alpha must be >= 0, got {self.alpha}")
        if self.gamma < 0:
            raise ContractError(f"gamma must be >= 0, got {self.gamma}")
        if self.n_inner < 1:
            raise ContractError(f"n_inner must be >= 1, got {self.n_inner}")
        if self.n_c < 0:
            raise ContractError(f"n_c must be >= 0, got {self.n_c}")

    @property
    def through_c(self) -> bool:
        if self.differentiate_through_c is None:
            return self.second_order
        return self.differentiate_through_c


class WormholeParam:
    """Concrete multiplier state: raw tensors plus expansion metadata.

    raws layout by kind: identity -> (); raw_scalar/tanh_scalar -> one [1]
    tensor (the raw t for tanh_scalar); per_layer -> one [L] tensor over
    all layers; per_weight -> one tensor shaped like each parameter entry.
    """

    __slots__ = ("kind", "raws", "selector", "layer_order")

    def __init__(self, kind: WormholeKind, raws: tuple[Tensor, ...],
                 selector: frozenset[int] | None, layer_order: tuple[int, ...]):
        self.kind = kind
        self.raws = raws
        self.selector = selector
        self.layer_order = layer_order

    def selected(self, layer_index: int) -> bool:
        return self.selector is None or layer_index in self.selector

    def scalar_c(self) -> float:
        """Effective scalar multiplier for the scalar kinds."""
        if self.kind is WormholeKind.IDENTITY:
            return 1.0
        if self.kind is WormholeKind.RAW_SCALAR:
            return self.raws[0].data[0]
        if self.kind is WormholeKind.TANH_SCALAR:
            with ad.no_grad():
                return ad.tanh(self.raws[0]).data[0]
        raise ContractError(f"scalar_c undefined for kind {self.kind.value}")

    def raw_vector(self) -> list[float]:
        out: list[float] = []
        for r in self.raws:
            out.extend(r.data)
        return out


def init_wormhole(spec: WormholeSpec, params: ParamSet, c_init: float,
                  track: bool = True) -> WormholeParam:
    """Fresh multiplier state for one episode; raws join the active tape."""
    layers = params.layer_indices()
    if spec.selector is not None:
        bad = set(spec.selector) - set(layers)
        if bad:
            raise StructuralError(f"selector layers {sorted(bad)} not in model layers {layers}")
    kind = spec.kind
    if kind is WormholeKind.IDENTITY:
        return WormholeParam(kind, (), spec.selector, layers)

    def leaf(shape, values):
        return ad.tensor_new(shape, values, track=track)

    if kind in (WormholeKind.RAW_SCALAR, WormholeKind.TANH_SCALAR):
        raws = (leaf((1,), [c_init]),)
    elif kind is WormholeKind.PER_LAYER:
        raws = (leaf((len(layers),), [c_init] * len(layers)),)
    elif kind is WormholeKind.PER_WEIGHT:
        raws = tuple(
            leaf(e.tensor.shape, [c_init] * e.tensor.size) for e in params
        )
    else:
        raise ContractError(f"unknown wormhole kind {kind}")
    return WormholeParam(kind, raws, spec.selector, layers)


def _entry_multipliers(C: WormholeParam, params: ParamSet) -> list[Tensor | None]:
    """Per-entry multiplier tensor, or None where the multiplier is 1."""
    kind = C.kind
    if kind is WormholeKind.IDENTITY:
        return [None] * len(params)

    shared: Tensor | None = None
    if kind is WormholeKind.TANH_SCALAR:
        shared = ad.tanh(C.raws[0])
    elif kind is WormholeKind.RAW_SCALAR:
        shared = C.raws[0]

    per_layer_cache: dict[int, Tensor] = {}
    out: list[Tensor | None] = []
    for i, e in enumerate(params):
        if not C.selected(e.layer_index):
            out.append(None)
            continue
        if shared is not None:
            out.append(shared)
        elif kind is WormholeKind.PER_LAYER:
            raw = C.raws[0]
            if raw.shape[0] != len(C.layer_order):
                raise StructuralError(
                    f"per_layer raw has {raw.shape[0]} entries for {len(C.layer_order)} layers"
                )
            m = per_layer_cache.get(e.layer_index)
            if m is None:
                pos = C.layer_order.index(e.layer_index)
                m = ad.index_select(raw, [pos])
                per_layer_cache[e.layer_index] = m
            out.append(m)
        else:  # per_weight
            out.append(C.raws[i])
    return out


def effective_multiplier(C: WormholeParam, params: ParamSet) -> Tensor:
    """Expand C to one multiplier per parameter scalar (flattened, length d_theta)."""
    mults = _entry_multipliers(C, params)
    pieces = []
    for e, m in zip(params, mults):
        n = e.tensor.size
        if m is None:
            pieces.append(ad.ones((n,)))
        elif m.size == n:
            pieces.append(ad.reshape(m, (n,)))
        else:
            pieces.append(ad.mul(ad.ones((n,)), ad.reshape(m, (1,))))
    return ad.concat(pieces)


def multiplier_stats(C: WormholeParam, params: ParamSet) -> tuple[float, float, float]:
    """(mean, min, max) of the effective multiplier, as plain values."""
    with ad.no_grad():
        m = effective_multiplier(C, params)
    vals = m.data
    return (sum(vals) / len(vals), min(vals), max(vals))


def apply_c(theta: ParamSet, C: WormholeParam) -> ParamSet:
    """Elementwise product C * theta as graph nodes.

    Identity (and unselected layers) pass the original tensors through
    untouched, so the vanilla path is bit-identical to plain MAML.
    """
    mults = _entry_multipliers(C, theta)
    new = []
    for e, m in zip(theta, mults):
        if m is None:
            new.append(e.tensor)
        elif m.shape == e.tensor.shape:
            new.append(ad.mul(e.tensor, m))
        else:
            new.append(ad.mul(e.tensor, ad.reshape(m, (1,) * (len(e.tensor.shape) - 1) + (m.size,))))
    return theta.with_tensors(new)


def adapt_c(theta: ParamSet, spec: ModelSpec, C0: WormholeParam,
            support: tuple[Tensor, Tensor], cfg: InnerLoopConfig,
            loss: str) -> WormholeParam:
    """n_c descent steps on the raw multiplier values, support loss only.

    Each step evaluates the loss at C * theta with no additive adaptation,
    i.e. C settles before the phi phase begins. Steps stay on the tape when
    cfg.through_c so the outer gradient can see them.
    """
    if cfg.n_c == 0:
        return C0
    if C0.kind is WormholeKind.IDENTITY:
        raise ContractError("identity wormhole cannot be adapted (n_c > 0)")
    sx, sy = support
    C = C0
    for _ in range(cfg.n_c):
        phi0 = apply_c(theta, C)
        step_loss = adaptation_loss(loss, forward(spec, phi0, sx), sy)
        # with through_c off the step gradients come back untracked, which
        # cuts the outer gradient's path through the C trajectory while the
        # raw chain itself stays differentiable for the next step
        grads = ad.grad(step_loss, C.raws, create_graph=cfg.through_c)
        raws = tuple(
            ad.sub(r, ad.scalar_mul(cfg.gamma, g)) for r, g in zip(C.raws, grads)
        )
        C = WormholeParam(C.kind, raws, C.selector, C.layer_order)
    return C


def adapt_phi(theta: ParamSet, spec: ModelSpec, C: WormholeParam,
              support: tuple[Tensor, Tensor], cfg: InnerLoopConfig,
              loss: str, loss_trace: list[float] | None = None) -> ParamSet:
    """phi <- C*theta, then n_inner descent steps on the support loss.

    With second_order the steps stay on the tape (gradients flow through
    the inner gradients); otherwise each step gradient is detached, the
    first-order approximation.
    """
    sx, sy = support
    phi = apply_c(theta, C)
    for _ in range(cfg.n_inner):
        step_loss = adaptation_loss(loss, forward(spec, phi, sx), sy)
        if loss_trace is not None:
            loss_trace.append(step_loss.item())
        grads = ad.grad(step_loss, phi.tensors(), create_graph=cfg.second_order)
        new_tensors = [
            ad.sub(p, ad.scalar_mul(cfg.alpha, g)) for p, g in zip(phi.tensors(), grads)
        ]
        phi = phi.with_tensors(new_tensors)
    if loss_trace is not None:
        with ad.no_grad():
            loss_trace.append(adaptation_loss(loss, forward(spec, phi, sx), sy).item())
    return phi


def inner_adapt(theta: ParamSet, spec: ModelSpec, wh: WormholeSpec,
                episode: "Episode", cfg: InnerLoopConfig
                ) -> tuple[ParamSet, WormholeParam, list[float]]:
    """Full per-episode adaptation: init C, adapt C, then adapt phi.

    Returns the adapted parameters, the final C and the per-step support
    losses of the phi phase (n_inner + 1 values, final state included).
    """
    if episode.support_x.shape[0] < 1:
        raise ContractError("episode support set is empty")
    C = init_wormhole(wh, theta, cfg.c_init)
    support = (episode.support_x, episode.support_y)
    if wh.kind is not WormholeKind.IDENTITY and cfg.n_c > 0:
        C = adapt_c(theta, spec, C, support, cfg, episode.loss)
    trace: list[float] = []
    phi = adapt_phi(theta, spec, C, support, cfg, episode.loss, trace)
    return phi, C, trace
