"""Analytical machinery for the scalar multiplier and gradient-conflict
diagnostics.

The exact c-gradient of the summed binary cross-entropy, its small-c
quadratic approximation and the resulting fixed point c*, plus pairwise
cosine similarity of per-task meta-gradients (the conflict picture that
motivates the multiplicative shortcut).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from random import Random
from typing import Sequence

from . import autodiff as ad
from .autodiff import Tape
from .errors import ContractError, DegenerateInputError, StructuralError
from .models import ModelSpec, ParamSet, episode_objective, forward
from .tasks import Episode
from .wormhole import InnerLoopConfig, WormholeSpec, inner_adapt


def _sigmoid(v: float) -> float:
    if v >= 0.0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def dloss_dc(z: Sequence[float], y: Sequence[int], c: float) -> float:
    """Exact d/dc of the summed BCE of predictions sigmoid(c * z_i).

    Evaluates -sum_{y=1}(1 - sigmoid(c z_i)) z_i - sum_{y=0} sigmoid(c z_i) z_i.
    """
    if len(z) != len(y):
        raise StructuralError(f"{len(z)} z values but {len(y)} labels")
    total = 0.0
    for zi, yi in zip(z, y):
        s = _sigmoid(c * zi)
        if yi == 1:
            total += -(1.0 - s) * zi
        elif yi == 0:
            total += -s * zi
        else:
            raise ContractError(f"labels must be 0 or 1, got {yi}")
    return total


def taylor_dloss_dc(z: Sequence[float], y: Sequence[int], c: float) -> float:
    """Small-c approximation of ``dloss_dc`` with sigmoid(cz) ~ cz."""
    if len(z) != len(y):
        raise StructuralError(f"{len(z)} z values but {len(y)} labels")
    total = 0.0
    for zi, yi in zip(z, y):
        if yi == 1:
            total += -(1.0 - c * zi) * zi
        else:
            total += -(c * zi) * zi
    return total


def labels_from_z(z: Sequence[float], delta_tau: float) -> list[int]:
    """y_i = I[z_i + delta_tau > 0], the well-specified labeling."""
    return [1 if zi + delta_tau > 0 else 0 for zi in z]


def c_star(z: Sequence[float], delta_tau: float) -> float:
    """Fixed point of the small-c approximate gradient.

    c* = sum_i I[z_i + delta_tau > 0] z_i / sum_i z_i^2, the stationary
    scale of the multiplier, which is 1 for a well-calibrated model on a
    balanced batch.
    """
    denom = sum(zi * zi for zi in z)
    if denom == 0.0:
        raise DegenerateInputError("c* undefined: all z are zero")
    num = sum(zi for zi in z if zi + delta_tau > 0)
    return num / denom


def c_star_half_expansion(z: Sequence[float], y: Sequence[int]) -> float | None:
    """Fixed point under the consistent expansion sigmoid(cz) ~ 1/2 + cz/4.

    The sigmoid(cz) ~ cz form drops the 1/2 offset; carrying it through
    gives c = 2 sum_i z_i / (sum_{y=1} z_i^2 - sum_{y=0} z_i^2), which is
    degenerate (returns None) for symmetric balanced batches. Both forms
    are exposed for comparison; the primary ``c_star`` follows the
    plain-cz form, which is the one with the c*=1 calibration story.
    """
    if len(z) != len(y):
        raise StructuralError(f"{len(z)} z values but {len(y)} labels")
    num = 2.0 * sum(z)
    denom = sum(zi * zi if yi == 1 else -zi * zi for zi, yi in zip(z, y))
    scale = sum(zi * zi for zi in z)
    if scale == 0.0:
        raise DegenerateInputError("c undefined: all z are zero")
    if abs(denom) < 1e-12 * scale:
        return None
    return num / denom


def calibrated_avg_weight(d: int, tau: float = 0.5) -> float:
    """Per-coordinate weight w making c* -> 1 for the averaging model.

    For z = w (avg(x) - tau) with x ~ U[0,1]^d and centered tau the limit
    of c* is 1 / (w * sigma_avg * sqrt(2 pi)); solving for 1 gives
    w = 1 / (sigma_avg * sqrt(2 pi)) with sigma_avg = sqrt(1 / (12 d)).
    Returned as the per-coordinate weight of W = (w/d) * ones.
    """
    sigma_avg = math.sqrt(1.0 / (12.0 * d))
    return 1.0 / (sigma_avg * math.sqrt(2.0 * math.pi))


def c_star_convergence(rng: Random, w: Sequence[float], tau: float,
                       batch_sizes: Sequence[int], trials: int) -> list[float]:
    """Median |c* - 1| per batch size for a well-specified averaging model.

    z_i = w . x_i - tau * sum(w), so the model boundary coincides with the
    label boundary (delta_tau = 0) and labels follow the indicator rule.
    With centered tau the batches are balanced in distribution and the
    medians shrink as K grows.
    """
    sizes = list(batch_sizes)
    if any(b <= 0 for b in sizes) or sorted(sizes) != sizes:
        raise ContractError("batch sizes must be positive and increasing")
    if all(v == 0.0 for v in w):
        raise DegenerateInputError("weight vector is all zero")
    d = len(w)
    offset = tau * sum(w)
    medians = []
    for k in sizes:
        errs = []
        for _ in range(trials):
            z = []
            for _ in range(k):
                x = [rng.random() for _ in range(d)]
                z.append(sum(wi * xi for wi, xi in zip(w, x)) - offset)
            errs.append(abs(c_star(z, 0.0) - 1.0))
        errs.sort()
        m = len(errs) // 2
        medians.append(errs[m] if len(errs) % 2 else 0.5 * (errs[m - 1] + errs[m]))
    return medians


# ---------------------------------------------------------------------------
# conflict diagnostics


@dataclass
class ConflictResult:
    """Pairwise cosine matrix of per-episode meta-gradients.

    Episodes with zero-norm gradients get the sentinel value 0 in their
    off-diagonal entries and are flagged in ``zero_norm``.
    """

    matrix: list[list[float]]
    zero_norm: list[bool]

    @property
    def n(self) -> int:
        return len(self.matrix)

    def off_diagonal(self) -> list[float]:
        return [
            self.matrix[i][j]
            for i in range(self.n)
            for j in range(self.n)
            if i != j
        ]


def episode_meta_gradient(theta: ParamSet, spec: ModelSpec, wh: WormholeSpec,
                          episode: Episode, cfg: InnerLoopConfig) -> list[float]:
    """Flattened gradient of the episode's query objective w.r.t. theta."""
    with Tape():
        leaves = theta.tracked_copy()
        phi, _C, _trace = inner_adapt(leaves, spec, wh, episode, cfg)
        qloss = episode_objective(
            episode.loss, forward(spec, phi, episode.query_x), episode.query_y
        )
        grads = ad.grad(qloss, leaves.tensors())
    flat: list[float] = []
    for g in grads:
        flat.extend(g.data)
    return flat


def conflict_matrix(theta: ParamSet, spec: ModelSpec, wh: WormholeSpec,
                    episodes: Sequence[Episode], cfg: InnerLoopConfig) -> ConflictResult:
    """Cosine similarity between per-episode meta-gradients on theta."""
    if len(episodes) < 2:
        raise ContractError("need at least two episodes for a conflict matrix")
    grads = [episode_meta_gradient(theta, spec, wh, ep, cfg) for ep in episodes]
    norms = [math.sqrt(sum(v * v for v in g)) for g in grads]
    n = len(grads)
    mat = [[1.0] * n for _ in range(n)]
    zero = [nm == 0.0 for nm in norms]
    for i in range(n):
        for j in range(i + 1, n):
            if zero[i] or zero[j]:
                cos = 0.0
            else:
                dot = sum(a * b for a, b in zip(grads[i], grads[j]))
                cos = dot / (norms[i] * norms[j])
            mat[i][j] = cos
            mat[j][i] = cos
    return ConflictResult(matrix=mat, zero_norm=zero)
