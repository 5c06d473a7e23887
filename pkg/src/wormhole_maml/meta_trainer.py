"""Outer loop: meta-batch assembly, gradients through inner adaptation,
SGD/Adam updates, evaluation and metric collection.

Per-episode adaptation runs on its own tape; the outer gradient is the sum
of per-episode meta-gradients accumulated in episode order, so results are
deterministic for a given seed.
"""

from __future__ import annotations

import math
import time
from array import array
from dataclasses import dataclass, field, replace
from enum import Enum
from random import Random
from typing import Sequence

from . import autodiff as ad
from .autodiff import Tape
from .errors import ContractError, SamplingError, TrainingError
from .models import ModelSpec, ParamSet, episode_objective, forward, init_params
from .seeding import spawn
from .tasks import (
    Episode,
    MnistDataset,
    load_mnist_idx,
    sample_avg_threshold,
    sample_mnist_episode,
    sample_wavelet,
    synthetic_mnist,
)
from .wormhole import (
    InnerLoopConfig,
    WormholeKind,
    WormholeSpec,
    inner_adapt,
    multiplier_stats,
)

DIVERGENCE_LIMIT = 1e6

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# fixed seed for the generated stand-in digit data: it plays the role of a
# dataset on disk, so it must not vary with the run seed
SYNTHETIC_MNIST_SEED = 745

# balance rejection can be infeasible for extreme thresholds; redraw the
# whole task (fresh tau) rather than abort training
MAX_TASK_REDRAWS = 100


class TaskKind(Enum):
    AVG_THRESHOLD = "avg_threshold"
    WAVELET = "wavelet"
    MNIST = "mnist"


class OptimizerKind(Enum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass(frozen=True)
class AvgThresholdParams:
    d: int = 5
    k_support: int = 10
    k_query: int = 10
    tau_min: float = 0.0
    tau_max: float = 1.0
    balanced: bool = True


@dataclass(frozen=True)
class WaveletParams:
    n_grid: int = 50
    k: int = 10
    sigma: float = 1.0
    amplitude: float = 0.8
    mu_min: float = -2.5
    mu_max: float = 2.5
    # wide Uniform(-2, 3) filter init, the published demonstration setting
    demo_init: bool = False


@dataclass(frozen=True)
class MnistParams:
    data_dir: str | None = None
    query_per_class: int = 5


@dataclass(frozen=True)
class MetaConfig:
    task: TaskKind
    model: ModelSpec
    wormhole: WormholeSpec
    inner: InnerLoopConfig
    beta: float = 0.1
    optimizer: OptimizerKind = OptimizerKind.SGD
    epochs: int = 100
    meta_batch: int = 10
    eval_episodes: int = 200
    curve_eval_episodes: int = 20
    seed: int = 0
    task_params: AvgThresholdParams | WaveletParams | MnistParams = field(
        default_factory=AvgThresholdParams
    )

    def __post_init__(self):
        if self.beta <= 0:
            raise ContractError(f"beta must be > 0, got {self.beta}")
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.meta_batch < 1:
            raise ContractError(f"meta_batch must be >= 1, got {self.meta_batch}")


class EpisodeSource:
    """Sampler closures for a config; mnist keeps separate train/eval pools."""

    def __init__(self, cfg: MetaConfig):
        self.task = cfg.task
        self.synthetic = False
        p = cfg.task_params
        if cfg.task is TaskKind.AVG_THRESHOLD:
            assert isinstance(p, AvgThresholdParams)
            self._train = self._eval = lambda rng: self._redraw(
                lambda: sample_avg_threshold(
                    rng, p.d, p.k_support, p.k_query, (p.tau_min, p.tau_max), p.balanced
                )
            )
        elif cfg.task is TaskKind.WAVELET:
            assert isinstance(p, WaveletParams)
            self._train = self._eval = lambda rng: sample_wavelet(
                rng, p.n_grid, p.k, p.sigma, p.amplitude, (p.mu_min, p.mu_max)
            )
        elif cfg.task is TaskKind.MNIST:
            assert isinstance(p, MnistParams)
            train_ds, eval_ds, synthetic = load_mnist_pools(p.data_dir)
            self.synthetic = synthetic
            self._train = lambda rng: sample_mnist_episode(train_ds, rng, p.query_per_class)
            self._eval = lambda rng: sample_mnist_episode(eval_ds, rng, p.query_per_class)
        else:
            raise ContractError(f"unknown task {cfg.task}")

    @staticmethod
    def _redraw(draw):
        for _ in range(MAX_TASK_REDRAWS):
            try:
                return draw()
            except SamplingError:
                continue
        raise SamplingError(f"no balanceable task found in {MAX_TASK_REDRAWS} redraws")

    def sample_train(self, rng: Random) -> Episode:
        return self._train(rng)

    def sample_eval(self, rng: Random) -> Episode:
        return self._eval(rng)


_mnist_pool_cache: dict = {}


def load_mnist_pools(data_dir: str | None) -> tuple[MnistDataset, MnistDataset, bool]:
    """(meta-train pool, meta-test pool, synthetic flag).

    Real IDX files are used when ``data_dir`` holds the canonical
    train/t10k file pairs (optionally gzipped); otherwise both pools are
    generated synthetically with disjoint seeds.
    """
    key = data_dir
    if key in _mnist_pool_cache:
        return _mnist_pool_cache[key]
    result = None
    if data_dir is not None:
        from pathlib import Path

        base = Path(data_dir)
        for suffix in ("", ".gz"):
            ti = base / f"train-images-idx3-ubyte{suffix}"
            tl = base / f"train-labels-idx1-ubyte{suffix}"
            ei = base / f"t10k-images-idx3-ubyte{suffix}"
            el = base / f"t10k-labels-idx1-ubyte{suffix}"
            if ti.exists() and tl.exists() and ei.exists() and el.exists():
                result = (load_mnist_idx(ti, tl), load_mnist_idx(ei, el), False)
                break
    if result is None:
        train = synthetic_mnist(SYNTHETIC_MNIST_SEED, n_per_class=200)
        test = synthetic_mnist(SYNTHETIC_MNIST_SEED + 1, n_per_class=100)
        result = (train, test, True)
    _mnist_pool_cache[key] = result
    return result


# ---------------------------------------------------------------------------
# optimizers


def sgd_step(values: array, grads: array, beta: float) -> array:
    return array("d", [v - beta * g for v, g in zip(values, grads)])


def adam_step(values: array, grads: array, m: array, v: array, step: int,
              beta: float, b1: float = ADAM_BETA1, b2: float = ADAM_BETA2,
              eps: float = ADAM_EPS) -> tuple[array, array, array]:
    """One bias-corrected Adam update; ``step`` counts from 1."""
    new_vals = array("d", bytes(8 * len(values)))
    new_m = array("d", bytes(8 * len(values)))
    new_v = array("d", bytes(8 * len(values)))
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for i in range(len(values)):
        g = grads[i]
        mi = b1 * m[i] + (1.0 - b1) * g
        vi = b2 * v[i] + (1.0 - b2) * g * g
        new_m[i] = mi
        new_v[i] = vi
        new_vals[i] = values[i] - beta * (mi / c1) / (math.sqrt(vi / c2) + eps)
    return new_vals, new_m, new_v


class Optimizer:
    def __init__(self, kind: OptimizerKind, beta: float):
        self.kind = kind
        self.beta = beta
        self.step_count = 0
        self._m: list[array] | None = None
        self._v: list[array] | None = None

    def step(self, theta: ParamSet, grads: list[array]) -> ParamSet:
        self.step_count += 1
        if self.kind is OptimizerKind.SGD:
            new = [
                ad.tensor_new(e.tensor.shape, sgd_step(e.tensor.data, g, self.beta))
                for e, g in zip(theta, grads)
            ]
            return theta.with_tensors(new)
        if self._m is None:
            self._m = [array("d", bytes(8 * e.tensor.size)) for e in theta]
            self._v = [array("d", bytes(8 * e.tensor.size)) for e in theta]
        new = []
        for i, (e, g) in enumerate(zip(theta, grads)):
            vals, self._m[i], self._v[i] = adam_step(
                e.tensor.data, g, self._m[i], self._v[i], self.step_count, self.beta
            )
            new.append(ad.tensor_new(e.tensor.shape, vals))
        return theta.with_tensors(new)


# ---------------------------------------------------------------------------
# training


@dataclass
class StepMetrics:
    task_losses: list[float]
    c_mean: float
    c_min: float
    c_max: float


def meta_step(theta: ParamSet, episodes: Sequence[Episode], cfg: MetaConfig,
              opt: Optimizer, epoch: int | None = None) -> tuple[ParamSet, Optimizer, StepMetrics]:
    """One outer update: sum of query-loss meta-gradients over the batch."""
    grad_accum = [array("d", bytes(8 * e.tensor.size)) for e in theta]
    task_losses: list[float] = []
    c_means: list[float] = []
    c_mins: list[float] = []
    c_maxs: list[float] = []

    for idx, ep in enumerate(episodes):
        with Tape():
            leaves = theta.tracked_copy()
            phi, C, _trace = inner_adapt(leaves, cfg.model, cfg.wormhole, ep, cfg.inner)
            qloss = episode_objective(ep.loss, forward(cfg.model, phi, ep.query_x), ep.query_y)
            val = qloss.item()
            if not math.isfinite(val) or val > DIVERGENCE_LIMIT:
                raise TrainingError(
                    f"query loss {val} exceeds the divergence guard",
                    epoch=epoch, task_index=idx,
                )
            grads = ad.grad(qloss, leaves.tensors())
            for acc, g in zip(grad_accum, grads):
                gd = g.data
                for i in range(len(acc)):
                    acc[i] += gd[i]
            stats = multiplier_stats(C, leaves)
        task_losses.append(val)
        c_means.append(stats[0])
        c_mins.append(stats[1])
        c_maxs.append(stats[2])

    theta = opt.step(theta, grad_accum)
    metrics = StepMetrics(
        task_losses=task_losses,
        c_mean=sum(c_means) / len(c_means),
        c_min=min(c_mins),
        c_max=max(c_maxs),
    )
    return theta, opt, metrics


def _eval_inner(cfg: MetaConfig) -> InnerLoopConfig:
    # evaluation needs no outer gradient; dropping the graph bookkeeping
    # changes nothing numerically
    return replace(cfg.inner, second_order=False, differentiate_through_c=False)


def _error_rate(loss: str, logits: ad.Tensor, y: ad.Tensor) -> float | None:
    if loss == "bce":
        wrong = 0
        for i in range(logits.shape[0]):
            pred = 1.0 if logits.data[i] > 0.0 else 0.0
            wrong += pred != y.data[i]
        return wrong / logits.shape[0]
    if loss == "ce":
        b, k = logits.shape
        wrong = 0
        for r in range(b):
            row = logits.data[r * k:(r + 1) * k]
            pred = max(range(k), key=lambda j: row[j])
            wrong += pred != int(y.data[r])
        return wrong / b
    return None


def evaluate_episodes(theta: ParamSet, cfg: MetaConfig,
                      episodes: Sequence[Episode]) -> dict:
    """Adapt on each support set, score on the query set; theta untouched."""
    inner = _eval_inner(cfg)
    losses: list[float] = []
    errors: list[float] = []
    for ep in episodes:
        with Tape():
            leaves = theta.tracked_copy()
            phi, _C, _trace = inner_adapt(leaves, cfg.model, cfg.wormhole, ep, inner)
            with ad.no_grad():
                logits = forward(cfg.model, phi, ep.query_x)
                loss = episode_objective(ep.loss, logits, ep.query_y)
                err = _error_rate(ep.loss, logits, ep.query_y)
        losses.append(loss.item())
        if err is not None:
            errors.append(err)
    return {
        "mean_loss": sum(losses) / len(losses),
        "mean_error": (sum(errors) / len(errors)) if errors else None,
    }


def evaluate(theta: ParamSet, cfg: MetaConfig, n: int, rng: Random,
             source: EpisodeSource | None = None) -> dict:
    if n < 1:
        raise ContractError(f"need n >= 1 eval episodes, got {n}")
    source = source or EpisodeSource(cfg)
    episodes = [source.sample_eval(rng) for _ in range(n)]
    return evaluate_episodes(theta, cfg, episodes)


def adapted_c_probe(theta: ParamSet, cfg: MetaConfig, episodes: Sequence[Episode]) -> list[float]:
    """Adapted scalar multiplier per episode (scalar wormhole kinds only)."""
    inner = _eval_inner(cfg)
    values = []
    for ep in episodes:
        with Tape():
            leaves = theta.tracked_copy()
            _phi, C, _trace = inner_adapt(leaves, cfg.model, cfg.wormhole, ep, inner)
            values.append(C.scalar_c())
    return values


METRIC_NAMES = {
    TaskKind.AVG_THRESHOLD: "query_bce_sum_per_episode_mean",
    TaskKind.WAVELET: "query_mse_per_episode_mean",
    TaskKind.MNIST: "query_error_rate_mean",
}


@dataclass
class RunResult:
    """Per-epoch curves plus final summary for one training run.

    ``wall_clock_s`` is informational and excluded from serialized
    artifacts so identical seeds produce bit-identical files.
    """

    task: str
    wormhole_kind: str
    n_inner: int
    seed: int
    train_loss: list[float]
    eval_loss: list[float]
    eval_error: list[float | None]
    c_mean: list[float]
    c_min: list[float]
    c_max: list[float]
    final_eval_loss: float | None
    final_eval_error: float | None
    final_metric: float | None
    metric_name: str
    theta_norm: float
    c_probe: list[float] | None
    synthetic_data: bool
    complete: bool
    error: str | None
    abort_epoch: int | None
    wall_clock_s: float

    def to_json_dict(self) -> dict:
        d = {
            "task": self.task,
            "wormhole_kind": self.wormhole_kind,
            "n_inner": self.n_inner,
            "seed": self.seed,
            "metric_name": self.metric_name,
            "final_metric": self.final_metric,
            "final_eval_loss": self.final_eval_loss,
            "final_eval_error": self.final_eval_error,
            "theta_norm": self.theta_norm,
            "c_probe": self.c_probe,
            "synthetic_data": self.synthetic_data,
            "complete": self.complete,
            "error": self.error,
            "abort_epoch": self.abort_epoch,
            "epochs": {
                "train_loss": self.train_loss,
                "eval_loss": self.eval_loss,
                "eval_error": self.eval_error,
                "c_mean": self.c_mean,
                "c_min": self.c_min,
                "c_max": self.c_max,
            },
        }
        return d


def train(cfg: MetaConfig) -> RunResult:
    """Run the outer loop; returns a partial, flagged result on divergence."""
    t0 = time.perf_counter()
    source = EpisodeSource(cfg)
    demo = isinstance(cfg.task_params, WaveletParams) and cfg.task_params.demo_init
    theta = init_params(cfg.model, spawn(cfg.seed, "init"), wavelet_demo_init=demo)
    rng_train = spawn(cfg.seed, "train-episodes")
    rng_curve = spawn(cfg.seed, "curve-eval")
    curve_set = [source.sample_eval(rng_curve) for _ in range(cfg.curve_eval_episodes)]
    opt = Optimizer(cfg.optimizer, cfg.beta)

    train_loss: list[float] = []
    eval_loss: list[float] = []
    eval_error: list[float | None] = []
    c_mean: list[float] = []
    c_min: list[float] = []
    c_max: list[float] = []
    error_msg = None
    abort_epoch = None

    for epoch in range(cfg.epochs):
        episodes = [source.sample_train(rng_train) for _ in range(cfg.meta_batch)]
        try:
            theta, opt, metrics = meta_step(theta, episodes, cfg, opt, epoch=epoch)
        except TrainingError as exc:
            error_msg = str(exc)
            abort_epoch = epoch
            break
        train_loss.append(sum(metrics.task_losses) / len(metrics.task_losses))
        ev = evaluate_episodes(theta, cfg, curve_set)
        eval_loss.append(ev["mean_loss"])
        eval_error.append(ev["mean_error"])
        c_mean.append(metrics.c_mean)
        c_min.append(metrics.c_min)
        c_max.append(metrics.c_max)

    complete = error_msg is None
    final_eval_loss = None
    final_eval_error = None
    final_metric = None
    c_probe = None
    if complete:
        final = evaluate(theta, cfg, cfg.eval_episodes, spawn(cfg.seed, "final-eval"), source)
        final_eval_loss = final["mean_loss"]
        final_eval_error = final["mean_error"]
        final_metric = (
            final_eval_error if cfg.task is TaskKind.MNIST else final_eval_loss
        )
        if cfg.wormhole.kind in (WormholeKind.TANH_SCALAR, WormholeKind.RAW_SCALAR):
            rng_probe = spawn(cfg.seed, "c-probe")
            probe_eps = [source.sample_eval(rng_probe) for _ in range(50)]
            c_probe = adapted_c_probe(theta, cfg, probe_eps)

    return RunResult(
        task=cfg.task.value,
        wormhole_kind=cfg.wormhole.kind.value,
        n_inner=cfg.inner.n_inner,
        seed=cfg.seed,
        train_loss=train_loss,
        eval_loss=eval_loss,
        eval_error=eval_error,
        c_mean=c_mean,
        c_min=c_min,
        c_max=c_max,
        final_eval_loss=final_eval_loss,
        final_eval_error=final_eval_error,
        final_metric=final_metric,
        metric_name=METRIC_NAMES[cfg.task],
        theta_norm=theta.l2_norm(),
        c_probe=c_probe,
        synthetic_data=source.synthetic,
        complete=complete,
        error=error_msg,
        abort_epoch=abort_epoch,
        wall_clock_s=time.perf_counter() - t0,
    )
