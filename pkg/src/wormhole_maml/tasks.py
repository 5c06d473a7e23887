"""Task distributions: threshold classification, wavelet regression and
2-way 1-shot digit classification, plus IDX file ingestion.

Every sampler is a pure function of its rng, so identical seeds give
identical episodes.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from random import Random
from typing import Sequence

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    ContractError,
    DataConsistencyError,
    FormatError,
    SamplingError,
    StructuralError,
)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Episode:
    """One task instance: support/query batches plus task metadata.

    ``support_y``/``query_y`` are [K, 1] float tensors for bce/mse and
    [K] integer-valued tensors for ce.
    """

    support_x: Tensor
    support_y: Tensor
    query_x: Tensor
    query_y: Tensor
    loss: str  # bce | mse | ce
    sign: int
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Avg-Threshold


def _avg_threshold_batch(rng: Random, d: int, k: int, tau: float, s: int,
                         balanced: bool, max_retries: int = 1000):
    quota = k // 4
    for _ in range(max_retries):
        xs: list[list[float]] = []
        ys: list[float] = []
        n_pos = 0
        for _ in range(k):
            x = [rng.random() for _ in range(d)]
            avg = sum(x) / d
            y = 1.0 if s * avg > s * tau else 0.0
            xs.append(x)
            ys.append(y)
            n_pos += y == 1.0
        if not balanced or min(n_pos, k - n_pos) >= quota:
            return xs, ys
    raise SamplingError(
        f"could not draw a balanced batch for tau={tau:.4f} after {max_retries} tries"
    )


def sample_avg_threshold(rng: Random, d: int = 5, k_support: int = 10,
                         k_query: int = 10, tau_range: tuple[float, float] = (0.0, 1.0),
                         balanced: bool = True) -> Episode:
    """Label rule: y = 1 iff s * avg(x) > s * tau, x ~ Uniform[0,1]^d.

    With ``balanced`` both batches are rejection-sampled until each class
    holds at least floor(K/4) points; extreme tau values can make that
    infeasible, which raises SamplingError.
    """
    if d < 1 or k_support < 1 or k_query < 1:
        raise ContractError("d and shot counts must be >= 1")
    tau = rng.uniform(*tau_range)
    s = 1 if rng.random() < 0.5 else -1
    sx, sy = _avg_threshold_batch(rng, d, k_support, tau, s, balanced)
    qx, qy = _avg_threshold_batch(rng, d, k_query, tau, s, balanced)
    return Episode(
        support_x=ad.tensor_new((k_support, d), [v for row in sx for v in row]),
        support_y=ad.tensor_new((k_support, 1), sy),
        query_x=ad.tensor_new((k_query, d), [v for row in qx for v in row]),
        query_y=ad.tensor_new((k_query, 1), qy),
        loss="bce",
        sign=s,
        meta={"tau": tau},
    )


def sign_flipped_copy(episode: Episode) -> Episode:
    """Same inputs and task parameters, opposite sign.

    For classification that complements the labels; for regression it
    negates the targets. This is the construction behind the opposing
    meta-gradient diagnostics.
    """
    if episode.loss in ("bce", "ce"):
        flip = lambda t: ad.tensor_new(t.shape, [1.0 - v for v in t.data])
    elif episode.loss == "mse":
        flip = lambda t: ad.tensor_new(t.shape, [-v for v in t.data])
    else:
        raise ContractError(f"cannot sign-flip loss {episode.loss!r}")
    meta = dict(episode.meta)
    if "class_pair" in meta:
        a, b = meta["class_pair"]
        meta["class_pair"] = (b, a)
    return Episode(
        support_x=episode.support_x,
        support_y=flip(episode.support_y),
        query_x=episode.query_x,
        query_y=flip(episode.query_y),
        loss=episode.loss,
        sign=-episode.sign,
        meta=meta,
    )


# ---------------------------------------------------------------------------
# Wavelet transform


def mexican_hat(grid: Sequence[float], mu: float, sigma: float,
                amplitude: float) -> list[float]:
    """amplitude * (1 - u^2) * exp(-u^2 / 2) with u = (t - mu) / sigma."""
    if sigma <= 0:
        raise ContractError(f"sigma must be positive, got {sigma}")
    out = []
    for t in grid:
        u = (t - mu) / sigma
        u2 = u * u
        out.append(amplitude * (1.0 - u2) * math.exp(-u2 / 2.0))
    return out


def wavelet_grid(n: int, lo: float = -5.0, hi: float = 5.0) -> list[float]:
    return [lo + i * (hi - lo) / (n - 1) for i in range(n)]


def sample_wavelet(rng: Random, n: int = 50, k: int = 10, sigma: float = 1.0,
                   amplitude: float = 0.8,
                   mu_range: tuple[float, float] = (-2.5, 2.5)) -> Episode:
    """Targets y = x . f with f = sign * mexican_hat(grid, mu), x ~ U(0,1)^n."""
    if n < 8:
        raise ContractError(f"grid size must be >= 8, got {n}")
    mu = rng.uniform(*mu_range)
    s = 1 if rng.random() < 0.5 else -1
    f = [s * v for v in mexican_hat(wavelet_grid(n), mu, sigma, amplitude)]

    def batch(count):
        xs: list[float] = []
        ys: list[float] = []
        for _ in range(count):
            x = [rng.random() for _ in range(n)]
            acc = 0.0
            for xv, fv in zip(x, f):
                acc += xv * fv
            xs.extend(x)
            ys.append(acc)
        return xs, ys

    sx, sy = batch(k)
    qx, qy = batch(k)
    return Episode(
        support_x=ad.tensor_new((k, n), sx),
        support_y=ad.tensor_new((k, 1), sy),
        query_x=ad.tensor_new((k, n), qx),
        query_y=ad.tensor_new((k, 1), qy),
        loss="mse",
        sign=s,
        meta={"mu": mu, "filter": f},
    )


# ---------------------------------------------------------------------------
# MNIST (IDX files) and the synthetic fallback


@dataclass
class MnistDataset:
    images: bytes  # n * rows * cols, row-major uint8
    labels: bytes  # n entries in [0, 9]
    n: int
    rows: int
    cols: int
    class_indices: list[list[int]]
    synthetic: bool = False

    @property
    def pixels(self) -> int:
        return self.rows * self.cols

    def image_floats(self, i: int) -> list[float]:
        p = self.pixels
        raw = self.images[i * p:(i + 1) * p]
        return [b / 255.0 for b in raw]


def _read_file(path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == b"\x1f\x8b":
            with gzip.open(fh) as gz:
                return gz.read()
        return fh.read()


def _u32(buf: bytes, off: int, path) -> int:
    if off + 4 > len(buf):
        raise FormatError(f"{path}: truncated header")
    return struct.unpack_from(">I", buf, off)[0]


def load_mnist_idx(image_path, label_path) -> MnistDataset:
    """Parse the big-endian IDX pair; gzip inputs are detected by prefix."""
    ibuf = _read_file(image_path)
    magic = _u32(ibuf, 0, image_path)
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"{image_path}: bad image magic 0x{magic:08x}")
    n = _u32(ibuf, 4, image_path)
    rows = _u32(ibuf, 8, image_path)
    cols = _u32(ibuf, 12, image_path)
    images = ibuf[16:]
    if len(images) != n * rows * cols:
        raise FormatError(
            f"{image_path}: expected {n * rows * cols} pixel bytes, got {len(images)}"
        )

    lbuf = _read_file(label_path)
    magic = _u32(lbuf, 0, label_path)
    if magic != IDX_LABEL_MAGIC:
        raise FormatError(f"{label_path}: bad label magic 0x{magic:08x}")
    ln = _u32(lbuf, 4, label_path)
    labels = lbuf[8:]
    if len(labels) != ln:
        raise FormatError(f"{label_path}: expected {ln} label bytes, got {len(labels)}")
    if ln != n:
        raise DataConsistencyError(f"{n} images but {ln} labels")

    class_indices: list[list[int]] = [[] for _ in range(10)]
    for i, lab in enumerate(labels):
        if lab > 9:
            raise FormatError(f"{label_path}: label {lab} at index {i} outside [0, 9]")
        class_indices[lab].append(i)
    return MnistDataset(images, labels, n, rows, cols, class_indices)


def _smooth_field(rng: Random, coarse: int = 7, size: int = 28) -> list[float]:
    # bilinear upsample of a coarse random grid -> smooth blobs
    grid = [[rng.random() for _ in range(coarse)] for _ in range(coarse)]
    out = []
    scale = (coarse - 1) / (size - 1)
    for r in range(size):
        fr = r * scale
        r0 = min(int(fr), coarse - 2)
        tr = fr - r0
        for c in range(size):
            fc = c * scale
            c0 = min(int(fc), coarse - 2)
            tc = fc - c0
            v = (
                grid[r0][c0] * (1 - tr) * (1 - tc)
                + grid[r0 + 1][c0] * tr * (1 - tc)
                + grid[r0][c0 + 1] * (1 - tr) * tc
                + grid[r0 + 1][c0 + 1] * tr * tc
            )
            out.append(v)
    return out


def synthetic_mnist(seed: int, n_per_class: int = 200, bg_strength: float = 0.75,
                    pattern_strength: float = 0.25, noise: float = 0.05) -> MnistDataset:
    """Stand-in dataset when no IDX files are available.

    Each sample is a strong per-sample smooth background field plus a weak
    fixed per-class pattern plus pixel noise. The background is a
    distractor subspace that dominates raw-pixel similarity, so one-shot
    discrimination stays hard without learned features while the class
    patterns remain cleanly separable for a model that learns to project
    the background out. That mirrors what makes the real digit task show
    conflicting gradients without making it trivially solvable. Output is
    clearly flagged as synthetic.
    """
    rng = Random(seed)
    patterns = []
    for _ in range(10):
        field = _smooth_field(rng, coarse=14)
        mean = sum(field) / len(field)
        patterns.append([v - mean for v in field])

    images = bytearray()
    labels = bytearray()
    for c in range(10):
        pattern = patterns[c]
        for _ in range(n_per_class):
            bg = _smooth_field(rng, coarse=7)
            for b, p in zip(bg, pattern):
                v = bg_strength * b + pattern_strength * (p + 0.5) + noise * (2.0 * rng.random() - 1.0)
                v = 0.0 if v < 0.0 else (1.0 if v > 1.0 else v)
                images.append(int(v * 255))
            labels.append(c)

    class_indices: list[list[int]] = [[] for _ in range(10)]
    for i, lab in enumerate(labels):
        class_indices[lab].append(i)
    return MnistDataset(
        bytes(images), bytes(labels), 10 * n_per_class, 28, 28, class_indices,
        synthetic=True,
    )


def sample_mnist_episode(ds: MnistDataset, rng: Random, k_query: int = 5) -> Episode:
    """2-way 1-shot episode with random digit-to-label assignment.

    The random assignment is what makes per-task gradients conflict: the
    same digit pair appears with either labeling across episodes.
    """
    need = 1 + k_query
    eligible = [c for c in range(10) if len(ds.class_indices[c]) >= need]
    if len(eligible) < 2:
        raise SamplingError(f"need two classes with >= {need} images")
    pair = rng.sample(eligible, 2)

    sup_rows: list[float] = []
    qry_rows: list[float] = []
    for c in pair:
        chosen = rng.sample(ds.class_indices[c], need)
        sup_rows.extend(ds.image_floats(chosen[0]))
        for idx in chosen[1:]:
            qry_rows.extend(ds.image_floats(idx))

    p = ds.pixels
    qy = [0.0] * k_query + [1.0] * k_query
    return Episode(
        support_x=ad.tensor_new((2, p), sup_rows),
        support_y=ad.tensor_new((2,), [0.0, 1.0]),
        query_x=ad.tensor_new((2 * k_query, p), qry_rows),
        query_y=ad.tensor_new((2 * k_query,), qy),
        loss="ce",
        sign=1,
        meta={"class_pair": tuple(pair)},
    )
