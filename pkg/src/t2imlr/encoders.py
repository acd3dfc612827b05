"""Frozen surrogate feature producers and the feature interchange format.

A seeded surrogate stands in for a pretrained dual encoder: token embeddings
come from a keyed hash, the text encoder is a fixed random projection with
unit-norm outputs, and "synthetic images" are bundles of local feature slots
drawn around per-class unit directions in the same space. Real precomputed
features can be ingested through the same binary file format instead.

All computation is float64; files store float32 little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .numerics import Tensor, as_tensor, l2_normalize, matmul, mean_rows
from .seeding import rng_for, word_rng

FEATURE_MAGIC = b"T2IF"
FEATURE_VERSION = 1


@dataclass(frozen=True)
class EncoderSpec:
    """Dimensions and seed of the frozen surrogate encoders."""

    seed: int
    D_tok: int = 512
    D: int = 512
    N_im: int = 49
    N_te: int = 77
    noise_sigma: float = 0.1

    def __post_init__(self):
        for name in ("D_tok", "D", "N_im", "N_te"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")


@dataclass
class FeatureSet:
    """One sample: pooled global feature, per-position local features, labels.

    `global_feat` has shape (D,), `local_feat` (N, D); rows are unit norm.
    `labels` is a multi-hot uint8 vector, or None for unlabeled encodings.
    Fields hold numpy arrays, or live Tensor nodes when produced inside a
    differentiable computation.
    """

    global_feat: object
    local_feat: object
    labels: np.ndarray | None = None

    def detached(self) -> "FeatureSet":
        g = self.global_feat.data if isinstance(self.global_feat, Tensor) else self.global_feat
        l = self.local_feat.data if isinstance(self.local_feat, Tensor) else self.local_feat
        return FeatureSet(np.asarray(g, dtype=np.float64),
                          np.asarray(l, dtype=np.float64), self.labels)


class FrozenEncoder:
    """Seeded frozen parameters: the text projection and class directions."""

    def __init__(self, spec: EncoderSpec):
        self.spec = spec
        rng = rng_for(spec.seed, "text_projection")
        # scale keeps projected token norms O(1) regardless of D_tok
        self.w_text = rng.standard_normal((spec.D, spec.D_tok)) / np.sqrt(spec.D_tok)
        self._w_text_t = self.w_text.T.copy()

    def frozen_bytes(self) -> bytes:
        """Stable byte snapshot, used to verify parameters never change."""
        return self.w_text.tobytes()


@dataclass(frozen=True)
class ClassDirections:
    """Unit direction per class in feature space, derived from the seed.

    For D >= 64 the rows are resampled until every pairwise |cos| < 0.5, so
    classes are geometrically distinguishable.
    """

    matrix: np.ndarray  # (C, D)


def class_directions(spec: EncoderSpec, num_classes: int) -> ClassDirections:
    rng = rng_for(spec.seed, "class_directions")
    dirs = rng.standard_normal((num_classes, spec.D))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    if spec.D >= 64:
        for i in range(1, num_classes):
            # redraw row i until it is separated from all earlier rows
            while np.max(np.abs(dirs[:i] @ dirs[i])) >= 0.5:
                v = rng.standard_normal(spec.D)
                dirs[i] = v / np.linalg.norm(v)
    return ClassDirections(dirs)


def embed_tokens(words: list[str], spec: EncoderSpec) -> np.ndarray:
    """Deterministic token embeddings, one row per word, entries in [-1, 1]."""
    if not words:
        raise ValueError("word list must be non-empty")
    if len(words) > spec.N_te:
        raise ValueError(f"{len(words)} words exceed token capacity {spec.N_te}")
    rows = [word_rng(spec.seed, w).uniform(-1.0, 1.0, spec.D_tok) for w in words]
    return np.stack(rows, axis=0)


def encode_text(tokens, encoder: FrozenEncoder) -> FeatureSet:
    """Project a token matrix (n, D_tok) through the frozen text encoder.

    Local features are the per-token projections, normalized; the global
    feature is the normalized mean of the raw projections. Differentiable in
    the token matrix when a Tensor is passed.
    """
    t = as_tensor(tokens)
    n = t.data.shape[0]
    if not 1 <= n <= encoder.spec.N_te:
        raise ValueError(f"token count {n} outside 1..{encoder.spec.N_te}")
    projected = matmul(t, Tensor(encoder._w_text_t))   # (n, D)
    local = l2_normalize(projected)
    global_ = l2_normalize(mean_rows(projected))
    return FeatureSet(global_feat=global_, local_feat=local, labels=None)


def synth_image_features(labels: np.ndarray, spec: EncoderSpec,
                         directions: ClassDirections, rng: np.random.Generator,
                         background_prob: float = 0.2) -> FeatureSet:
    """Surrogate image: each local slot depicts one of the sample's classes
    (probability 1 - background_prob, uniform over its set labels) or
    background clutter; Gaussian noise of scale noise_sigma is added before
    renormalizing. The pooled global feature is the normalized slot mean.
    """
    labels = np.asarray(labels, dtype=np.uint8)
    present = np.flatnonzero(labels)
    if present.size == 0:
        raise ValueError("at least one label must be set")
    d = spec.D
    local = np.empty((spec.N_im, d))
    for j in range(spec.N_im):
        if rng.random() < background_prob:
            base = rng.standard_normal(d)
            base /= np.linalg.norm(base)
        else:
            base = directions.matrix[rng.choice(present)]
        row = base + spec.noise_sigma * rng.standard_normal(d)
        local[j] = row / np.linalg.norm(row)
    pooled = local.mean(axis=0)
    global_ = pooled / np.linalg.norm(pooled)
    return FeatureSet(global_feat=global_, local_feat=local, labels=labels.copy())


# ---------------------------------------------------------------------------
# feature file format: magic "T2IF", version u16, u32 n_samples/C/D/N,
# then per sample: C label bytes, D float32 global, N*D float32 locals.
# ---------------------------------------------------------------------------

def write_feature_file(samples: list[FeatureSet], path: str | Path) -> None:
    if not samples:
        raise ValueError("cannot write an empty feature file")
    first = samples[0].detached()
    c = int(first.labels.shape[0])
    d = int(first.global_feat.shape[0])
    n = int(first.local_feat.shape[0])
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<HIIII", FEATURE_VERSION, len(samples), c, d, n))
        for i, s in enumerate(samples):
            s = s.detached()
            if s.labels is None or s.labels.shape[0] != c:
                raise ValueError(f"sample {i}: labels missing or wrong length")
            if s.global_feat.shape != (d,) or s.local_feat.shape != (n, d):
                raise ValueError(f"sample {i}: dimension mismatch with sample 0")
            f.write(np.asarray(s.labels, dtype=np.uint8).tobytes())
            f.write(np.asarray(s.global_feat, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(s.local_feat, dtype="<f4").tobytes())


def read_feature_file(path: str | Path) -> list[FeatureSet]:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != FEATURE_MAGIC:
        raise FormatError(0, f"bad magic {blob[:4]!r}, want {FEATURE_MAGIC!r}")
    header_size = 4 + struct.calcsize("<HIIII")
    if len(blob) < header_size:
        raise FormatError(4, "truncated header")
    version, n_samples, c, d, n = struct.unpack_from("<HIIII", blob, 4)
    if version != FEATURE_VERSION:
        raise FormatError(4, f"unsupported version {version}")
    if min(c, d, n) < 1:
        raise FormatError(6, f"invalid dimensions C={c} D={d} N={n}")
    sample_size = c + 4 * d + 4 * n * d
    expected = header_size + n_samples * sample_size
    if len(blob) != expected:
        raise FormatError(min(len(blob), expected),
                          f"payload is {len(blob) - header_size} bytes, "
                          f"expected {n_samples} samples of {sample_size}")
    samples = []
    off = header_size
    for _ in range(n_samples):
        labels = np.frombuffer(blob, dtype=np.uint8, count=c, offset=off).copy()
        off += c
        g = np.frombuffer(blob, dtype="<f4", count=d, offset=off).astype(np.float64)
        off += 4 * d
        l = np.frombuffer(blob, dtype="<f4", count=n * d, offset=off).astype(np.float64)
        off += 4 * n * d
        samples.append(FeatureSet(g, l.reshape(n, d), labels))
    return samples
