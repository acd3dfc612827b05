"""Losses and the SGD training loop.

Only the two prompt contexts and the shared prototype matrix learn; the
surrogate encoders and class tokens stay frozen. Each optimization step
draws one mini-batch per branch, backpropagates each branch loss
separately, and applies the trade-off-weighted sum of the two gradients,
so the update to the shared prototype matrix is exactly the weighted sum
of the per-branch gradients.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .corpus import CategorySet
from .encoders import EncoderSpec, FeatureSet, FrozenEncoder
from .errors import ConfigError, FormatError
from .model import (
    ClassEmbeddings,
    HyperParams,
    PromptBank,
    PrototypeMatrix,
    SimilarityBundle,
    build_prompts,
    encode_class_embeddings,
    forward_batch,
)
from .numerics import GradTape, Tensor, accumulate, add, as_tensor, node, scale, sum_all
from .seeding import rng_for, split_seed

CHECKPOINT_MAGIC = b"T2IC"
CHECKPOINT_VERSION = 1

LOSS_FORMS = ("directed", "absolute")
LR_SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    """Everything a training run needs; JSON-serializable field for field."""

    C: int
    gamma: float = 0.2
    alpha: float = 1.0
    beta: float = 3.5
    eta: float = 1.0
    tau: float = 0.02
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 40
    seed: int = 0
    M: int = 16
    D_tok: int = 512
    D: int = 512
    N_im: int = 49
    N_te: int = 77
    noise_sigma: float = 0.1
    weight_decay: float = 0.0
    momentum: float = 0.0
    lr_schedule: str = "constant"
    loss_form: str = "directed"

    def __post_init__(self):
        self.hyper_params()  # validates gamma/alpha/beta/eta/tau
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.C < 2:
            raise ConfigError("C must be >= 2")
        if self.M < 1:
            raise ConfigError("M must be >= 1")
        if min(self.D_tok, self.D, self.N_im, self.N_te) < 1:
            raise ConfigError("dimensions must be >= 1")
        if self.M + 1 > self.N_te:
            raise ConfigError(f"M+1 prompt tokens ({self.M + 1}) exceed N_te ({self.N_te})")
        if self.weight_decay < 0 or self.momentum < 0:
            raise ConfigError("weight_decay and momentum must be nonnegative")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.loss_form not in LOSS_FORMS:
            raise ConfigError(f"loss_form must be one of {LOSS_FORMS}")

    def hyper_params(self) -> HyperParams:
        return HyperParams(gamma=self.gamma, alpha=self.alpha, beta=self.beta,
                           eta=self.eta, tau=self.tau)

    def encoder_spec(self) -> EncoderSpec:
        """Frozen-encoder parameters are derived from the run seed."""
        return EncoderSpec(seed=split_seed(self.seed, "encoder"),
                           D_tok=self.D_tok, D=self.D, N_im=self.N_im,
                           N_te=self.N_te, noise_sigma=self.noise_sigma)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @staticmethod
    def from_dict(data: dict) -> "TrainConfig":
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "C" not in data:
            raise ConfigError("config is missing required key 'C'")
        return TrainConfig(**data)

    @staticmethod
    def from_json_file(path: str | Path) -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path}: bad JSON: {e.msg}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config {path}: expected a JSON object")
        return TrainConfig.from_dict(data)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _rank_hinge(scores: np.ndarray, labels: np.ndarray, eta: float,
                form: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample pairwise hinge loss and its gradient in the scores.

    scores (..., C); labels (..., C) binary. Returns (loss (...,), grad like
    scores). Subgradient at every hinge kink is 0.
    """
    labels = np.asarray(labels)
    pos = labels.astype(bool)
    neg = ~pos
    diff = scores[..., :, None] - scores[..., None, :]     # (..., i, j)
    pair = pos[..., :, None] & neg[..., None, :]
    if form == "directed":
        slack = eta - diff
        active = pair & (slack > 0.0)
        loss = np.sum(np.where(active, slack, 0.0), axis=(-2, -1))
        # d loss / d s_k: -1 per active pair with k positive, +1 with k negative
        grad = np.sum(active, axis=-1) * -1.0 + np.sum(active, axis=-2) * 1.0
    elif form == "absolute":
        slack = eta - np.abs(diff)
        active = pair & (slack > 0.0)
        loss = np.sum(np.where(active, slack, 0.0), axis=(-2, -1))
        sgn = np.sign(diff)
        grad = (np.sum(np.where(active, -sgn, 0.0), axis=-1)
                + np.sum(np.where(active, sgn, 0.0), axis=-2))
    else:
        raise ValueError(f"unknown loss form {form!r}")
    return loss, grad


def ranking_loss(scores, labels, eta: float, form: str = "directed") -> Tensor:
    """Pairwise margin loss over one score vector: for every (positive,
    negative) class pair, hinge on the margin between their scores. Zero
    when either side is empty."""
    s = as_tensor(scores)
    labels = np.asarray(labels)
    if s.data.shape != labels.shape:
        raise ValueError(f"length mismatch: scores {s.data.shape} vs labels {labels.shape}")
    pos = labels.astype(bool)
    neg = ~pos
    # summed over the dense positive x negative block so the term order is
    # reproducible; empty blocks sum to 0
    sub = eta - (s.data[pos][:, None] - s.data[neg][None, :])
    if form == "directed":
        hinged = np.maximum(0.0, sub)
    elif form == "absolute":
        hinged = np.maximum(0.0, eta - np.abs(s.data[pos][:, None] - s.data[neg][None, :]))
    else:
        raise ValueError(f"unknown loss form {form!r}")
    value = np.sum(hinged)
    _, grad = _rank_hinge(s.data, labels, eta, form)

    def bw(g):
        accumulate(s, g * grad)

    return node(np.asarray(value), (s,), bw)


def ranking_loss_batch(scores: Tensor, labels: np.ndarray, eta: float,
                       form: str = "directed") -> Tensor:
    """Vector of per-sample ranking losses for (B, C) scores."""
    s = as_tensor(scores)
    loss, grad = _rank_hinge(s.data, labels, eta, form)

    def bw(g):
        accumulate(s, g[..., None] * grad)

    return node(loss, (s,), bw)


def branch_loss(bundle: SimilarityBundle, labels, eta: float,
                form: str = "directed") -> tuple[Tensor, Tensor]:
    """(global-score loss, joint-local-score loss) for one sample."""
    return (ranking_loss(bundle.s_global, labels, eta, form),
            ranking_loss(bundle.s_combined, labels, eta, form))


def joint_loss(loss_im: float, loss_te: float, gamma: float) -> float:
    """Trade-off-weighted total: gamma * image + (1 - gamma) * text."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    return gamma * loss_im + (1.0 - gamma) * loss_te


def sgd_step(params: list[Tensor], grads: list[np.ndarray], lr: float) -> None:
    """In-place p <- p - lr * g on the given learnable tensors."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if len(params) != len(grads):
        raise ValueError("params and grads length mismatch")
    for p, g in zip(params, grads):
        if p.data.shape != g.shape:
            raise ValueError(f"shape mismatch {p.data.shape} vs {g.shape}")
        p.data -= lr * g


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Learned parameters plus everything needed to rebuild the scorer."""

    global_context: np.ndarray   # (M, D_tok)
    local_context: np.ndarray    # (M, D_tok)
    adapter: np.ndarray          # (C, D)
    class_names: tuple[str, ...]
    spec: EncoderSpec
    hp: HyperParams
    epochs_completed: int = 0
    final_loss: float = 0.0


@dataclass
class _Branch:
    globals: np.ndarray   # (n, D)
    locals: np.ndarray    # (n, N, D)
    labels: np.ndarray    # (n, C)


def _stack_branch(samples: list[FeatureSet], config: TrainConfig,
                  n_expected: int, what: str) -> _Branch:
    g = np.stack([np.asarray(s.global_feat, dtype=np.float64) for s in samples])
    l = np.stack([np.asarray(s.local_feat, dtype=np.float64) for s in samples])
    y = np.stack([np.asarray(s.labels, dtype=np.uint8) for s in samples])
    if g.shape[1] != config.D:
        raise ConfigError(f"{what}: feature width {g.shape[1]} != config D {config.D}")
    if l.shape[2] != config.D:
        raise ConfigError(f"{what}: local width {l.shape[2]} != config D {config.D}")
    if l.shape[1] != n_expected:
        raise ConfigError(f"{what}: {l.shape[1]} local rows, expected {n_expected}")
    if y.shape[1] != config.C:
        raise ConfigError(f"{what}: label length {y.shape[1]} != config C {config.C}")
    return _Branch(g, l, y)


def init_state(config: TrainConfig, classes: CategorySet
               ) -> tuple[PromptBank, PrototypeMatrix, FrozenEncoder]:
    """Fresh learnables and frozen encoder for a run, all seed-derived."""
    if len(classes) != config.C:
        raise ConfigError(f"{len(classes)} class names but config C = {config.C}")
    spec = config.encoder_spec()
    encoder = FrozenEncoder(spec)
    bank = build_prompts(classes, config.M, spec, rng_for(config.seed, "prompts"))
    a0 = rng_for(config.seed, "adapter").normal(0.0, 0.02, (config.C, config.D))
    adapter = PrototypeMatrix(A=Tensor(a0, requires_grad=True))
    return bank, adapter, encoder


def _epoch_lr(config: TrainConfig, epoch: int) -> float:
    if config.lr_schedule == "cosine":
        return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs))
    return config.learning_rate


def _batch_loss(emb: ClassEmbeddings, adapter: PrototypeMatrix, hp: HyperParams,
                branch: _Branch, idx: np.ndarray, eta: float, form: str) -> Tensor:
    bundle = forward_batch(branch.globals[idx], branch.locals[idx], emb, adapter, hp)
    labels = branch.labels[idx]
    loss_g = ranking_loss_batch(bundle.s_global, labels, eta, form)
    loss_l = ranking_loss_batch(bundle.s_combined, labels, eta, form)
    return scale(add(sum_all(loss_g), sum_all(loss_l)), 1.0 / len(idx))


def _grads(loss: Tensor, params: list[Tensor]) -> list[np.ndarray]:
    GradTape(loss).backward()
    return [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
            for p in params]


def train(config: TrainConfig, text_samples: list[FeatureSet],
          image_samples: list[FeatureSet], class_names: list[str] | None = None
          ) -> tuple[Checkpoint, list[float]]:
    """Run the full loop; returns the checkpoint and one mean loss per epoch.

    The text branch is read only when gamma < 1 and the image branch only
    when gamma > 0; the unused list may be empty.
    """
    gamma = config.gamma
    use_im, use_te = gamma > 0.0, gamma < 1.0
    if use_im and not image_samples:
        raise ConfigError("gamma > 0 requires image samples")
    if use_te and not text_samples:
        raise ConfigError("gamma < 1 requires text samples")
    if class_names is None:
        class_names = [f"class_{i}" for i in range(config.C)]
    classes = CategorySet(tuple(class_names))
    bank, adapter, encoder = init_state(config, classes)
    params = [bank.global_context, bank.local_context, adapter.A]
    velocity = [np.zeros_like(p.data) for p in params]
    hp = config.hyper_params()

    im = _stack_branch(image_samples, config, config.N_im, "image features") if use_im else None
    te = _stack_branch(text_samples, config, config.N_te, "text features") if use_te else None

    shuffle_rng = rng_for(config.seed, "shuffle")
    b = config.batch_size
    loss_log: list[float] = []
    for epoch in range(config.epochs):
        im_batches = _epoch_batches(shuffle_rng, len(im.labels), b) if use_im else []
        te_batches = _epoch_batches(shuffle_rng, len(te.labels), b) if use_te else []
        steps = max(len(im_batches), len(te_batches))
        lr = _epoch_lr(config, epoch)
        epoch_losses = []
        for t in range(steps):
            emb = encode_class_embeddings(bank, encoder)
            loss_im_val = 0.0
            loss_te_val = 0.0
            g_im = g_te = None
            if use_im:
                loss_im = _batch_loss(emb, adapter, hp, im,
                                      im_batches[t % len(im_batches)],
                                      config.eta, config.loss_form)
                loss_im_val = loss_im.item()
                g_im = _grads(loss_im, params)
            if use_te:
                loss_te = _batch_loss(emb, adapter, hp, te,
                                      te_batches[t % len(te_batches)],
                                      config.eta, config.loss_form)
                loss_te_val = loss_te.item()
                g_te = _grads(loss_te, params)
            epoch_losses.append(joint_loss(loss_im_val, loss_te_val, gamma))
            for k, p in enumerate(params):
                if g_im is not None and g_te is not None:
                    g = gamma * g_im[k] + (1.0 - gamma) * g_te[k]
                elif g_im is not None:
                    g = g_im[k]
                else:
                    g = g_te[k]
                if config.weight_decay:
                    g = g + config.weight_decay * p.data
                if config.momentum:
                    velocity[k] = config.momentum * velocity[k] + g
                    g = velocity[k]
                p.data -= lr * g
        loss_log.append(float(np.mean(epoch_losses)))

    return Checkpoint(
        global_context=bank.global_context.data.copy(),
        local_context=bank.local_context.data.copy(),
        adapter=adapter.A.data.copy(),
        class_names=classes.names,
        spec=config.encoder_spec(),
        hp=hp,
        epochs_completed=config.epochs,
        final_loss=loss_log[-1],
    ), loss_log


def _epoch_batches(rng: np.random.Generator, n: int, batch_size: int) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[k:k + batch_size] for k in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# checkpoint format: magic "T2IC", version u16, u32 C/D/D_tok/M/N_im/N_te,
# u64 encoder seed, 5 float64 hyperparameters (gamma alpha beta eta tau),
# float32 arrays global_context/local_context/adapter, then C class names
# (u32 byte length + UTF-8), then u32 epochs_completed, f64 final loss.
# ---------------------------------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    c = len(ckpt.class_names)
    m, d_tok = ckpt.global_context.shape
    d = ckpt.adapter.shape[1]
    if ckpt.local_context.shape != (m, d_tok) or ckpt.adapter.shape != (c, d):
        raise ValueError("checkpoint arrays have inconsistent shapes")
    spec = ckpt.spec
    if (spec.D_tok, spec.D) != (d_tok, d):
        raise ValueError("checkpoint arrays disagree with encoder spec dims")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<HIIIIII", CHECKPOINT_VERSION, c, d, d_tok, m,
                            spec.N_im, spec.N_te))
        f.write(struct.pack("<Q", spec.seed))
        f.write(struct.pack("<5d", ckpt.hp.gamma, ckpt.hp.alpha, ckpt.hp.beta,
                            ckpt.hp.eta, ckpt.hp.tau))
        f.write(np.ascontiguousarray(ckpt.global_context, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(ckpt.local_context, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(ckpt.adapter, dtype="<f4").tobytes())
        for name in ckpt.class_names:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
        f.write(struct.pack("<Id", ckpt.epochs_completed, ckpt.final_loss))


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(0, f"bad magic {blob[:4]!r}, want {CHECKPOINT_MAGIC!r}")
    off = 4
    try:
        version, c, d, d_tok, m, n_im, n_te = struct.unpack_from("<HIIIIII", blob, off)
    except struct.error:
        raise FormatError(off, "truncated header") from None
    if version != CHECKPOINT_VERSION:
        raise FormatError(off, f"unsupported version {version}")
    off += struct.calcsize("<HIIIIII")
    if min(c, d, d_tok, m, n_im, n_te) < 1:
        raise FormatError(4, "invalid dimensions in header")
    try:
        (seed,) = struct.unpack_from("<Q", blob, off)
        off += 8
        hp_vals = struct.unpack_from("<5d", blob, off)
        off += 40
    except struct.error:
        raise FormatError(off, "truncated header") from None

    def take_f32(rows: int, cols: int, what: str) -> np.ndarray:
        nonlocal off
        nbytes = 4 * rows * cols
        if off + nbytes > len(blob):
            raise FormatError(off, f"truncated {what} array")
        arr = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=off)
        off += nbytes
        return arr.astype(np.float64).reshape(rows, cols)

    g_ctx = take_f32(m, d_tok, "global_context")
    l_ctx = take_f32(m, d_tok, "local_context")
    adapter = take_f32(c, d, "adapter")
    names = []
    for i in range(c):
        if off + 4 > len(blob):
            raise FormatError(off, f"truncated before class name {i} (have {len(names)} of {c})")
        (ln,) = struct.unpack_from("<I", blob, off)
        off += 4
        if off + ln > len(blob):
            raise FormatError(off, f"truncated class name {i}")
        try:
            names.append(blob[off:off + ln].decode("utf-8"))
        except UnicodeDecodeError:
            raise FormatError(off, f"class name {i} is not valid UTF-8") from None
        off += ln
    if off + struct.calcsize("<Id") != len(blob):
        raise FormatError(off, "bad trailing metadata size")
    epochs_completed, final_loss = struct.unpack_from("<Id", blob, off)
    spec = EncoderSpec(seed=seed, D_tok=d_tok, D=d, N_im=n_im, N_te=n_te, noise_sigma=0.0)
    hp = HyperParams(gamma=hp_vals[0], alpha=hp_vals[1], beta=hp_vals[2],
                     eta=hp_vals[3], tau=hp_vals[4])
    return Checkpoint(global_context=g_ctx, local_context=l_ctx, adapter=adapter,
                      class_names=tuple(names), spec=spec, hp=hp,
                      epochs_completed=epochs_completed, final_loss=final_loss)
