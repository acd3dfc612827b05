"""Forward mathematics of the joint prompt-adapter scorer.

Learnable context vectors are prepended to a frozen class token and pushed
through the frozen text encoder to give per-class global and local
embeddings. A sample's score per class combines three signals: cosine of
its pooled feature with the global class embedding, a temperature-softmax
aggregation of its local similarities, and the affinity of its
heatmap-attended feature to a learnable per-class prototype. The prototype
matrix is shared between the text and image branches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import CategorySet
from .encoders import EncoderSpec, FeatureSet, FrozenEncoder, embed_tokens, encode_text
from .numerics import (
    Tensor,
    add,
    add_scalar,
    as_tensor,
    concat_rows,
    exp,
    l2_normalize,
    matmul,
    matvec,
    mul,
    scale,
    softmax_rows,
    stack_rows,
    sum_last,
    transpose,
)

PROMPT_INIT_STD = 0.02


@dataclass
class HyperParams:
    """Scoring and loss knobs. Defaults follow the reference configuration."""

    gamma: float = 0.2   # image-branch weight in the joint loss
    alpha: float = 1.0   # residual weight of the prototype affinity
    beta: float = 3.5    # affinity sharpness
    eta: float = 1.0     # ranking margin
    tau: float = 0.02    # heatmap temperature

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.alpha < 0 or self.beta < 0 or self.eta < 0:
            raise ValueError("alpha, beta, eta must be nonnegative")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


@dataclass
class PromptBank:
    """Learnable global/local context rows plus frozen class token embeddings."""

    global_context: Tensor   # (M, D_tok), learnable
    local_context: Tensor    # (M, D_tok), learnable
    class_tokens: np.ndarray  # (C, D_tok), frozen
    M: int
    C: int


@dataclass
class ClassEmbeddings:
    G: Tensor  # (C, D) global class embeddings, unit rows
    L: Tensor  # (C, D) local class embeddings, unit rows


@dataclass
class PrototypeMatrix:
    """Learnable per-class prototypes, shared by both branches."""

    A: Tensor  # (C, D)


@dataclass
class SimilarityBundle:
    """All per-sample scoring intermediates (Tensor nodes)."""

    s_global: Tensor    # (C,) cosine to global class embeddings
    S_local: Tensor     # (C, N) per-position cosine to local class embeddings
    heatmap: Tensor     # (C, N) rows sum to 1
    attended: Tensor    # (C, D) heatmap-weighted local features
    affinity: Tensor    # (C,) prototype affinity q, in (0, 1]
    s_local: Tensor     # (C,) heatmap-aggregated local similarity
    s_combined: Tensor  # (C,) alpha * affinity + s_local


def build_prompts(classes: CategorySet, M: int, spec: EncoderSpec,
                  rng: np.random.Generator) -> PromptBank:
    """Fresh prompt bank: contexts drawn i.i.d. Gaussian with std 0.02,
    class tokens embedded once and frozen (multi-word names mean-pooled)."""
    if M < 1:
        raise ValueError("M must be >= 1")
    g_ctx = Tensor(rng.normal(0.0, PROMPT_INIT_STD, (M, spec.D_tok)), requires_grad=True)
    l_ctx = Tensor(rng.normal(0.0, PROMPT_INIT_STD, (M, spec.D_tok)), requires_grad=True)
    tokens = np.stack([embed_tokens(name.split(), spec).mean(axis=0)
                       for name in classes.names])
    return PromptBank(global_context=g_ctx, local_context=l_ctx,
                      class_tokens=tokens, M=M, C=len(classes))


def encode_class_embeddings(prompts: PromptBank, encoder: FrozenEncoder) -> ClassEmbeddings:
    """Per class: encode [context rows..., class token] and keep the pooled
    global output. Done once with the global contexts, once with the local."""
    def branch(context: Tensor) -> Tensor:
        rows = []
        for i in range(prompts.C):
            cls_row = Tensor(prompts.class_tokens[i:i + 1])
            toks = concat_rows([context, cls_row])
            rows.append(encode_text(toks, encoder).global_feat)
        return stack_rows(rows)

    return ClassEmbeddings(G=branch(prompts.global_context),
                           L=branch(prompts.local_context))


def global_similarity(f_g, G) -> Tensor:
    """Cosine of the pooled feature against each global class embedding."""
    f_g = l2_normalize(as_tensor(f_g))
    G = l2_normalize(as_tensor(G))
    return matvec(G, f_g)


def local_similarity(f_l, L) -> Tensor:
    """(C, N) cosine of every local position against every local class
    embedding."""
    f_l = l2_normalize(as_tensor(f_l))
    L = l2_normalize(as_tensor(L))
    return matmul(L, transpose(f_l))


def class_heatmap(S, tau: float) -> Tensor:
    """Per-class softmax over positions of the local similarities."""
    return softmax_rows(as_tensor(S), tau)


def aggregate_local(S, heatmap) -> Tensor:
    """Spatially weighted aggregation: s'_i = sum_j heatmap_ij * S_ij."""
    S, heatmap = as_tensor(S), as_tensor(heatmap)
    if S.data.shape != heatmap.data.shape:
        raise ValueError(f"shape mismatch {S.data.shape} vs {heatmap.data.shape}")
    return sum_last(mul(heatmap, S))


def attended_features(heatmap, f_l) -> Tensor:
    """Class-wise attended features: each row a convex combination of local
    features under the class's heatmap."""
    heatmap, f_l = as_tensor(heatmap), as_tensor(f_l)
    if heatmap.data.shape[-1] != f_l.data.shape[-2]:
        raise ValueError(f"shape mismatch {heatmap.data.shape} @ {f_l.data.shape}")
    return matmul(heatmap, f_l)


def adapter_affinity(attended, A, beta: float) -> Tensor:
    """Prototype affinity q_i = exp(-beta * (1 - cos(attended_i, A_i))).

    Both sides are row-normalized first so the exponent stays in [-2b, 0]
    and q in [exp(-2 beta), 1].
    """
    if beta < 0:
        raise ValueError(f"beta must be nonnegative, got {beta}")
    h_hat = l2_normalize(as_tensor(attended))
    a_hat = l2_normalize(as_tensor(A))
    cos_rows = sum_last(mul(h_hat, a_hat))
    return exp(add_scalar(scale(cos_rows, beta), -beta))


def combined_logits(affinity, s_local, alpha: float) -> Tensor:
    """Joint local logits: alpha * affinity + s_local. At alpha == 0 the
    adapter is disabled and the aggregated similarity passes through
    untouched (bitwise)."""
    affinity, s_local = as_tensor(affinity), as_tensor(s_local)
    if affinity.data.shape != s_local.data.shape:
        raise ValueError(f"length mismatch {affinity.data.shape} vs {s_local.data.shape}")
    if alpha == 0.0:
        return s_local
    return add(scale(affinity, alpha), s_local)


def forward_branch(features: FeatureSet, embeddings: ClassEmbeddings,
                   adapter: PrototypeMatrix, hp: HyperParams) -> SimilarityBundle:
    """Score one sample (either branch; the branch is just which features are
    supplied). Feature arrays act as constants; gradients flow to the
    contexts through the embeddings and to the shared prototype matrix."""
    f_g = as_tensor(features.global_feat)
    f_l = as_tensor(features.local_feat)
    s_g = global_similarity(f_g, embeddings.G)
    S = local_similarity(f_l, embeddings.L)
    heat = class_heatmap(S, hp.tau)
    s_loc = aggregate_local(S, heat)
    att = attended_features(heat, l2_normalize(f_l))
    q = adapter_affinity(att, adapter.A, hp.beta)
    s_comb = combined_logits(q, s_loc, hp.alpha)
    return SimilarityBundle(s_global=s_g, S_local=S, heatmap=heat, attended=att,
                            affinity=q, s_local=s_loc, s_combined=s_comb)


def forward_batch(global_feats: np.ndarray, local_feats: np.ndarray,
                  embeddings: ClassEmbeddings, adapter: PrototypeMatrix,
                  hp: HyperParams) -> SimilarityBundle:
    """Batched scoring: (B, D) globals and (B, N, D) locals in one recorded
    computation. Field shapes gain a leading batch axis; otherwise identical
    to per-sample `forward_branch`."""
    fg = np.asarray(global_feats, dtype=np.float64)
    fl = np.asarray(local_feats, dtype=np.float64)
    fg = fg / np.linalg.norm(fg, axis=-1, keepdims=True)
    fl = fl / np.linalg.norm(fl, axis=-1, keepdims=True)
    G = l2_normalize(embeddings.G)
    L = l2_normalize(embeddings.L)
    # (B, C) = (B, D) @ (D, C)
    s_g = matmul(Tensor(fg), transpose(G))
    # (B, C, N) = (C, D) @ (B, D, N)
    S = matmul(L, Tensor(np.ascontiguousarray(fl.transpose(0, 2, 1))))
    heat = softmax_rows(S, hp.tau)
    s_loc = sum_last(mul(heat, S))
    att = matmul(heat, Tensor(fl))                      # (B, C, D)
    h_hat = l2_normalize(att)
    a_hat = l2_normalize(adapter.A)                     # (C, D), broadcasts
    q = exp(add_scalar(scale(sum_last(mul(h_hat, a_hat)), hp.beta), -hp.beta))
    s_comb = s_loc if hp.alpha == 0.0 else add(scale(q, hp.alpha), s_loc)
    return SimilarityBundle(s_global=s_g, S_local=S, heatmap=heat, attended=att,
                            affinity=q, s_local=s_loc, s_combined=s_comb)
