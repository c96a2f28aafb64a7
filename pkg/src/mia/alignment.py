"""The three similarity granularities and their fusion.

Attention scores always compare MLP-lifted vectors; aggregation always mixes
the raw component vectors; the final cosine lifts the aggregate through the
same MLP so both sides live in the shared lifted space. Captions with no
noun phrases carry no local similarities (the caller substitutes zeros and
masks the corresponding loss terms).
"""

from __future__ import annotations

from dataclasses import dataclass

from .autodiff import Tensor, concat, cosine, cross_rows_cosine, \
    pairwise_rows_cosine, rows_cosine
from .encoders import MiaModel


@dataclass
class SimilarityBundle:
    s_g: float
    s_i: float
    s_t: float
    s_p: float
    s_n: float
    has_phrases: bool = True

    @property
    def s_r(self) -> float:
        return (self.s_i + self.s_t) / 2 if self.has_phrases else self.s_i

    @property
    def s_l(self) -> float:
        return (self.s_p + self.s_n) / 2

    def fused(self, lambda1: float, lambda2: float) -> float:
        return self.s_g + lambda1 * self.s_r + lambda2 * self.s_l


def fuse(bundle: SimilarityBundle, lambda1: float, lambda2: float) -> float:
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("fusion weights must be nonnegative")
    return bundle.fused(lambda1, lambda2)


def global_contrast(i_vec: Tensor, t_vec: Tensor) -> Tensor:
    if i_vec.data.shape != t_vec.data.shape:
        raise ValueError("global visual/textual dims differ")
    return cosine(i_vec, t_vec)


def rga_image_to_text(model: MiaModel, parts: Tensor, t_vec: Tensor,
                      lifted_parts: Tensor | None = None):
    """Sentence-guided part attention. Returns (v, aggregate, s_I)."""
    lifted = lifted_parts if lifted_parts is not None \
        else model.mlp("rga.mlp_v", parts)                  # (n, lift)
    scores = rows_cosine(lifted, t_vec)
    if model.config.softmax_temperature != 1.0:
        scores = scores * (1.0 / model.config.softmax_temperature)
    v = scores.softmax()
    aggregate = v @ parts                                   # raw part space
    s_i = cosine(model.mlp("rga.mlp_v", aggregate), t_vec)
    return v, aggregate, s_i


def rga_text_to_image(model: MiaModel, phrases: Tensor, i_vec: Tensor,
                      lifted_phrases: Tensor | None = None):
    """Image-guided phrase attention. Returns (t, aggregate, s_T)."""
    lifted = lifted_phrases if lifted_phrases is not None \
        else model.mlp("rga.mlp_t", phrases)                # (m, lift)
    scores = rows_cosine(lifted, i_vec)
    if model.config.softmax_temperature != 1.0:
        scores = scores * (1.0 / model.config.softmax_temperature)
    t = scores.softmax()
    aggregate = t @ phrases
    s_t = cosine(aggregate, i_vec)
    return t, aggregate, s_t


def bfm_phrase_direction(model: MiaModel, parts: Tensor, phrases: Tensor,
                         lifted_parts: Tensor | None = None,
                         lifted_phrases: Tensor | None = None):
    """Per-phrase part attention. Returns (alpha (m,n), aggregates, s_P)."""
    lp = lifted_parts if lifted_parts is not None else model.mlp("bfm.mlp_v", parts)
    ln = lifted_phrases if lifted_phrases is not None else model.mlp("bfm.mlp_t", phrases)
    scores = cross_rows_cosine(ln, lp)                      # (m, n)
    if model.config.softmax_temperature != 1.0:
        scores = scores * (1.0 / model.config.softmax_temperature)
    alpha = scores.softmax(axis=1)
    aggregates = alpha @ parts                              # (m, part_dim)
    s_p = pairwise_rows_cosine(model.mlp("bfm.mlp_v", aggregates), ln).mean()
    return alpha, aggregates, s_p


def bfm_part_direction(model: MiaModel, parts: Tensor, phrases: Tensor,
                       lifted_parts: Tensor | None = None,
                       lifted_phrases: Tensor | None = None):
    """Per-part phrase attention. Returns (beta (n,m), aggregates, s_N)."""
    lp = lifted_parts if lifted_parts is not None else model.mlp("bfm.mlp_v", parts)
    ln = lifted_phrases if lifted_phrases is not None else model.mlp("bfm.mlp_t", phrases)
    scores = cross_rows_cosine(lp, ln)                      # (n, m)
    if model.config.softmax_temperature != 1.0:
        scores = scores * (1.0 / model.config.softmax_temperature)
    beta = scores.softmax(axis=1)
    aggregates = beta @ phrases                             # (n, lift)
    s_n = pairwise_rows_cosine(model.mlp("bfm.mlp_t", aggregates), lp).mean()
    return beta, aggregates, s_n


def rga_image_rows(model: MiaModel, parts: Tensor, t_mat: Tensor,
                   lifted_parts: Tensor | None = None) -> Tensor:
    """s_I of one image against a stack of caption vectors (B, dim) -> (B,).

    Row j equals rga_image_to_text(model, parts, t_mat[j])[2]; batching the
    captions turns B scalar graphs into one matrix graph."""
    lifted = lifted_parts if lifted_parts is not None \
        else model.mlp("rga.mlp_v", parts)
    scores = cross_rows_cosine(t_mat, lifted)               # (B, n)
    if model.config.softmax_temperature != 1.0:
        scores = scores * (1.0 / model.config.softmax_temperature)
    v = scores.softmax(axis=1)
    aggregates = v @ parts                                  # (B, part_dim)
    return pairwise_rows_cosine(model.mlp("rga.mlp_v", aggregates), t_mat)


def rga_text_rows(model: MiaModel, phrases: Tensor, i_mat: Tensor,
                  lifted_phrases: Tensor | None = None) -> Tensor:
    """s_T of one caption against a stack of image vectors (B, dim) -> (B,).

    Row i equals rga_text_to_image(model, phrases, i_mat[i])[2]."""
    lifted = lifted_phrases if lifted_phrases is not None \
        else model.mlp("rga.mlp_t", phrases)
    scores = cross_rows_cosine(i_mat, lifted)               # (B, m)
    if model.config.softmax_temperature != 1.0:
        scores = scores * (1.0 / model.config.softmax_temperature)
    t = scores.softmax(axis=1)
    aggregates = t @ phrases
    return pairwise_rows_cosine(aggregates, i_mat)


def bfm_phrase_rows(model: MiaModel, parts: Tensor, phrase_mats,
                    lifted_parts: Tensor | None = None,
                    lifted_phrase_mats=None) -> list:
    """s_P of one image against several captions' phrase matrices.

    Entry j equals bfm_phrase_direction(model, parts, phrase_mats[j])[2], or
    None where phrase_mats[j] is None. All captions' phrases are concatenated
    so the attention, aggregation and lift run as one graph; the per-phrase
    rows are then averaged within each caption's segment."""
    present = [j for j, p in enumerate(phrase_mats) if p is not None]
    if not present:
        return [None] * len(phrase_mats)
    lp = lifted_parts if lifted_parts is not None else model.mlp("bfm.mlp_v", parts)
    if lifted_phrase_mats is None:
        lifted_phrase_mats = [None if p is None else model.mlp("bfm.mlp_t", p)
                              for p in phrase_mats]
    ln_cat = concat([lifted_phrase_mats[j] for j in present], axis=0)  # (M, lift)
    scores = cross_rows_cosine(ln_cat, lp)                  # (M, n)
    if model.config.softmax_temperature != 1.0:
        scores = scores * (1.0 / model.config.softmax_temperature)
    alpha = scores.softmax(axis=1)
    aggregates = alpha @ parts                              # (M, part_dim)
    sims = pairwise_rows_cosine(model.mlp("bfm.mlp_v", aggregates), ln_cat)
    out = [None] * len(phrase_mats)
    start = 0
    for j in present:
        m = phrase_mats[j].data.shape[0]
        out[j] = sims[start:start + m].mean()
        start += m
    return out


def bfm_part_rows(model: MiaModel, parts: Tensor, phrase_mats,
                  lifted_parts: Tensor | None = None,
                  lifted_phrase_mats=None) -> list:
    """s_N of one image against several captions' phrase matrices.

    Entry j equals bfm_part_direction(model, parts, phrase_mats[j])[2], or
    None where phrase_mats[j] is None. The per-part attention is computed per
    caption (each softmax spans only that caption's phrases), but the final
    lift and cosine run as one concatenated graph."""
    present = [j for j, p in enumerate(phrase_mats) if p is not None]
    if not present:
        return [None] * len(phrase_mats)
    lp = lifted_parts if lifted_parts is not None else model.mlp("bfm.mlp_v", parts)
    if lifted_phrase_mats is None:
        lifted_phrase_mats = [None if p is None else model.mlp("bfm.mlp_t", p)
                              for p in phrase_mats]
    n = parts.data.shape[0]
    agg_blocks = []
    for j in present:
        scores = cross_rows_cosine(lp, lifted_phrase_mats[j])   # (n, m_j)
        if model.config.softmax_temperature != 1.0:
            scores = scores * (1.0 / model.config.softmax_temperature)
        beta = scores.softmax(axis=1)
        agg_blocks.append(beta @ phrase_mats[j])                # (n, lift)
    lifted_agg = model.mlp("bfm.mlp_t", concat(agg_blocks, axis=0))
    lp_tiled = concat([lp] * len(present), axis=0)
    sims = pairwise_rows_cosine(lifted_agg, lp_tiled)           # (len(present)*n,)
    out = [None] * len(phrase_mats)
    for pos, j in enumerate(present):
        out[j] = sims[pos * n:(pos + 1) * n].mean()
    return out


def pair_similarities(model: MiaModel, i_vec, parts, t_vec, phrases):
    """All five granularity similarities for one image-caption pair, as
    graph Tensors. `phrases` may be None (no-phrase caption)."""
    s_g = global_contrast(i_vec, t_vec)
    _, _, s_i = rga_image_to_text(model, parts, t_vec)
    if phrases is None:
        return s_g, s_i, None, None, None
    _, _, s_t = rga_text_to_image(model, phrases, i_vec)
    _, _, s_p = bfm_phrase_direction(model, parts, phrases)
    _, _, s_n = bfm_part_direction(model, parts, phrases)
    return s_g, s_i, s_t, s_p, s_n


def pair_bundle(model: MiaModel, i_vec, parts, t_vec, phrases) -> SimilarityBundle:
    s_g, s_i, s_t, s_p, s_n = pair_similarities(model, i_vec, parts, t_vec, phrases)
    if s_t is None:
        return SimilarityBundle(s_g.item(), s_i.item(), 0.0, 0.0, 0.0,
                                has_phrases=False)
    return SimilarityBundle(s_g.item(), s_i.item(), s_t.item(),
                            s_p.item(), s_n.item())


def attention_dump(model: MiaModel, i_vec, parts, t_vec, phrases) -> dict:
    """Attention weights for one pair, for the --dump-attn inspection files."""
    v, _, _ = rga_image_to_text(model, parts, t_vec)
    out = {"v": v.data.tolist(), "t": [], "alpha": [], "beta": []}
    if phrases is not None:
        t, _, _ = rga_text_to_image(model, phrases, i_vec)
        alpha, _, _ = bfm_phrase_direction(model, parts, phrases)
        beta, _, _ = bfm_part_direction(model, parts, phrases)
        out["t"] = t.data.tolist()
        out["alpha"] = alpha.data.tolist()
        out["beta"] = beta.data.tolist()
    return out
