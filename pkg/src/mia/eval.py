"""Retrieval evaluation: R@K, the similarity-bundle cache, and lambda sweeps.

Queries are captions, the gallery is images (text -> image retrieval). A
query counts as a hit at K when any of the top-K gallery images belongs to
the query's person.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .alignment import (attention_dump, bfm_part_rows, bfm_phrase_rows,
                        rga_image_rows, rga_text_rows)
from .autodiff import Tensor, cross_rows_cosine, no_grad, stack
from .data import Dataset
from .encoders import MiaModel
from .training import make_pair

GRANULARITIES = ("sG", "sR", "sL", "sF")


@dataclass
class RetrievalReport:
    r1: float
    r5: float
    r10: float
    granularity: str
    rankings: np.ndarray  # (Q, G) gallery indices, best first

    @property
    def total(self) -> float:
        return self.r1 + self.r5 + self.r10

    def as_dict(self) -> dict:
        return {"granularity": self.granularity, "R@1": self.r1,
                "R@5": self.r5, "R@10": self.r10, "Total": self.total}


def recall_at_k(s: np.ndarray, query_ids, gallery_ids, k: int) -> float:
    """Fraction of queries with a correct-person image in the top k.

    Ties rank the lower gallery index first.
    """
    s = np.asarray(s, dtype=np.float64)
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    if s.shape != (len(query_ids), len(gallery_ids)):
        raise ValueError(f"matrix {s.shape} vs {len(query_ids)} queries, "
                         f"{len(gallery_ids)} gallery items")
    if k < 1:
        raise ValueError("k must be >= 1")
    hits = 0
    for q in range(s.shape[0]):
        top = np.argsort(-s[q], kind="stable")[:k]
        if np.any(gallery_ids[top] == query_ids[q]):
            hits += 1
    return hits / s.shape[0]


def rank_gallery(s: np.ndarray) -> np.ndarray:
    return np.argsort(-s, axis=1, kind="stable")


class BundleCache:
    """Per-(caption, image) five-similarity bundles for one split; fusion is
    a cheap affine pass so lambda sweeps reuse the cache."""

    def __init__(self, model: MiaModel, dataset: Dataset, vocab):
        self.dataset = dataset
        self.queries = dataset.pairs()  # each caption is an independent query
        self.query_ids = np.array(
            [dataset.records[i].person_id for i, _ in self.queries])
        self.gallery_ids = np.array([r.person_id for r in dataset.records])
        q, g = len(self.queries), len(dataset.records)
        self.s = np.zeros((q, g, 5))       # s_G, s_I, s_T, s_P, s_N
        self.has_phrases = np.ones(q, dtype=bool)
        with no_grad():
            images = []
            for i in range(g):
                i_vec, parts = model.encode_image(Tensor(dataset.image(i)))
                images.append((i_vec, parts,
                               model.mlp("rga.mlp_v", parts),
                               model.mlp("bfm.mlp_v", parts)))
            t_vecs, phrase_mats, bfm_phrases = [], [], []
            for qi, (rec_idx, cap_idx) in enumerate(self.queries):
                pair = make_pair(dataset, vocab, rec_idx, cap_idx)
                t_vec, phrases = model.encode_caption(pair.sentence_indices,
                                                      pair.phrase_indices)
                t_vecs.append(t_vec)
                phrase_mats.append(phrases)
                if phrases is None:
                    self.has_phrases[qi] = False
                    bfm_phrases.append(None)
                else:
                    bfm_phrases.append(model.mlp("bfm.mlp_t", phrases))
            t_mat = stack(t_vecs, axis=0)
            i_mat = stack([im[0] for im in images], axis=0)
            self.s[:, :, 0] = cross_rows_cosine(t_mat, i_mat).data
            for gi, (_, parts, parts_rga, parts_bfm) in enumerate(images):
                self.s[:, gi, 1] = rga_image_rows(
                    model, parts, t_mat, lifted_parts=parts_rga).data
                s_p = bfm_phrase_rows(model, parts, phrase_mats,
                                      lifted_parts=parts_bfm,
                                      lifted_phrase_mats=bfm_phrases)
                s_n = bfm_part_rows(model, parts, phrase_mats,
                                    lifted_parts=parts_bfm,
                                    lifted_phrase_mats=bfm_phrases)
                self.s[:, gi, 3] = [0.0 if v is None else v.item() for v in s_p]
                self.s[:, gi, 4] = [0.0 if v is None else v.item() for v in s_n]
            for qi, phrases in enumerate(phrase_mats):
                if phrases is not None:
                    self.s[qi, :, 2] = rga_text_rows(model, phrases, i_mat).data

    def matrix(self, granularity: str, lambda1: float, lambda2: float) -> np.ndarray:
        s_g, s_i, s_t, s_p, s_n = (self.s[:, :, k] for k in range(5))
        s_r = np.where(self.has_phrases[:, None], (s_i + s_t) / 2, s_i)
        s_l = (s_p + s_n) / 2
        if granularity == "sG":
            return s_g
        if granularity == "sR":
            return s_r
        if granularity == "sL":
            return s_l
        if granularity == "sF":
            return s_g + lambda1 * s_r + lambda2 * s_l
        raise ValueError(f"unknown granularity {granularity!r}")


def evaluate(cache: BundleCache, granularity: str = "sF",
             lambda1: float = 1.0, lambda2: float = 0.5) -> RetrievalReport:
    s = cache.matrix(granularity, lambda1, lambda2)
    return RetrievalReport(
        r1=recall_at_k(s, cache.query_ids, cache.gallery_ids, 1),
        r5=recall_at_k(s, cache.query_ids, cache.gallery_ids, 5),
        r10=recall_at_k(s, cache.query_ids, cache.gallery_ids, 10),
        granularity=granularity,
        rankings=rank_gallery(s))


def sweep(cache: BundleCache, lambda1_grid, lambda2_grid) -> list:
    if not len(lambda1_grid) or not len(lambda2_grid):
        raise ValueError("sweep grids must be non-empty")
    rows = []
    for l1 in lambda1_grid:
        for l2 in lambda2_grid:
            rep = evaluate(cache, "sF", l1, l2)
            rows.append({"lambda1": float(l1), "lambda2": float(l2),
                         **rep.as_dict()})
    return rows


def dump_attention(model: MiaModel, dataset: Dataset, vocab) -> list:
    """Attention weights for every matched pair of the split."""
    out = []
    with no_grad():
        for rec_idx, cap_idx in dataset.pairs():
            rec = dataset.records[rec_idx]
            pair = make_pair(dataset, vocab, rec_idx, cap_idx)
            i_vec, parts = model.encode_image(Tensor(pair.image))
            t_vec, phrases = model.encode_caption(pair.sentence_indices,
                                                  pair.phrase_indices)
            entry = attention_dump(model, i_vec, parts, t_vec, phrases)
            entry["pair_id"] = f"{rec.image_id}#{cap_idx}"
            out.append(entry)
    return out
