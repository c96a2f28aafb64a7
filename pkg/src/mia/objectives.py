"""Training objectives: identity classification, Sum-of-Hinge matching, and
the three per-step composite losses.

Reduction convention: identity losses are means over the batch; each SH
matching term is the raw hinge sum divided by the batch size. Negatives are
drawn within the minibatch only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, cross_rows_cosine, stack
from .alignment import bfm_part_rows, bfm_phrase_rows, rga_image_rows, \
    rga_text_rows
from .encoders import MiaModel


@dataclass
class BatchPair:
    """One matched image-caption pair, ready for the graph."""
    image: np.ndarray              # (3, H, W) in [0, 1]
    sentence_indices: list
    phrase_indices: list           # list of index lists, possibly empty
    label: int                     # dense identity index
    image_key: object = None       # equal keys share one image encoding
    cache_key: object = None       # (record, caption) key for cached encodings


@dataclass
class LossReport:
    l_i: float = 0.0
    l_t: float = 0.0
    l_m_g: float = 0.0
    l_m_it: float = 0.0
    l_m_ti: float = 0.0
    l_m_pn: float = 0.0
    l_m_np: float = 0.0
    total: float = 0.0

    def as_dict(self, epoch: int, step_id: int) -> dict:
        return {"epoch": epoch, "step_id": step_id,
                "L_I": self.l_i, "L_T": self.l_t, "L_M_G": self.l_m_g,
                "L_M_IT": self.l_m_it, "L_M_TI": self.l_m_ti,
                "L_M_PN": self.l_m_pn, "L_M_NP": self.l_m_np,
                "total": self.total}


def identity_loss(model: MiaModel, feature: Tensor, true_id: int) -> Tensor:
    """Negative log probability of the true identity under the shared
    classifier."""
    if not 0 <= true_id < model.num_ids:
        raise ValueError(f"identity {true_id} out of range [0, {model.num_ids})")
    logits = model.params["classifier.weight"] @ feature + model.params["classifier.bias"]
    return -logits.log_softmax()[true_id]


def sh_matching_loss(s: Tensor, margin: float, valid=None) -> Tensor:
    """Sum-of-Hinge loss over a B x B similarity matrix of matched pairs.

    Diagonal entries are matched-pair similarities. Returns the raw hinge
    sum (no normalization); `valid` masks out rows/columns whose similarity
    is undefined (no-phrase captions).
    """
    b = s.data.shape[0]
    if s.data.shape != (b, b):
        raise ValueError(f"similarity matrix must be square, got {s.data.shape}")
    if b == 1:
        return s.sum() * 0.0
    mask = np.ones((b, b))
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        mask *= np.outer(valid, valid)
    np.fill_diagonal(mask, 0.0)
    d = s[np.arange(b), np.arange(b)]
    term_text_neg = (margin - d.reshape(b, 1) + s).relu()   # alpha - S_ii + S_ij
    term_image_neg = (margin - d.reshape(1, b) + s).relu()  # alpha - S_jj + S_ij
    return ((term_text_neg + term_image_neg) * Tensor(mask)).sum()


def encode_batch(model: MiaModel, pairs, need_phrases: bool = True):
    """Encode every pair; image encodings are shared across pairs with the
    same image_key, and all captions (and all their phrases) run through the
    GRU as one padded batch. Returns a list of (i_vec, parts, t_vec, phrases).
    `need_phrases=False` skips phrase encoding for losses that ignore it."""
    image_cache = {}
    images = []
    for k, pair in enumerate(pairs):
        key = pair.image_key if pair.image_key is not None else k
        if key not in image_cache:
            image_cache[key] = model.encode_image(Tensor(pair.image))
        images.append(image_cache[key])

    t_mat = model.sentence_project(
        model.text_batch_encode([p.sentence_indices for p in pairs]))

    phrase_slices = [None] * len(pairs)
    if need_phrases:
        flat, spans = [], []
        for k, pair in enumerate(pairs):
            lists = [ix for ix in pair.phrase_indices if len(ix) > 0]
            if lists:
                spans.append((k, len(flat), len(flat) + len(lists)))
                flat.extend(lists)
        if flat:
            ph_mat = model.phrase_project(model.text_batch_encode(flat))
            for k, lo, hi in spans:
                phrase_slices[k] = ph_mat[lo:hi]

    return [(images[k][0], images[k][1], t_mat[k], phrase_slices[k])
            for k in range(len(pairs))]


def _similarity_matrices(model: MiaModel, encoded, granularities):
    """B x B similarity matrix per requested granularity.

    Convention: entry (i, j) compares pair i's image against pair j's
    caption; the diagonal holds the matched pairs.
    """
    b = len(encoded)
    out = {}
    if "g" in granularities:
        i_mat = stack([e[0] for e in encoded], axis=0)
        t_mat = stack([e[2] for e in encoded], axis=0)
        out["g"] = cross_rows_cosine(i_mat, t_mat)
    if "it" in granularities:
        t_mat = stack([e[2] for e in encoded], axis=0)
        out["it"] = stack([rga_image_rows(model, e[1], t_mat) for e in encoded],
                          axis=0)
    if "ti" in granularities:
        i_mat = stack([e[0] for e in encoded], axis=0)
        cols = [Tensor(np.zeros(b)) if e[3] is None
                else rga_text_rows(model, e[3], i_mat) for e in encoded]
        out["ti"] = stack(cols, axis=0).T   # (i, j) = image i vs caption j
    if "pn" in granularities or "np" in granularities:
        phrase_mats = [e[3] for e in encoded]
        lifted_phrases = [None if p is None else model.mlp("bfm.mlp_t", p)
                          for p in phrase_mats]
        rows_p, rows_n = [], []
        for _, parts, _, _ in encoded:
            lp = model.mlp("bfm.mlp_v", parts)
            row_p = bfm_phrase_rows(model, parts, phrase_mats,
                                    lifted_parts=lp,
                                    lifted_phrase_mats=lifted_phrases)
            row_n = bfm_part_rows(model, parts, phrase_mats,
                                  lifted_parts=lp,
                                  lifted_phrase_mats=lifted_phrases)
            rows_p.append(stack([Tensor(0.0) if s is None else s
                                 for s in row_p], axis=0))
            rows_n.append(stack([Tensor(0.0) if s is None else s
                                 for s in row_n], axis=0))
        out["pn"] = stack(rows_p, axis=0)
        out["np"] = stack(rows_n, axis=0)
    return out


def step_loss(model: MiaModel, pairs, step_id: int, margin: float = 0.2,
              encoded=None):
    """Composite loss of one training step on a batch of matched pairs.

    Returns (scalar Tensor, LossReport). Pairs whose caption has no noun
    phrases contribute nothing to phrase-dependent matching terms.
    `encoded` lets the caller pass precomputed encodings (step 3 freezes
    everything upstream of the BFM MLPs, so encodings are constants there).
    """
    if step_id not in (1, 2, 3):
        raise ValueError(f"unknown training step {step_id}")
    b = len(pairs)
    if encoded is None:
        encoded = encode_batch(model, pairs, need_phrases=step_id != 1)
    report = LossReport()
    terms = []

    if step_id in (1, 2):
        li = [identity_loss(model, e[0], p.label) for e, p in zip(encoded, pairs)]
        lt = [identity_loss(model, e[2], p.label) for e, p in zip(encoded, pairs)]
        l_i = stack(li, axis=0).mean()
        l_t = stack(lt, axis=0).mean()
        report.l_i, report.l_t = l_i.item(), l_t.item()
        terms += [l_i, l_t]

    if step_id == 2:
        valid = [e[3] is not None for e in encoded]
        mats = _similarity_matrices(model, encoded, ("g", "it", "ti"))
        l_g = sh_matching_loss(mats["g"], margin) * (1.0 / b)
        l_it = sh_matching_loss(mats["it"], margin) * (1.0 / b)
        l_ti = sh_matching_loss(mats["ti"], margin, valid=valid) * (1.0 / b)
        report.l_m_g, report.l_m_it, report.l_m_ti = \
            l_g.item(), l_it.item(), l_ti.item()
        terms += [l_g, l_it, l_ti]

    if step_id == 3:
        valid = [e[3] is not None for e in encoded]
        mats = _similarity_matrices(model, encoded, ("pn", "np"))
        l_pn = sh_matching_loss(mats["pn"], margin, valid=valid) * (1.0 / b)
        l_np = sh_matching_loss(mats["np"], margin, valid=valid) * (1.0 / b)
        report.l_m_pn, report.l_m_np = l_pn.item(), l_np.item()
        terms += [l_pn, l_np]

    total = terms[0]
    for t in terms[1:]:
        total = total + t
    report.total = total.item()
    return total, report
