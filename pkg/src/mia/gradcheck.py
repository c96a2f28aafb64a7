"""Finite-difference verification of the full step-2 and step-3 losses."""

from __future__ import annotations

import numpy as np

from .autodiff import finite_difference_check
from .config import ModelConfig
from .data import make_caption, render_image, sample_person_specs
from .encoders import MiaModel
from .objectives import BatchPair, step_loss
from .textpipe import build_vocab, extract_phrases, numericalize, tokenize


def build_check_batch(model: MiaModel | None = None, vocab=None, pairs: int = 4,
                      seed: int = 7, config: ModelConfig | None = None):
    """A small in-memory batch of matched pairs (one identity each), plus a
    model sized to its vocabulary. Pass the training vocabulary along with a
    pretrained model so token indices stay in range."""
    rng = np.random.default_rng([seed, 99])
    specs = sample_person_specs(pairs, rng)
    captions, images = [], []
    for spec in specs:
        images.append(render_image(spec, rng))
        captions.append(make_caption(spec, rng)[0])
    if vocab is None:
        vocab = build_vocab(captions)
    if model is None:
        config = config or ModelConfig.desk(seed=seed)
        model = MiaModel(config, len(vocab), num_ids=pairs)
    batch = []
    for label, (img, caption) in enumerate(zip(images, captions)):
        toks = tokenize(caption)
        batch.append(BatchPair(
            image=img,
            sentence_indices=numericalize(toks, vocab),
            phrase_indices=[numericalize(p.tokens, vocab)
                            for p in extract_phrases(caption)],
            label=label, image_key=label))
    return model, batch


def _stratified_picks(params, per_module: int, rng):
    """Sample entries so every top-level parameter group is covered;
    round-robin over groups so truncation keeps the coverage balanced."""
    groups = {}
    for idx, p in enumerate(params):
        groups.setdefault(p.name.split(".")[0], []).append(idx)
    picks = []
    for _ in range(per_module):
        for indices in groups.values():
            pi = int(rng.choice(indices))
            picks.append((pi, int(rng.integers(params[pi].data.size))))
    return picks


def run_grad_check(model: MiaModel, batch, margin: float = 0.2,
                   sample_count: int = 200, h: float = 1e-5,
                   tolerance: float = 1e-4, seed: int = 0) -> dict:
    """Check analytic gradients of the step-2 and step-3 composite losses.

    Samples are stratified over parameter groups so every module is hit;
    all parameters carry gradients here (no step freezing), since the
    step-3 loss still depends on frozen encoders through the forward pass.
    """
    rng = np.random.default_rng(seed)
    model.set_step(None)
    params = model.parameters()
    n_groups = len({p.name.split(".")[0] for p in params})
    per_module = max(1, sample_count // (2 * n_groups))
    results = {}
    for step_id in (2, 3):
        def builder(step=step_id):
            return step_loss(model, batch, step, margin=margin)[0]

        # oversample so entries skipped at ReLU kinks still leave full coverage
        picks = _stratified_picks(params, 3 * per_module, rng)
        results[f"step{step_id}"] = finite_difference_check(
            builder, params, sample_count=per_module * n_groups,
            h=h, tolerance=tolerance, rng=rng, picks=picks)
    results["passed"] = all(r["passed"] for r in results.values())
    results["max_rel_error"] = max(r["max_rel_error"]
                                   for r in results.values() if isinstance(r, dict))
    return results
