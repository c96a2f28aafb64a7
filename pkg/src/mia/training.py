"""Three-step training: Adam, learning-rate schedule, per-step freezing,
checkpointing and the JSON-lines training log."""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from . import tenio, textpipe
from .autodiff import Tensor, no_grad
from .config import ModelConfig, TrainConfig
from .data import Dataset
from .encoders import MiaModel
from .objectives import BatchPair, step_loss


class Adam:
    """Bias-corrected adaptive-moment optimizer over named Parameters."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"NaN/Inf gradient in {p.name}")
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> dict:
        out = {"t": np.array([float(self.t)])}
        for name in self.m:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        return out


def lr_schedule(step_id: int, epoch: int, config: TrainConfig) -> float:
    """Per-step learning rate; step 2 decays x0.1 each decade of epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if step_id == 1:
        return config.step1_lr
    if step_id == 2:
        return config.step2_lr * 0.1 ** (epoch // config.step2_lr_decay_every)
    if step_id == 3:
        return config.step3_lr
    raise ValueError(f"unknown training step {step_id}")


def build_vocab_for(dataset: Dataset) -> textpipe.Vocabulary:
    captions = [c for rec in dataset.records for c in rec.captions]
    return textpipe.build_vocab(captions, min_count=1)


def make_pair(dataset: Dataset, vocab, rec_idx: int, cap_idx: int,
              mirror: bool = False) -> BatchPair:
    rec = dataset.records[rec_idx]
    img = dataset.image(rec_idx)
    if mirror:
        img = img[:, :, ::-1].copy()
    sent = textpipe.numericalize(rec.tokens[cap_idx], vocab)
    phr = [textpipe.numericalize(p.tokens, vocab) for p in rec.phrases[cap_idx]]
    return BatchPair(image=img, sentence_indices=sent, phrase_indices=phr,
                     label=rec.label, image_key=(rec_idx, mirror),
                     cache_key=(rec_idx, cap_idx))


class Trainer:
    """Owns the model, dataset and output directory; runs steps in order."""

    STEP_EPOCHS = {1: "step1_epochs", 2: "step2_epochs", 3: "step3_epochs"}

    def __init__(self, dataset: Dataset, model_config: ModelConfig,
                 train_config: TrainConfig, out_dir):
        if dataset.num_ids < 2:
            raise ValueError("dataset must contain at least 2 identities")
        if not dataset.records:
            raise ValueError("empty training split")
        self.dataset = dataset
        self.mc = model_config
        self.tc = train_config
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.vocab = build_vocab_for(dataset)
        self.model = MiaModel(model_config, len(self.vocab), dataset.num_ids,
                              freeze_backbone_step1=train_config.freeze_backbone_step1)
        self.completed_steps = []
        self.log_path = self.out_dir / "train_log.jsonl"

    # -- checkpoints ------------------------------------------------------

    def _meta(self) -> dict:
        mc = self.mc
        dims = [mc.embed_dim, mc.hidden_dim, mc.global_dim, mc.part_dim,
                mc.lift_dim, mc.mlp_hidden, mc.n_parts,
                *mc.backbone_channels]
        return {"meta/completed_steps":
                np.asarray(self.completed_steps or [0], dtype=np.float64),
                "meta/num_ids": np.array([float(self.dataset.num_ids)]),
                "meta/vocab_size": np.array([float(len(self.vocab))]),
                "meta/model_config": np.asarray(dims, dtype=np.float64),
                "meta/softmax_temperature":
                    np.array([float(mc.softmax_temperature)])}

    def save_checkpoint(self, path, optimizer: Adam | None = None):
        entries = {**self.model.state_dict(), **self._meta()}
        opt = optimizer.state_arrays() if optimizer is not None else None
        tenio.write_checkpoint(path, entries, opt)

    def load_checkpoint(self, path):
        params, _ = tenio.read_checkpoint(path)
        steps = params.pop("meta/completed_steps", np.array([0.0]))
        for key in ("meta/num_ids", "meta/vocab_size", "meta/model_config",
                    "meta/softmax_temperature"):
            params.pop(key, None)
        self.model.load_state_dict(params)
        self.completed_steps = [int(s) for s in steps if s > 0]

    # -- epoch machinery -----------------------------------------------------

    def _log(self, record: dict):
        with open(self.log_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record) + "\n")

    def _epoch_batches(self, rng, augment: bool):
        all_pairs = self.dataset.pairs()
        order = rng.permutation(len(all_pairs))
        mirror = {}
        if augment and self.tc.mirror_augment:
            flips = rng.random(len(self.dataset.records)) < 0.5
            mirror = {i: bool(flips[i]) for i in range(len(self.dataset.records))}
        batch_size = self.tc.batch_size
        for lo in range(0, len(order), batch_size):
            chunk = order[lo:lo + batch_size]
            yield [make_pair(self.dataset, self.vocab, *all_pairs[k],
                             mirror=mirror.get(all_pairs[k][0], False))
                   for k in chunk]

    def run_step(self, step_id: int):
        expected = self.completed_steps[-1] + 1 if self.completed_steps else 1
        if step_id != expected:
            raise RuntimeError(
                f"training steps must run in order: next is step {expected}, "
                f"got step {step_id}")
        epochs = getattr(self.tc, self.STEP_EPOCHS[step_id])
        if self.tc.warm_start:
            if step_id == 2:
                self.model.warm_start_relation()
            elif step_id == 3:
                self.model.warm_start_fine()
        if self.tc.entry_rescale != 1.0:
            if step_id == 2:
                self.model.rescale_relation(self.tc.entry_rescale)
            elif step_id == 3:
                self.model.rescale_fine(self.tc.entry_rescale)
        self.model.set_step(step_id)
        optimizer = Adam(self.model.trainable(step_id))  # fresh moments per step
        rng = np.random.default_rng([self.tc.seed, step_id])
        cached = self._cached_encodings() if step_id == 3 else None
        for epoch in range(epochs):
            lr = lr_schedule(step_id, epoch, self.tc)
            t0 = time.monotonic()
            last_report = None
            # step 3 freezes every encoder, so it trains on cached encodings
            # and skips the stochastic mirror augmentation
            for batch in self._epoch_batches(rng, augment=step_id != 3):
                self.model.zero_grads()
                loss, report = self._batch_loss(batch, step_id, cached)
                loss.backward()
                optimizer.step(lr)
                last_report = report
            if last_report is not None:
                rec = last_report.as_dict(epoch, step_id)
                rec["lr"] = lr
                rec["seconds"] = round(time.monotonic() - t0, 3)
                self._log(rec)
        self.model.set_step(None)
        self.completed_steps.append(step_id)
        self.save_checkpoint(self.out_dir / f"step{step_id}.miac", optimizer)

    def _batch_loss(self, batch, step_id, cached):
        if cached is None:
            return step_loss(self.model, batch, step_id, margin=self.tc.margin)
        encoded = [cached[p.cache_key] for p in batch]
        return step_loss(self.model, batch, step_id, margin=self.tc.margin,
                         encoded=encoded)

    def _cached_encodings(self) -> dict:
        """Constant encodings for step 3 (everything upstream is frozen)."""
        cache = {}
        with no_grad():
            image_enc = {}
            for rec_idx in range(len(self.dataset.records)):
                image_enc[rec_idx] = self.model.encode_image(
                    Tensor(self.dataset.image(rec_idx)))
            for rec_idx, cap_idx in self.dataset.pairs():
                pair = make_pair(self.dataset, self.vocab, rec_idx, cap_idx)
                t_vec, phrases = self.model.encode_caption(
                    pair.sentence_indices, pair.phrase_indices)
                i_vec, parts = image_enc[rec_idx]
                cache[(rec_idx, cap_idx)] = (
                    Tensor(i_vec.data), Tensor(parts.data),
                    Tensor(t_vec.data),
                    None if phrases is None else Tensor(phrases.data))
        return cache

    def run(self, steps=(1, 2, 3)):
        for step_id in steps:
            self.run_step(step_id)
        final = self.out_dir / "final.miac"
        self.save_checkpoint(final)
        return final


def load_trained_model(ckpt_path, train_dataset: Dataset):
    """Rebuild a model from a checkpoint plus the corpus it was trained on.

    The vocabulary is rebuilt deterministically from the training captions;
    the checkpoint metadata pins dimensions and identity count.
    """
    params, _ = tenio.read_checkpoint(ckpt_path)
    dims = params.pop("meta/model_config", None)
    num_ids = int(params.pop("meta/num_ids", np.array([0.0]))[0])
    vocab_size = int(params.pop("meta/vocab_size", np.array([0.0]))[0])
    temperature = float(params.pop("meta/softmax_temperature",
                                   np.array([1.0]))[0])
    params.pop("meta/completed_steps", None)
    if dims is None:
        raise ValueError(f"{ckpt_path}: missing model-config metadata")
    dims = [int(d) for d in dims]
    config = ModelConfig(embed_dim=dims[0], hidden_dim=dims[1], global_dim=dims[2],
                         part_dim=dims[3], lift_dim=dims[4], mlp_hidden=dims[5],
                         n_parts=dims[6], backbone_channels=tuple(dims[7:]),
                         softmax_temperature=temperature)
    vocab = build_vocab_for(train_dataset)
    if len(vocab) != vocab_size:
        raise ValueError(f"corpus vocabulary size {len(vocab)} does not match "
                         f"checkpoint ({vocab_size}); wrong corpus?")
    model = MiaModel(config, vocab_size, num_ids)
    model.load_state_dict(params)
    return model, vocab
