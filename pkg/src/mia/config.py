"""Model and training configuration with paper-scale and desk-scale defaults."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class ModelConfig:
    # text side
    embed_dim: int = 300          # word embedding E
    hidden_dim: int = 1024        # GRU hidden H per direction
    global_dim: int = 1024        # V = C = G, shared global feature dim
    # visual side
    image_channels: int = 3
    image_height: int = 192
    image_width: int = 64
    backbone_channels: tuple = (8, 16, 32, 64)
    part_dim: int = 256           # per-part feature dim after the 1x1 conv
    n_parts: int = 6
    # alignment MLPs
    lift_dim: int = 1024          # P = N, MLP output dim
    mlp_hidden: int = 512
    softmax_temperature: float = 1.0
    # scale factor on the Glorot init of the global projection heads
    head_init_scale: float = 1.0
    # scale factor on the Glorot init of the shared identity classifier.
    # Large values make the classifier directionally stable under the
    # optimizer's fixed-size steps, so it acts as a set of fixed identity
    # prototypes that both modalities' features are pulled toward — the
    # mechanism that aligns the two modalities in cosine space
    classifier_init_scale: float = 1.0
    seed: int = 42

    def __post_init__(self):
        if self.lift_dim != self.global_dim:
            raise ValueError("lift_dim must equal global_dim (cosine compatibility)")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Small dimensions for CPU desk-scale experiments."""
        base = dict(embed_dim=32, hidden_dim=48, global_dim=32,
                    backbone_channels=(8, 12, 16, 24), part_dim=24,
                    lift_dim=32, mlp_hidden=96, softmax_temperature=0.25)
        base.update(overrides)
        return cls(**base)


@dataclass
class TrainConfig:
    batch_size: int = 32          # paper uses 96; desk default 32
    step1_lr: float = 0.001
    step1_epochs: int = 10
    step2_lr: float = 0.0002
    step2_lr_decay_every: int = 10   # x0.1 each decade of epochs
    step2_epochs: int = 15
    step3_lr: float = 0.0002
    step3_epochs: int = 5
    margin: float = 0.2
    lambda1: float = 1.0
    lambda2: float = 0.5
    freeze_backbone_step1: bool = False
    mirror_augment: bool = True
    # initialize the relation / fine-grained branches from the trained global
    # branch when their step begins (falls back to random init when the MLP
    # hidden width cannot express the affine reconstruction)
    warm_start: bool = True
    # function-preserving shrink applied at step-2/step-3 entry to the global
    # heads (classifier absorbs the inverse factor) and the alignment MLPs;
    # turns the optimizer's fixed-size steps into large relative rotations
    # so the matching objectives can reshape the cosine geometry. 1 disables.
    entry_rescale: float = 0.02
    seed: int = 42

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = dict(step1_epochs=120, step2_epochs=20, step3_epochs=80)
        base.update(overrides)
        return cls(**base)


def _coerce(current, raw: str):
    if isinstance(current, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    return raw.strip()


def load_config_file(path, model: ModelConfig, train: TrainConfig):
    """Apply `key = value` lines from a UTF-8 config file onto the two configs.

    Unknown keys raise. CLI flags are applied by the caller afterwards and
    therefore override file values.
    """
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        found = False
        for cfg in (model, train):
            if hasattr(cfg, key):
                setattr(cfg, key, _coerce(getattr(cfg, key), raw))
                found = True
        if not found:
            raise ValueError(f"{path}:{lineno}: unknown config key '{key}'")
    return model, train


def config_as_dict(model: ModelConfig, train: TrainConfig) -> dict:
    return {**dataclasses.asdict(model), **dataclasses.asdict(train)}
