"""Synthetic attribute-person corpus: generation and loading.

Each identity is a distinct tuple of five attributes (hat / shirt / pants /
shoe color plus a carried accessory). Images are four horizontal color
bands with noise and boundary jitter; the accessory is a patch inside the
shirt band. Captions are templated and mention a random subset of 2-4
attributes, so every caption leaves some image bands unmentioned.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tenio, textpipe

COLORS = {
    "red": (0.85, 0.10, 0.10),
    "blue": (0.10, 0.15, 0.85),
    "green": (0.10, 0.70, 0.15),
    "yellow": (0.90, 0.85, 0.10),
    "black": (0.05, 0.05, 0.05),
    "white": (0.95, 0.95, 0.95),
}
ACCESSORIES = {
    "bag": (0.55, 0.30, 0.75),
    "backpack": (0.90, 0.45, 0.10),
    "umbrella": (0.15, 0.75, 0.75),
    "scarf": (0.80, 0.15, 0.55),
    "guitar": (0.50, 0.35, 0.15),
    "helmet": (0.65, 0.65, 0.30),
}
ATTRIBUTE_SLOTS = ("hat", "shirt", "pants", "shoes", "accessory")
# image band index each attribute is rendered in (accessory sits in the shirt band)
ATTRIBUTE_BAND = {"hat": 0, "shirt": 1, "accessory": 1, "pants": 2, "shoes": 3}

IMAGE_SHAPE = (3, 192, 64)
NOISE_SIGMA = 0.05
BOUNDARY_JITTER = 4


@dataclass(frozen=True)
class PersonSpec:
    identity: int
    hat: str
    shirt: str
    pants: str
    shoes: str
    accessory: str

    def attribute(self, slot: str) -> str:
        return getattr(self, slot)

    def tuple(self):
        return (self.hat, self.shirt, self.pants, self.shoes, self.accessory)


def sample_person_specs(count: int, rng) -> list:
    """Distinct attribute tuples, one per identity."""
    color_names = list(COLORS)
    acc_names = list(ACCESSORIES)
    seen = set()
    specs = []
    while len(specs) < count:
        t = (rng.choice(color_names), rng.choice(color_names),
             rng.choice(color_names), rng.choice(color_names),
             rng.choice(acc_names))
        if t in seen:
            continue
        seen.add(t)
        specs.append(PersonSpec(len(specs), *t))
    return specs


def render_image(spec: PersonSpec, rng) -> np.ndarray:
    """(3, 192, 64) float array in [0, 1]."""
    _, height, width = IMAGE_SHAPE
    band_h = height // 4
    bounds = [0]
    for k in range(1, 4):
        bounds.append(k * band_h + int(rng.integers(-BOUNDARY_JITTER,
                                                    BOUNDARY_JITTER + 1)))
    bounds.append(height)
    img = np.zeros(IMAGE_SHAPE)
    band_colors = [COLORS[spec.hat], COLORS[spec.shirt],
                   COLORS[spec.pants], COLORS[spec.shoes]]
    for b, color in enumerate(band_colors):
        img[:, bounds[b]:bounds[b + 1], :] = np.asarray(color)[:, None, None]
    # accessory patch inside the shirt band
    acc = np.asarray(ACCESSORIES[spec.accessory])
    r0 = bounds[1] + 8
    img[:, r0:r0 + 20, 38:58] = acc[:, None, None]
    img += rng.normal(0.0, NOISE_SIGMA, size=IMAGE_SHAPE)
    return np.clip(img, 0.0, 1.0)


_CLAUSES = {
    "hat": ["a {v} hat", "a {v} cap"],
    "shirt": ["a {v} shirt", "a {v} top"],
    "pants": ["{v} pants", "{v} trousers"],
    "shoes": ["{v} shoes", "a pair of {v} shoes"],
    "accessory": ["carrying a {v}", "holding a {v}", "with a {v}"],
}
_OPENERS = [
    "a person wearing",
    "a man wearing",
    "a woman wearing",
    "the person is wearing",
    "a pedestrian dressed in",
]
# words per attribute slot that the mention mask keys on
_SLOT_WORDS = {
    "hat": {"hat", "cap"},
    "shirt": {"shirt", "top"},
    "pants": {"pants", "trousers"},
    "shoes": {"shoes"},
    "accessory": set(ACCESSORIES),
}


def make_caption(spec: PersonSpec, rng):
    """Returns (caption text, mentioned attribute slots)."""
    k = int(rng.integers(2, 5))  # 2..4 attributes
    slots = list(rng.choice(ATTRIBUTE_SLOTS, size=k, replace=False))
    clauses = []
    for slot in slots:
        template = _CLAUSES[slot][int(rng.integers(len(_CLAUSES[slot])))]
        clauses.append(template.format(v=spec.attribute(slot)))
    opener = _OPENERS[int(rng.integers(len(_OPENERS)))]
    if len(clauses) == 1:
        body = clauses[0]
    else:
        body = ", ".join(clauses[:-1]) + " and " + clauses[-1]
    return f"{opener} {body}.", sorted(slots)


def mentioned_bands(slots) -> list:
    return sorted({ATTRIBUTE_BAND[s] for s in slots})


def synth_generate(num_ids: int, images_per_id: int, seed: int, out_dir,
                   val_ids: int = 0, test_ids: int = 0) -> dict:
    """Write images, per-split manifests and the mention-mask sidecar.

    Identities are disjoint across splits. Deterministic per seed: every
    image/caption derives from its own rng stream keyed by (seed, index).
    Returns {split: manifest_path}.
    """
    if num_ids < 2:
        raise ValueError("need at least 2 training identities")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    total = num_ids + val_ids + test_ids
    specs = sample_person_specs(total, np.random.default_rng([seed, 0]))
    split_of = {}
    for i, spec in enumerate(specs):
        split_of[spec.identity] = ("train" if i < num_ids
                                   else "val" if i < num_ids + val_ids else "test")

    manifests = {s: [] for s in ("train", "val", "test")}
    masks = []
    image_index = 0
    for spec in specs:
        for _ in range(images_per_id):
            rng = np.random.default_rng([seed, 1 + image_index])
            img = render_image(spec, rng)
            rel = f"images/img_{image_index:05d}.ten"
            tenio.write_tensor(out_dir / rel, img)
            captions = []
            for k in range(2):
                caption, slots = make_caption(spec, rng)
                captions.append(caption)
                masks.append({"caption_id": f"img_{image_index:05d}#{k}",
                              "attrs": slots,
                              "bands": mentioned_bands(slots)})
            manifests[split_of[spec.identity]].append(
                {"person_id": spec.identity, "image_path": rel,
                 "captions": captions})
            image_index += 1

    paths = {}
    for split, records in manifests.items():
        if not records:
            continue
        path = out_dir / f"{split}.jsonl"
        with open(path, "w", encoding="utf-8") as f:
            for rec in records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        paths[split] = path
    with open(out_dir / "masks.jsonl", "w", encoding="utf-8") as f:
        for m in masks:
            f.write(json.dumps(m, sort_keys=True) + "\n")
    return paths


@dataclass
class Record:
    person_id: int            # original identity
    label: int                # dense 0..ID-1 index within the split
    image_path: Path
    image_id: str             # e.g. "img_00012"
    captions: list            # 2 raw strings
    tokens: list              # per caption: list of Token
    phrases: list             # per caption: list of NounPhrase


class Dataset:
    """One split: records with cached text processing and lazy images."""

    def __init__(self, records):
        self.records = records
        self._image_cache = {}
        self.num_ids = len({r.person_id for r in records})

    def __len__(self):
        return len(self.records)

    def image(self, idx: int) -> np.ndarray:
        rec = self.records[idx]
        if idx not in self._image_cache:
            arr = tenio.read_tensor(rec.image_path)
            self._image_cache[idx] = arr
        return self._image_cache[idx]

    def pairs(self):
        """Every (record index, caption index) matched pair."""
        return [(i, k) for i in range(len(self.records)) for k in range(2)]


def load_dataset(manifest_path, lexicon=None) -> Dataset:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    raw = []
    with open(manifest_path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if len(rec["captions"]) != 2:
                raise ValueError(
                    f"{manifest_path}:{lineno}: expected exactly 2 captions")
            raw.append(rec)
    # dense labels, stable under record permutation: sorted by original id
    ids = sorted({r["person_id"] for r in raw})
    dense = {pid: i for i, pid in enumerate(ids)}
    records = []
    for rec in raw:
        path = base / rec["image_path"]
        if not path.exists():
            raise FileNotFoundError(f"missing image file {path}")
        tokens = [textpipe.tokenize(c) for c in rec["captions"]]
        phrases = [textpipe.chunk_noun_phrases(
            textpipe.pos_tag(t, lexicon=lexicon)) for t in tokens]
        records.append(Record(
            person_id=rec["person_id"], label=dense[rec["person_id"]],
            image_path=path, image_id=path.stem,
            captions=list(rec["captions"]), tokens=tokens, phrases=phrases))
    return Dataset(records)


def load_masks(mask_path) -> dict:
    out = {}
    with open(mask_path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                m = json.loads(line)
                out[m["caption_id"]] = m
    return out
