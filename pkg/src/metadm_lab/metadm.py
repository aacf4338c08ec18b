"""Pseudo-sample generation for few-shot training.

Low-strength image-to-image outputs ("good" samples) join their source's
class. Higher-strength outputs ("bad" samples) go to fake classes, either
one fake twin per real class or a single shared fake class built from a
per-class subsample.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import datasets
from .diffusion import NoiseSchedule, image_generator, img2img_batch
from .episodic import ClassId, EpisodePool
from .errors import ConfigError, IntegrityError

GOOD_STREAM = 1
BAD_STREAM = 2
SUBSAMPLE_STREAM = 3


class Strategy(str, enum.Enum):
    PER_CLASS_EXTRA = "per-class-extra"
    SINGLE_EXTRA = "single-extra"


class Provenance(str, enum.Enum):
    ORIGINAL = "original"
    GOOD = "good"
    BAD = "bad"


@dataclass
class MetaDMConfig:
    good_strength: float = 0.05
    bad_strength: float = 0.2
    strategy: Strategy = Strategy.PER_CLASS_EXTRA
    bad_per_class: int = 5
    augment_enabled: bool = True
    sharpen_enabled: bool = True
    seed: int = 0
    good_as_query: bool = True
    batch_size: int = 64

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)

    def validate(self, active: bool = True) -> "MetaDMConfig":
        for name in ("good_strength", "bad_strength"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.bad_per_class < 1:
            raise ConfigError(f"bad_per_class must be >= 1, got {self.bad_per_class}")
        if active and not (self.augment_enabled or self.sharpen_enabled):
            raise ConfigError("Meta-DM is active but both augmentation and sharpening are disabled")
        return self

    def to_json(self) -> dict:
        d = asdict(self)
        d["strategy"] = self.strategy.value
        return d


@dataclass
class Example:
    image: torch.Tensor
    class_id: ClassId
    provenance: Provenance
    source_index: int | None = None


@dataclass
class AugmentedDataset:
    """Originals plus generated examples.

    ``class_table`` maps every fake class to the real class it was derived
    from, or ``None`` for the shared fake class.
    """

    examples: list
    real_classes: list
    class_table: dict = field(default_factory=dict)
    digest: str = ""

    @property
    def fake_classes(self) -> list:
        return sorted(self.class_table)

    def count(self, provenance: Provenance) -> int:
        return sum(e.provenance == provenance for e in self.examples)

    def to_pool(self, good_as_query: bool = True) -> EpisodePool:
        """Episode pool for training: real classes with goods merged in, fakes attached."""
        real, fake, queryable = {}, {}, {}
        for cid in self.real_classes:
            members = [e for e in self.examples if e.class_id == cid]
            real[cid] = torch.stack([e.image for e in members])
            if not good_as_query:
                queryable[cid] = torch.tensor([e.provenance == Provenance.ORIGINAL for e in members])
        for fid in self.fake_classes:
            fake[fid] = torch.stack([e.image for e in self.examples if e.class_id == fid])
        twins = {src: fid for fid, src in self.class_table.items() if src is not None}
        shared = next((fid for fid, src in self.class_table.items() if src is None), None)
        return EpisodePool(real, fake, queryable, twins, shared)


def flatten(pool: dict) -> list:
    """Originals in canonical order (classes ascending, images in stored order)."""
    out = []
    for cid in sorted(pool):
        for img in pool[cid]:
            out.append(Example(img, cid, Provenance.ORIGINAL, len(out)))
    return out


def _require_denoiser(denoiser):
    if denoiser is None or not getattr(denoiser, "trained", False):
        raise IntegrityError("generation needs a trained denoiser checkpoint")


def _generate(denoiser, schedule, sources, strength, seed, stream, batch_size):
    """Run img2img over ``sources`` = [(image, source_index)] in fixed-size chunks."""
    outs = []
    for start in range(0, len(sources), batch_size):
        chunk = sources[start:start + batch_size]
        imgs = torch.stack([img for img, _ in chunk])
        gens = [image_generator(seed, stream, idx) for _, idx in chunk]
        outs.append(img2img_batch(denoiser, imgs, strength, schedule, gens))
    return torch.cat(outs) if outs else torch.empty(0)


def first_fake_index(pool: dict) -> int:
    return max(c.index for c in pool) + 1


def generate_good(pool: dict, denoiser, cfg: MetaDMConfig, schedule: NoiseSchedule) -> list:
    """One same-class sample per original image, at ``good_strength``."""
    _require_denoiser(denoiser)
    originals = flatten(pool)
    imgs = _generate(denoiser, schedule, [(e.image, e.source_index) for e in originals],
                     cfg.good_strength, cfg.seed, GOOD_STREAM, cfg.batch_size)
    return [Example(img, e.class_id, Provenance.GOOD, e.source_index) for img, e in zip(imgs, originals)]


def generate_bad_per_class(pool: dict, denoiser, cfg: MetaDMConfig, schedule: NoiseSchedule,
                           fake_start: int | None = None):
    """One bad sample per original, each sent to its class's fake twin.

    Returns ``(examples, class_table)``.
    """
    _require_denoiser(denoiser)
    fake_start = first_fake_index(pool) if fake_start is None else fake_start
    twin = {cid: ClassId(fake_start + k, False) for k, cid in enumerate(sorted(pool))}
    originals = flatten(pool)
    imgs = _generate(denoiser, schedule, [(e.image, e.source_index) for e in originals],
                     cfg.bad_strength, cfg.seed, BAD_STREAM, cfg.batch_size)
    out = [Example(img, twin[e.class_id], Provenance.BAD, e.source_index) for img, e in zip(imgs, originals)]
    return out, {f: r for r, f in twin.items()}


def subsample_indices(pool: dict, per_class: int, seed: int) -> list:
    """Flat source indices of ``per_class`` images drawn from each class."""
    chosen, offset = [], 0
    for cid in sorted(pool):
        n = pool[cid].shape[0]
        if n < per_class:
            raise ConfigError(f"class {cid.index} has {n} images, cannot subsample {per_class}")
        rng = np.random.default_rng([int(seed), SUBSAMPLE_STREAM, cid.index])
        chosen += sorted(offset + int(i) for i in rng.choice(n, per_class, replace=False))
        offset += n
    return chosen


def generate_bad_single(pool: dict, denoiser, cfg: MetaDMConfig, schedule: NoiseSchedule,
                        fake_start: int | None = None):
    """``bad_per_class`` bad samples per class, all in one shared fake class."""
    _require_denoiser(denoiser)
    fake = ClassId(first_fake_index(pool) if fake_start is None else fake_start, False)
    originals = flatten(pool)
    picked = [originals[i] for i in subsample_indices(pool, cfg.bad_per_class, cfg.seed)]
    imgs = _generate(denoiser, schedule, [(e.image, e.source_index) for e in picked],
                     cfg.bad_strength, cfg.seed, BAD_STREAM, cfg.batch_size)
    out = [Example(img, fake, Provenance.BAD, e.source_index) for img, e in zip(imgs, picked)]
    return out, {fake: None}


def build_augmented_dataset(pool: dict, denoiser, cfg: MetaDMConfig, schedule: NoiseSchedule,
                            fake_start: int | None = None) -> AugmentedDataset:
    cfg.validate()
    examples = flatten(pool)
    table = {}
    if cfg.augment_enabled:
        examples += generate_good(pool, denoiser, cfg, schedule)
    if cfg.sharpen_enabled:
        gen = generate_bad_per_class if cfg.strategy is Strategy.PER_CLASS_EXTRA else generate_bad_single
        bad, table = gen(pool, denoiser, cfg, schedule, fake_start)
        examples += bad
    return AugmentedDataset(examples, sorted(pool), table)


def plain_dataset(pool: dict) -> AugmentedDataset:
    """Originals only: the no-Meta-DM control arm."""
    return AugmentedDataset(flatten(pool), sorted(pool), {})


# ---------------------------------------------------------------------------
# manifest


def _canonical(doc) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def write_augmented(aug: AugmentedDataset, out_dir, dataset: datasets.DatasetManifest, denoiser_digest: str,
                    cfg: MetaDMConfig | None) -> Path:
    """Write generated images and the JSON manifest; sets ``aug.digest``.

    Original examples point back at the source dataset's files.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    train = dataset.split_classes("train")
    orig_files = [(e.paths[i], e.hashes[i]) for e in sorted(train, key=lambda e: e.class_id)
                  for i in range(len(e.paths))]
    records = []
    for n, ex in enumerate(aug.examples):
        if ex.provenance is Provenance.ORIGINAL:
            rel, digest = orig_files[ex.source_index]
            path = os.path.relpath(dataset.root / rel, out_dir)
        else:
            path = f"images/{ex.provenance.value}_{n:05d}.mdt"
            digest = datasets.sha256(datasets.save_tensor(out_dir / path, ex.image))
        records.append({"path": path, "sha256": digest, "class_index": ex.class_id.index,
                        "is_real": ex.class_id.is_real, "provenance": ex.provenance.value,
                        "source_index": ex.source_index})
    doc = {
        "dataset_digest": dataset.digest,
        "denoiser_digest": denoiser_digest,
        "cfg": cfg.to_json() if cfg is not None else None,
        "real_classes": [c.index for c in aug.real_classes],
        "class_table": [[f.index, None if r is None else r.index] for f, r in sorted(aug.class_table.items())],
        "examples": records,
    }
    aug.digest = hashlib.sha256(_canonical(doc)).hexdigest()
    doc["manifest_digest"] = aug.digest
    path = out_dir / "augmented.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def load_augmented(path):
    """Read an augmented manifest back, checking every file digest.

    Returns ``(AugmentedDataset, manifest_dict)``.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise IntegrityError(f"cannot read augmented manifest {path}: {exc}") from exc
    body = {k: v for k, v in doc.items() if k != "manifest_digest"}
    if hashlib.sha256(_canonical(body)).hexdigest() != doc.get("manifest_digest"):
        raise IntegrityError(f"augmented manifest digest mismatch in {path}")
    examples = []
    for rec in doc["examples"]:
        try:
            data = (path.parent / rec["path"]).read_bytes()
        except OSError as exc:
            raise IntegrityError(f"missing generated file {rec['path']}") from exc
        if datasets.sha256(data) != rec["sha256"]:
            raise IntegrityError(f"digest mismatch for {rec['path']}")
        examples.append(Example(datasets.read_tensor(data), ClassId(rec["class_index"], rec["is_real"]),
                                Provenance(rec["provenance"]), rec["source_index"]))
    table = {ClassId(f, False): (None if r is None else ClassId(r)) for f, r in doc["class_table"]}
    aug = AugmentedDataset(examples, [ClassId(i) for i in doc["real_classes"]], table, doc["manifest_digest"])
    return aug, doc
