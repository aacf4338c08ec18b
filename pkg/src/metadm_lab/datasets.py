"""Image datasets: the procedural shapes benchmark, folder ingestion, storage.

Images are stored one per file in the ``MDTF`` tensor archive format and
described by a JSON manifest that records a SHA-256 per file plus an
overall digest. Classes are split train/val/test at the class level.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, FormatError, IntegrityError
from .episodic import ClassId

TENSOR_MAGIC = b"MDTF"
TENSOR_VERSION = 1
MAX_DIM = 1 << 20

SHAPE_FAMILIES = ("disk", "square", "triangle", "cross", "ring", "bar", "checker", "gradient")
SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# tensor archive


def write_tensor(t: torch.Tensor) -> bytes:
    t = t.detach().to(torch.float32).contiguous()
    if not torch.isfinite(t).all():
        raise ValueError("tensor archive only stores finite values")
    header = TENSOR_MAGIC + struct.pack("<IB", TENSOR_VERSION, t.dim())
    header += struct.pack(f"<{t.dim()}I", *t.shape)
    return header + t.numpy().astype("<f4").tobytes()


def _parse_header(data: bytes):
    if len(data) < 9 or data[:4] != TENSOR_MAGIC:
        raise FormatError("bad tensor archive magic")
    version, ndim = struct.unpack_from("<IB", data, 4)
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor archive version {version}")
    off = 9
    if len(data) < off + 4 * ndim:
        raise FormatError("tensor archive truncated in shape header")
    dims = struct.unpack_from(f"<{ndim}I", data, off)
    if any(d > MAX_DIM for d in dims):
        raise FormatError(f"implausible tensor shape {dims}")
    off += 4 * ndim
    n = math.prod(dims)
    if len(data) != off + 4 * n:
        raise FormatError(f"tensor archive payload is {len(data) - off} bytes, expected {4 * n}")
    return dims, off


def tensor_shape(data: bytes) -> tuple:
    """Shape recorded in an archive, validated against its length."""
    return tuple(_parse_header(data)[0])


def read_tensor(data: bytes) -> torch.Tensor:
    dims, off = _parse_header(data)
    arr = np.frombuffer(data, dtype="<f4", offset=off, count=math.prod(dims)).astype(np.float32)
    return torch.from_numpy(arr.reshape(dims).copy())


def save_tensor(path, t: torch.Tensor) -> bytes:
    data = write_tensor(t)
    Path(path).write_bytes(data)
    return data


def load_tensor(path) -> torch.Tensor:
    return read_tensor(Path(path).read_bytes())


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------------------
# manifest


@dataclass
class ClassEntry:
    class_id: ClassId
    split: str
    paths: list
    hashes: list
    name: str = ""


@dataclass
class DatasetManifest:
    name: str
    image_shape: tuple
    classes: list
    root: Path
    digest: str = ""
    source: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def compute_digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps([self.name, list(self.image_shape)]).encode())
        for entry in self.classes:
            h.update(f"{entry.class_id.index}:{entry.split}:{len(entry.paths)}".encode())
            for p, fh in zip(entry.paths, entry.hashes):
                h.update(p.encode())
                h.update(bytes.fromhex(fh))
        return h.hexdigest()

    def split_classes(self, split: str) -> list:
        return [e for e in self.classes if e.split == split]

    def images(self, class_index: int) -> torch.Tensor:
        """All images of one class as [n,C,H,W]; decoded on first use."""
        if class_index not in self._cache:
            entry = next(e for e in self.classes if e.class_id.index == class_index)
            self._cache[class_index] = torch.stack([load_tensor(self.root / p) for p in entry.paths])
        return self._cache[class_index]

    def pool(self, split: str) -> dict:
        """``{ClassId: images}`` for every class of ``split``."""
        return {e.class_id: self.images(e.class_id.index) for e in self.split_classes(split)}

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "image_shape": list(self.image_shape),
            "format": "MDTF",
            "source": self.source,
            "classes": [
                {"index": e.class_id.index, "is_real": e.class_id.is_real, "name": e.name, "split": e.split,
                 "images": [{"path": p, "sha256": h} for p, h in zip(e.paths, e.hashes)]}
                for e in self.classes
            ],
            "digest": self.digest,
        }

    def save(self, path=None) -> Path:
        path = Path(path) if path else self.root / "manifest.json"
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))
        return path


def check_splits(classes) -> None:
    seen = {}
    for e in classes:
        if e.split not in SPLITS:
            raise IntegrityError(f"class {e.class_id.index}: unknown split {e.split!r}")
        prev = seen.setdefault(e.class_id, e.split)
        if prev != e.split:
            raise IntegrityError(f"class {e.class_id.index} appears in splits {prev!r} and {e.split!r}")


def load_manifest(path) -> DatasetManifest:
    """Read and verify a manifest; image tensors are decoded lazily."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"cannot read manifest {path}: {exc}") from exc
    root = path.parent
    shape = tuple(doc["image_shape"])
    classes = []
    for c in doc["classes"]:
        paths, hashes = [], []
        for img in c["images"]:
            f = root / img["path"]
            if not f.is_file():
                raise IntegrityError(f"missing image file {img['path']}")
            data = f.read_bytes()
            if sha256(data) != img["sha256"]:
                raise IntegrityError(f"digest mismatch for {img['path']}")
            if tensor_shape(data) != shape:
                raise IntegrityError(f"{img['path']} has shape {tensor_shape(data)}, manifest says {shape}")
            paths.append(img["path"])
            hashes.append(img["sha256"])
        classes.append(ClassEntry(ClassId(c["index"], c.get("is_real", True)), c["split"], paths, hashes,
                                  c.get("name", "")))
    check_splits(classes)
    m = DatasetManifest(doc["name"], shape, classes, root, doc.get("digest", ""), doc.get("source", {}))
    if m.compute_digest() != m.digest:
        raise IntegrityError(f"manifest digest mismatch in {path}")
    return m


def split_counts(n_classes: int) -> tuple:
    """Class-level 50/25/25 split, at least one class per split."""
    n_val = max(1, round(n_classes / 4))
    n_test = max(1, round(n_classes / 4))
    return n_classes - n_val - n_test, n_val, n_test


def write_dataset(root, name, class_images, source=None, class_names=None, split=None) -> DatasetManifest:
    """Store ``[(ClassId, images[n,C,H,W]), ...]`` under ``root``.

    Classes are assigned to train, val, test in order, using ``split``
    (three class counts) or the default 50/25/25 rule.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    if split is None:
        split = split_counts(len(class_images))
    if len(split) != 3 or sum(split) != len(class_images) or min(split) < 1:
        raise ConfigError(f"split {split} does not partition {len(class_images)} classes")
    n_train, n_val, _ = split
    classes = []
    shape = None
    for pos, (cid, imgs) in enumerate(class_images):
        which = "train" if pos < n_train else "val" if pos < n_train + n_val else "test"
        shape = tuple(imgs.shape[1:])
        cdir = root / "images" / f"c{cid.index:03d}"
        cdir.mkdir(exist_ok=True)
        paths, hashes = [], []
        for i, img in enumerate(imgs):
            rel = f"images/c{cid.index:03d}/{i:04d}.mdt"
            data = save_tensor(root / rel, img)
            paths.append(rel)
            hashes.append(sha256(data))
        cname = class_names[pos] if class_names else ""
        classes.append(ClassEntry(cid, which, paths, hashes, cname))
    m = DatasetManifest(name, shape, classes, root, source=source or {})
    m.digest = m.compute_digest()
    m.save()
    return m


# ---------------------------------------------------------------------------
# procedural shapes


@dataclass
class ClassStyle:
    shape: str
    hue: float
    size_range: tuple
    jitter: float
    noise: float


@dataclass
class SynthSpec:
    n_classes: int = 16
    images_per_class: int = 40
    image_shape: tuple = (3, 32, 32)
    seed: int = 0
    n_hues: int = 8
    size_range: tuple = (0.45, 0.7)
    jitter: float = 0.15
    noise: float = 0.06
    hue_jitter: float = 0.03
    styles: list = field(default_factory=list)

    def class_styles(self) -> list:
        """Distinct (shape family, hue) pair per class, drawn from the seed."""
        if self.styles:
            return self.styles
        rng = np.random.default_rng([self.seed, 0])
        combos = [(s, h) for s in range(len(SHAPE_FAMILIES)) for h in range(self.n_hues)]
        if self.n_classes > len(combos):
            raise ConfigError(f"at most {len(combos)} distinct classes, asked for {self.n_classes}")
        pick = rng.permutation(len(combos))[: self.n_classes]
        styles = []
        for k in pick:
            s, h = combos[k]
            lo = self.size_range[0] * rng.uniform(0.9, 1.1)
            hi = self.size_range[1] * rng.uniform(0.9, 1.1)
            styles.append(ClassStyle(SHAPE_FAMILIES[s], h / self.n_hues, (lo, hi), self.jitter,
                                     self.noise * rng.uniform(0.7, 1.3)))
        return styles


def _smooth(sd, width):
    # signed distance (negative inside) -> soft coverage in [0, 1]
    return np.clip(0.5 - sd / width, 0.0, 1.0)


def _shape_mask(kind, u, v, r, rng):
    """Coverage mask of radius ``r``; u, v are rotated coordinates centred on the shape."""
    aa = 1.5 / 32
    if kind == "disk":
        return _smooth(np.hypot(u, v) - r, aa)
    if kind == "ring":
        d = np.abs(np.hypot(u, v) - 0.75 * r) - 0.25 * r
        return _smooth(d, aa)
    if kind == "square":
        return _smooth(np.maximum(np.abs(u), np.abs(v)) - 0.85 * r, aa)
    if kind == "bar":
        return _smooth(np.maximum(np.abs(u) - 1.1 * r, np.abs(v) - 0.3 * r), aa)
    if kind == "cross":
        a = np.maximum(np.abs(u) - r, np.abs(v) - 0.28 * r)
        b = np.maximum(np.abs(v) - r, np.abs(u) - 0.28 * r)
        return _smooth(np.minimum(a, b), aa)
    if kind == "triangle":
        k = math.sqrt(3.0)
        # equilateral triangle signed distance (approximate, fine for masks)
        d = np.maximum(np.abs(u) * k / 2 + v / 2, -v) - r / 2
        return _smooth(d, aa)
    if kind == "checker":
        box = _smooth(np.maximum(np.abs(u), np.abs(v)) - 0.9 * r, aa)
        cell = 0.9 * r / 2
        pattern = ((np.floor(u / cell) + np.floor(v / cell)) % 2 == 0).astype(float)
        return box * (0.25 + 0.75 * pattern)
    if kind == "gradient":
        box = _smooth(np.hypot(u, v) - r, aa)
        return box * np.clip(0.5 + u / (2 * r), 0.0, 1.0)
    raise ConfigError(f"unknown shape family {kind!r}")


def render_image(style: ClassStyle, shape, rng: np.random.Generator, hue_jitter: float = 0.03) -> np.ndarray:
    c, h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    x = (xs + 0.5) / w - 0.5
    y = (ys + 0.5) / h - 0.5
    r = rng.uniform(*style.size_range) / 2
    cx, cy = rng.uniform(-style.jitter, style.jitter, size=2)
    theta = rng.uniform(0, 2 * math.pi)
    ct, st = math.cos(theta), math.sin(theta)
    u = ct * (x - cx) + st * (y - cy)
    v = -st * (x - cx) + ct * (y - cy)
    mask = _shape_mask(style.shape, u, v, r, rng)

    hue = (style.hue + rng.normal(0, hue_jitter)) % 1.0
    fg = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.75, 1.0)))
    bg_level = rng.uniform(0.05, 0.35)
    bg_tint = np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0, 0.3), bg_level))
    img = bg_tint[:, None, None] * (1 - mask) + fg[:, None, None] * mask
    img = img * 2 - 1
    img = img + rng.normal(0, style.noise, size=img.shape)
    if c == 1:
        img = img.mean(axis=0, keepdims=True)
    elif c != 3:
        raise ConfigError(f"synthetic images need 1 or 3 channels, got {c}")
    return np.clip(img, -1, 1).astype(np.float32)


def synth_images(spec: SynthSpec) -> list:
    """Render every class; returns ``[(ClassId, images), ...]`` in class order."""
    if spec.n_classes < 3:
        raise ConfigError("need at least 3 classes for a train/val/test split")
    if len(spec.image_shape) != 3 or min(spec.image_shape) < 1:
        raise ConfigError(f"invalid image shape {spec.image_shape}")
    if spec.images_per_class < 1:
        raise ConfigError("images_per_class must be positive")
    out = []
    for k, style in enumerate(spec.class_styles()):
        imgs = []
        for i in range(spec.images_per_class):
            rng = np.random.default_rng([spec.seed, 1, k, i])
            imgs.append(render_image(style, spec.image_shape, rng, spec.hue_jitter))
        out.append((ClassId(k), torch.from_numpy(np.stack(imgs))))
    return out


def synth_generate(spec: SynthSpec, root, split=None) -> DatasetManifest:
    styles = spec.class_styles()
    names = [f"{s.shape}-h{round(s.hue * spec.n_hues)}" for s in styles]
    source = {"kind": "synth", "spec": {k: v for k, v in asdict(spec).items() if k != "styles"}}
    return write_dataset(root, f"shapes{spec.n_classes}x{spec.images_per_class}-s{spec.seed}",
                         synth_images(spec), source, names, split)


# ---------------------------------------------------------------------------
# external folders


def ingest_folder(src, root, image_size=(32, 32), name=None, split=None) -> DatasetManifest:
    """Import a directory-per-class tree of RGB images.

    Class directories are taken in sorted order, resized bilinearly and
    mapped to [-1, 1].
    """
    from PIL import Image

    src = Path(src)
    class_dirs = sorted(p for p in src.iterdir() if p.is_dir())
    if len(class_dirs) < 3:
        raise ConfigError(f"{src}: need at least 3 class directories, found {len(class_dirs)}")
    h, w = image_size
    class_images = []
    for k, d in enumerate(class_dirs):
        imgs = []
        for f in sorted(d.iterdir()):
            if not f.is_file():
                continue
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB").resize((w, h), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 127.5 - 1.0
            except OSError:
                continue
            imgs.append(arr.transpose(2, 0, 1))
        if not imgs:
            raise ConfigError(f"class directory {d} holds no readable images")
        class_images.append((ClassId(k), torch.from_numpy(np.stack(imgs))))
    return write_dataset(root, name or src.name, class_images, {"kind": "folder", "path": str(src)},
                         [d.name for d in class_dirs], split)
