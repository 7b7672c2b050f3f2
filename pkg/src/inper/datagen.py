"""Synthetic multi-domain image classification data and the TDF tensor format.

Class identity lives in the rasterized shape (disk, cross, stripes, ring);
domain identity lives in per-channel color gain/bias, background texture and
contrast. A leakage factor lets the class nudge the style within a domain, so
style and class are correlated in the sources but the correlation does not
transfer across domains.
"""
import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from ._files import atomic_write_bytes, atomic_write_text
from .errors import FormatError, InvalidParameterError, NotFoundError
from .tensor import RngStream

IMAGE_SIZE = 32
SHAPES = ("disk", "cross", "stripes", "ring")
TEXTURES = ("flat", "noise", "gradient")
FORMAT_VERSION = 1

# styling constants: background level, shape amplitude, class-style offset scale
BASE_LEVEL = 0.2
SHAPE_AMPLITUDE = 0.3
LEAK_SCALE = 0.3

TDF_MAGIC = b"TDF1"
TDF_F32 = 1


@dataclass
class DomainSpec:
    domain_id: int
    gain: tuple = (1.0, 1.0, 1.0)
    bias: tuple = (0.0, 0.0, 0.0)
    texture: str = "flat"
    contrast: float = 1.0
    leakage: float = 0.3

    def __post_init__(self):
        self.gain = tuple(float(g) for g in self.gain)
        self.bias = tuple(float(b) for b in self.bias)
        if len(self.gain) != 3 or len(self.bias) != 3:
            raise InvalidParameterError("gain and bias need one value per color channel")
        if any(g <= 0 for g in self.gain):
            raise InvalidParameterError("gains must be positive")
        if self.texture not in TEXTURES:
            raise InvalidParameterError(f"texture must be one of {TEXTURES}")
        if not 0.0 <= self.leakage < 1.0:
            raise InvalidParameterError("leakage must lie in [0, 1)")
        if self.contrast <= 0:
            raise InvalidParameterError("contrast must be positive")


def default_domains(leakage=0.3):
    """Four domains: red-, green- and blue-dominant casts plus a low-contrast cyan one.

    Each held-out domain is out of the sources' range in at least one style
    direction (its dominant channel, or its contrast), so a plain network
    trained on the other three loses accuracy on it.
    """
    return [
        DomainSpec(1, gain=(1.5, 0.8, 0.6), bias=(0.0, 0.05, 0.05), texture="flat", contrast=1.0, leakage=leakage),
        DomainSpec(2, gain=(0.6, 1.5, 0.8), bias=(0.05, 0.0, 0.05), texture="noise", contrast=1.0, leakage=leakage),
        DomainSpec(3, gain=(0.8, 0.6, 1.5), bias=(0.05, 0.05, 0.0), texture="gradient", contrast=1.0, leakage=leakage),
        DomainSpec(4, gain=(0.5, 1.1, 1.1), bias=(0.1, 0.0, 0.0), texture="noise", contrast=0.65, leakage=leakage),
    ]


@dataclass
class DomainDataset:
    images: np.ndarray  # [N, 3, 32, 32] float32 in [0, 1]
    labels: np.ndarray  # [N] int64 class ids in [0, K)
    domains: np.ndarray  # [N] int64 domain ids
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self):
        return int(self.manifest.get("num_classes", int(self.labels.max()) + 1))

    @property
    def domain_ids(self):
        return [d["domain_id"] for d in self.manifest.get("domains", [])] or sorted(set(self.domains.tolist()))

    def subset(self, idx):
        return DomainDataset(self.images[idx], self.labels[idx], self.domains[idx], self.manifest)


def rasterize(shape, cx, cy, r, angle=0.0, size=IMAGE_SIZE):
    """Binary [size, size] mask of a class shape centered at (cx, cy)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    d = np.hypot(dx, dy)
    if shape == "disk":
        m = d < r
    elif shape == "ring":
        m = (d < r) & (d > 0.55 * r)
    elif shape == "cross":
        arm = 0.28 * r
        m = ((np.abs(u) < arm) & (np.abs(v) < r)) | ((np.abs(v) < arm) & (np.abs(u) < r))
    elif shape == "stripes":
        period = r / 1.75
        m = (np.abs(u) < r) & (np.abs(v) < r) & (np.floor((u + r) / period) % 2 == 0)
    else:
        raise InvalidParameterError(f"unknown shape {shape!r}")
    return m.astype(np.float64)


def _texture(kind, rng, size=IMAGE_SIZE):
    if kind == "flat":
        t = np.zeros((3, size, size))
    elif kind == "noise":
        t = rng.normal(0.0, 0.04, (3, size, size))
    else:
        theta = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(theta) * np.linspace(-1, 1, size)[None, :] + np.sin(theta) * np.linspace(-1, 1, size)[:, None]
        t = np.broadcast_to(0.06 * ramp, (3, size, size)).copy()
    return t - t.mean(axis=(1, 2), keepdims=True)


def _class_style(spec, num_classes, seed):
    # per-domain class-conditioned style offsets in [-1, 1]
    rng = RngStream(seed).spawn(f"leak{spec.domain_id}")
    return rng.uniform(-1.0, 1.0, (num_classes, 3))


def style_image(content, spec, offset, brightness, tex):
    """Apply a domain's style to a binary content mask; returns [3, H, W] in [0, 1].

    The content is centered per image so the mean intensity of the base image
    does not depend on the shape's area.
    """
    z = content - content.mean()
    gain = np.asarray(spec.gain) * (1.0 + LEAK_SCALE * spec.leakage * offset)
    base = BASE_LEVEL + brightness + spec.contrast * SHAPE_AMPLITUDE * z[None] + tex
    img = gain[:, None, None] * base + np.asarray(spec.bias)[:, None, None]
    return np.clip(img, 0.0, 1.0)


def generate(specs, num_classes=4, per_domain=500, seed=0):
    """Class-stratified images for each domain; deterministic per seed."""
    specs = list(specs)
    if len(specs) < 2:
        raise InvalidParameterError("need at least two domains")
    if not 1 <= num_classes <= len(SHAPES):
        raise InvalidParameterError(f"num_classes must be in 1..{len(SHAPES)}")
    if len({s.domain_id for s in specs}) != len(specs):
        raise InvalidParameterError("domain ids must be unique")
    if per_domain < num_classes:
        raise InvalidParameterError("per_domain must be at least num_classes")
    images, labels, domains = [], [], []
    root = RngStream(seed)
    for spec in specs:
        rng = root.spawn(f"domain{spec.domain_id}")
        offsets = _class_style(spec, num_classes, seed)
        ys = np.arange(per_domain) % num_classes
        ys = ys[rng.gen.permutation(per_domain)]
        for y in ys:
            r = rng.uniform(6.0, 10.0)
            cx, cy = rng.uniform(11.0, 21.0, 2)
            angle = rng.uniform(0, np.pi / 2)
            content = rasterize(SHAPES[y], cx, cy, r, angle)
            brightness = rng.normal(0.0, 0.02)
            tex = _texture(spec.texture, rng)
            images.append(style_image(content, spec, offsets[y], brightness, tex))
            labels.append(y)
            domains.append(spec.domain_id)
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": seed,
        "num_classes": num_classes,
        "per_domain": per_domain,
        "image_size": IMAGE_SIZE,
        "domains": [asdict(s) for s in specs],
    }
    manifest = json.loads(json.dumps(manifest))  # JSON-native so it survives save/load unchanged
    return DomainDataset(
        np.stack(images).astype(np.float32),
        np.asarray(labels, dtype=np.int64),
        np.asarray(domains, dtype=np.int64),
        manifest,
    )


def leave_one_out(dataset, target_domain):
    """Split into (all other domains, the target domain)."""
    if target_domain not in dataset.domain_ids:
        raise NotFoundError(f"unknown domain {target_domain!r}")
    is_target = dataset.domains == target_domain
    return dataset.subset(np.flatnonzero(~is_target)), dataset.subset(np.flatnonzero(is_target))


def tdf_bytes(tensor):
    t = np.asarray(tensor)
    if t.ndim < 1 or t.ndim > 255:
        raise FormatError(f"TDF tensors need rank >= 1, got {t.ndim}")
    head = TDF_MAGIC + struct.pack("<BB", TDF_F32, t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    return head + np.ascontiguousarray(t, dtype="<f4").tobytes()


def tdf_from_bytes(data):
    if len(data) < 6 or data[:4] != TDF_MAGIC:
        raise FormatError("bad TDF magic")
    dtype, rank = struct.unpack_from("<BB", data, 4)
    if dtype != TDF_F32:
        raise FormatError(f"unsupported TDF dtype code {dtype}")
    if rank == 0:
        raise FormatError("rank-0 TDF tensors are not allowed")
    if len(data) < 6 + 4 * rank:
        raise FormatError("truncated TDF header")
    shape = struct.unpack_from(f"<{rank}I", data, 6)
    count = int(np.prod(shape))
    off = 6 + 4 * rank
    if len(data) != off + 4 * count:
        raise FormatError(f"TDF payload size mismatch: expected {4 * count} bytes, got {len(data) - off}")
    return np.frombuffer(data, "<f4", count, off).reshape(shape).astype(np.float32)


def write_tdf(path, tensor):
    atomic_write_bytes(path, tdf_bytes(tensor))


def read_tdf(path):
    with open(path, "rb") as f:
        return tdf_from_bytes(f.read())


def save_dataset(dataset, directory):
    os.makedirs(directory, exist_ok=True)
    write_tdf(os.path.join(directory, "images.tdf"), dataset.images)
    write_tdf(os.path.join(directory, "labels.tdf"), dataset.labels)
    write_tdf(os.path.join(directory, "domains.tdf"), dataset.domains)
    atomic_write_text(os.path.join(directory, "manifest.json"), json.dumps(dataset.manifest, indent=2, sort_keys=True))


def load_dataset(directory):
    try:
        with open(os.path.join(directory, "manifest.json")) as f:
            manifest = json.load(f)
        images = read_tdf(os.path.join(directory, "images.tdf"))
        labels = read_tdf(os.path.join(directory, "labels.tdf")).astype(np.int64)
        domains = read_tdf(os.path.join(directory, "domains.tdf")).astype(np.int64)
    except FileNotFoundError as exc:
        raise NotFoundError(f"dataset file missing: {exc.filename}") from exc
    if not (len(images) == len(labels) == len(domains)):
        raise FormatError("dataset arrays have inconsistent lengths")
    return DomainDataset(images, labels, domains, manifest)
