"""Synthetic glyph task, binary PGM/PPM IO and text manifests.

Each image is a textured background with one class glyph (a framed 8x8
pattern whose interior identifies the class) placed uniformly at random,
plus unframed class-agnostic clutter glyphs.  The class is carried by a
small local patch; the rest of the image is class-independent.

Dataset root layout written by ``write_dataset``::

    root/task.cfg          generator settings (task.* config keys)
    root/train.txt         manifest: <relpath> <label> <x> <y> <w> <h>
    root/test.txt
    root/train/000000.pgm  ...
    root/test/000000.pgm   ...
"""

import os
import zlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from .rng import Rng, splitmix64


def stream(seed, tag):
    """Independent generator for ``tag`` under a run seed."""
    return Rng(splitmix64((int(seed) << 32) ^ zlib.crc32(tag.encode())))


@dataclass
class GlyphTaskSpec:
    num_classes: int = 10
    image_size: int = 64
    glyph_size: int = 8
    distractors: int = 3
    noise: float = 0.15
    contrast: float = 0.6
    class_bits: int = 36
    n_train: int = 2000
    n_test: int = 500
    seed: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.glyph_size * 4 < self.image_size:
            raise ValueError(f"glyph_size {self.glyph_size} must be < image_size/4 = {self.image_size / 4}")
        if self.glyph_size < 4:
            raise ValueError(f"glyph_size must be >= 4, got {self.glyph_size}")
        inner = (self.glyph_size - 2) ** 2
        if self.num_classes > 2 ** min(self.class_bits, inner):
            raise ValueError(f"{self.num_classes} classes cannot be coded with {self.class_bits} bits")
        if not 0 < self.class_bits <= inner:
            raise ValueError(f"class_bits must lie in 1..{inner}")
        if self.noise < 0 or self.distractors < 0 or self.n_train < 0 or self.n_test < 0:
            raise ValueError("noise, distractors and split sizes must be non-negative")
        free = (self.image_size // self.glyph_size) ** 2
        if self.distractors + 1 > free // 2:
            raise ValueError(f"{self.distractors} distractors do not fit in a {self.image_size}px image")


@dataclass
class LabeledSample:
    image: np.ndarray       # C x H x W in [0, 1]
    label: int
    rect: tuple             # glyph (x, y, w, h) in pixels; diagnostics only


@dataclass
class Dataset:
    images: np.ndarray      # N x C x H x W
    labels: np.ndarray
    rects: np.ndarray       # N x 4 (x, y, w, h); -1 where unknown
    paths: list = None
    classes: int = None     # declared class count; inferred from labels when None

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = np.asarray(idx)
        paths = [self.paths[i] for i in idx] if self.paths else None
        return Dataset(self.images[idx], self.labels[idx], self.rects[idx], paths, self.classes)

    @property
    def num_classes(self):
        if self.classes is not None:
            return self.classes
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def samples(self):
        for i in range(len(self)):
            yield LabeledSample(self.images[i], int(self.labels[i]), tuple(int(v) for v in self.rects[i]))


def class_glyphs(spec):
    """Framed glyphs; classes share a base interior and differ in ``class_bits`` cells."""
    g = spec.glyph_size
    inner = g - 2
    rng = stream(spec.seed, "glyphs")
    base = (rng.random((inner, inner)) < 0.5).astype(float)
    coded = rng.permutation(inner * inner)[:spec.class_bits]
    codes = []
    while len(codes) < spec.num_classes:
        bits = tuple(int(b) for b in rng.random(spec.class_bits) < 0.5)
        if bits not in codes:
            codes.append(bits)
    glyphs = []
    for bits in codes:
        body = base.copy().reshape(-1)
        body[coded] = bits
        glyph = np.ones((g, g))
        glyph[1:-1, 1:-1] = body.reshape(inner, inner)
        glyphs.append(glyph)
    return np.stack(glyphs)


def clutter_glyph(rng, g):
    """Unframed random stroke pattern of the same size as a class glyph."""
    pat = np.zeros((g, g))
    for _ in range(3):
        if rng.random() < 0.5:
            r = rng.integers(0, g)
            a, b = sorted(rng.integers(0, g, 2))
            pat[r, a:b + 1] = 1.0
        else:
            c = rng.integers(0, g)
            a, b = sorted(rng.integers(0, g, 2))
            pat[a:b + 1, c] = 1.0
    return pat


def _background(rng, size, noise):
    """Flat grey plus ``noise``-scaled blocky texture and per-pixel noise."""
    coarse = rng.random((size // 8 + 1, size // 8 + 1))
    tex = np.kron(coarse, np.ones((8, 8)))[:size, :size]
    tex = 0.5 * (tex + np.roll(tex, 4, axis=0))
    tex = 0.5 * (tex + np.roll(tex, 4, axis=1))
    return 0.3 + noise * (tex - 0.5) + noise * (rng.random((size, size)) - 0.5)


def _overlaps(a, b, g):
    return abs(a[0] - b[0]) < g and abs(a[1] - b[1]) < g


def render_sample(spec, glyphs, rng):
    s, g = spec.image_size, spec.glyph_size
    label = rng.integers(0, spec.num_classes)
    img = _background(rng, s, spec.noise)
    y, x = (int(v) for v in rng.integers(0, s - g + 1, 2))
    placed = [(y, x)]
    for _ in range(spec.distractors):
        while True:
            pos = tuple(int(v) for v in rng.integers(0, s - g + 1, 2))
            if not any(_overlaps(pos, p, g) for p in placed):
                break
        placed.append(pos)
        dy, dx = pos
        pat = clutter_glyph(rng, g)
        region = img[dy:dy + g, dx:dx + g]
        img[dy:dy + g, dx:dx + g] = np.where(pat > 0, region + spec.contrast, region)
    region = img[y:y + g, x:x + g]
    img[y:y + g, x:x + g] = region + spec.contrast * glyphs[label]
    img = np.clip(img, 0.0, 1.0)
    return LabeledSample(img[None], int(label), (x, y, g, g))


def generate_split(spec, n, tag):
    glyphs = class_glyphs(spec)
    rng = stream(spec.seed, tag)
    samples = [render_sample(spec, glyphs, rng) for _ in range(n)]
    s = spec.image_size
    images = np.stack([smp.image for smp in samples]) if samples else np.zeros((0, 1, s, s))
    # quantise to the 8-bit grid so in-memory data equals what round-trips through PGM
    images = np.round(images * 255.0) / 255.0
    labels = np.array([smp.label for smp in samples], dtype=int)
    rects = np.array([smp.rect for smp in samples], dtype=int).reshape(-1, 4)
    return Dataset(images, labels, rects, classes=spec.num_classes)


def generate_dataset(spec):
    """Deterministic (train, test) pair for a task spec."""
    spec.validate()
    return generate_split(spec, spec.n_train, "train"), generate_split(spec, spec.n_test, "test")


# ---------------------------------------------------------------- PGM / PPM

def encode_pnm(image):
    """C x H x W array in [0, 1] (C = 1 or 3) -> binary PGM (P5) / PPM (P6) bytes."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected 1 or 3 channel image, got shape {img.shape}")
    if np.any(img < 0) or np.any(img > 1) or not np.all(np.isfinite(img)):
        raise ValueError("pixel values must lie in [0, 1]")
    c, h, w = img.shape
    q = np.round(img * 255.0).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (w, h)
    return header + q.transpose(1, 2, 0).tobytes()


def decode_pnm(data):
    """Parse binary PGM/PPM bytes into a C x H x W float array in [0, 1]."""
    pos = 0
    n = len(data)

    def token():
        nonlocal pos
        while pos < n:
            ch = data[pos:pos + 1]
            if ch == b"#":
                while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError(f"malformed header: unexpected end of data at byte {pos}")
        return data[start:pos], start

    magic, off = token()
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"malformed header: unsupported magic {magic!r} at byte {off}")
    vals = []
    for what in ("width", "height", "maxval"):
        tok, off = token()
        if not tok.isdigit():
            raise ValueError(f"malformed header: bad {what} {tok!r} at byte {off}")
        vals.append(int(tok))
    w, h, maxval = vals
    if w <= 0 or h <= 0:
        raise ValueError(f"malformed header: non-positive size {w}x{h} at byte {off}")
    if not 0 < maxval < 256:
        raise ValueError(f"malformed header: maxval {maxval} at byte {off} is not 8-bit")
    if pos >= n or not data[pos:pos + 1].isspace():
        raise ValueError(f"malformed header: missing whitespace after maxval at byte {pos}")
    pos += 1
    c = 1 if magic == b"P5" else 3
    need = w * h * c
    if n - pos < need:
        raise ValueError(f"truncated pixel data at byte {n}: need {need} bytes from byte {pos}")
    px = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return px.reshape(h, w, c).transpose(2, 0, 1).astype(np.float64) / maxval


def save_ppm(path, image):
    with open(path, "wb") as f:
        f.write(encode_pnm(image))


def load_ppm(path):
    with open(path, "rb") as f:
        return decode_pnm(f.read())


# ---------------------------------------------------------------- manifests

@dataclass
class ManifestRecord:
    path: str
    label: int
    rect: tuple = None


def parse_manifest(text, num_classes=None):
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (2, 6):
            raise ValueError(f"manifest line {lineno}: expected 2 or 6 fields, got {len(parts)}")
        try:
            label = int(parts[1])
            rect = tuple(int(v) for v in parts[2:]) or None
        except ValueError:
            raise ValueError(f"manifest line {lineno}: non-integer label or rectangle") from None
        if label < 0 or (num_classes is not None and label >= num_classes):
            raise ValueError(f"manifest line {lineno}: label {label} out of range")
        if rect is not None and (rect[2] <= 0 or rect[3] <= 0 or rect[0] < 0 or rect[1] < 0):
            raise ValueError(f"manifest line {lineno}: bad rectangle {rect}")
        records.append(ManifestRecord(parts[0], label, rect))
    return records


def load_manifest(path, num_classes=None):
    with open(path) as f:
        return parse_manifest(f.read(), num_classes)


def format_manifest(records):
    lines = []
    for r in records:
        if r.rect is None:
            lines.append(f"{r.path} {r.label}")
        else:
            lines.append(f"{r.path} {r.label} " + " ".join(str(v) for v in r.rect))
    return "\n".join(lines) + ("\n" if lines else "")


def load_dataset(manifest_path, num_classes=None):
    """Read every image a manifest lists; paths resolve relative to the manifest."""
    root = os.path.dirname(os.path.abspath(manifest_path))
    records = load_manifest(manifest_path, num_classes)
    if not records:
        return Dataset(np.zeros((0, 1, 1, 1)), np.zeros(0, dtype=int), np.zeros((0, 4), dtype=int), [])
    images = [load_ppm(os.path.join(root, r.path)) for r in records]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"manifest {manifest_path}: images have differing shapes {sorted(shapes)}")
    rects = np.array([r.rect if r.rect else (-1, -1, -1, -1) for r in records], dtype=int)
    return Dataset(np.stack(images), np.array([r.label for r in records], dtype=int), rects,
                   [r.path for r in records])


def write_dataset(root, spec, train=None, test=None):
    """Generate (unless given) and write both splits, manifests and task.cfg."""
    if train is None or test is None:
        train, test = generate_dataset(spec)
    os.makedirs(root, exist_ok=True)
    for name, ds in (("train", train), ("test", test)):
        os.makedirs(os.path.join(root, name), exist_ok=True)
        records = []
        for i in range(len(ds)):
            rel = f"{name}/{i:06d}.pgm"
            save_ppm(os.path.join(root, rel), ds.images[i])
            records.append(ManifestRecord(rel, int(ds.labels[i]), tuple(int(v) for v in ds.rects[i])))
        with open(os.path.join(root, f"{name}.txt"), "w") as f:
            f.write(format_manifest(records))
    with open(os.path.join(root, "task.cfg"), "w") as f:
        for fld in fields(spec):
            f.write(f"task.{fld.name} = {getattr(spec, fld.name)}\n")
    return train, test


def task_spec_dict(spec):
    return asdict(spec)
