"""Synthetic pavement-distress corpus: rendering, PNG I/O, manifests, splits, batching.

Every sample is rendered from its own RNG stream keyed by
``(seed, class_index, sample_index)``, so single samples (and their
structure masks) can be re-rendered without regenerating the corpus.
"""
from __future__ import annotations

import hashlib
import io
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

CLASS_NAMES = [
    "alligator crack",
    "crack pouring",
    "longitudinal crack",
    "massive crack",
    "transverse crack",
    "raveling",
    "repair",
]
NORM_MEAN = 0.5
NORM_STD = 0.25


class DecodeError(IOError):
    pass


@dataclass
class DatasetSpec:
    samples_per_class: int = 100
    render_size: tuple = (512, 512)
    seed: int = 0
    texture_amplitude: float = 0.05
    distractor_count: int = 3
    train_fraction: float = 0.5
    num_classes: int = 7
    class_names: list = field(default_factory=lambda: list(CLASS_NAMES))

    def __post_init__(self):
        self.render_size = tuple(int(v) for v in self.render_size)

    def validate(self) -> "DatasetSpec":
        if self.num_classes != 7 or list(self.class_names) != CLASS_NAMES:
            raise ValueError("the corpus has exactly the seven fixed distress classes")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be positive")
        if min(self.render_size) < 16:
            raise ValueError(f"render_size {self.render_size} too small")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie strictly between 0 and 1")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["render_size"] = list(self.render_size)
        return d


# ---------------------------------------------------------------------------
# rendering


def _smooth_noise(rng, h, w, cell):
    """Value noise: coarse uniform grid upsampled bilinearly."""
    gh, gw = max(2, h // cell + 2), max(2, w // cell + 2)
    grid = rng.standard_normal((gh, gw)).astype(np.float32)
    img = Image.fromarray(grid, mode="F").resize((w, h), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32)


def _walk(rng, start, direction, length, step, wobble):
    """Polyline random walk from ``start`` heading ``direction`` (radians)."""
    pts = [tuple(start)]
    ang = direction
    x, y = start
    for _ in range(max(2, int(length / step))):
        ang += rng.normal(0, wobble)
        ang = direction + np.clip(ang - direction, -0.4, 0.4)
        x += step * np.cos(ang)
        y += step * np.sin(ang)
        pts.append((x, y))
    return pts


def _crack_across(rng, h, w, vertical, s):
    """Crack spanning the image, roughly horizontal or vertical."""
    if vertical:
        start = (rng.uniform(0.2, 0.8) * w, -5.0)
        base = np.pi / 2 + rng.normal(0, 0.12)
        length = h * 1.2
    else:
        start = (-5.0, rng.uniform(0.2, 0.8) * h)
        base = rng.normal(0, 0.12)
        length = w * 1.2
    return _walk(rng, start, base, length, step=14 * s, wobble=0.25)


def _draw_lines(size, polylines, width):
    canvas = Image.new("L", size, 0)
    draw = ImageDraw.Draw(canvas)
    for pts in polylines:
        draw.line([(float(x), float(y)) for x, y in pts], fill=255, width=max(1, int(round(width))),
                  joint="curve")
    return np.asarray(canvas, dtype=np.float32) / 255.0


def render_sample(spec: DatasetSpec, label: int, index: int):
    """Render one sample.

    Returns ``(image, mask)``: image float32 3 x H x W in [0, 1]; mask bool
    H x W marking the class-defining structure.
    """
    h, w = spec.render_size
    rng = np.random.default_rng([int(spec.seed) & 0xFFFFFFFFFFFFFFFF, label, index])
    s = min(h, w) / 512.0
    px = max(1.0, s)  # minimum stroke unit in pixels

    # pavement background
    base = rng.uniform(0.5, 0.58)
    gray = base + 0.06 * _smooth_noise(rng, h, w, max(4, int(64 * s)))
    gray += spec.texture_amplitude * rng.standard_normal((h, w)).astype(np.float32)
    gray += 0.5 * spec.texture_amplitude * _smooth_noise(rng, h, w, 2)
    rgb = np.repeat(gray[None], 3, axis=0)

    # distractors: sparse small stains
    canvas = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(canvas)
    for _ in range(spec.distractor_count):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        r = rng.uniform(3, 9) * s
        draw.ellipse([cx - r, cy - r * rng.uniform(0.5, 1.0), cx + r, cy + r], fill=int(rng.uniform(60, 140)))
    stain = np.asarray(canvas, dtype=np.float32) / 255.0
    rgb *= 1 - 0.6 * stain[None]

    name = CLASS_NAMES[label]
    dark = rng.uniform(0.08, 0.2)
    if name in ("transverse crack", "longitudinal crack"):
        pts = _crack_across(rng, h, w, vertical=name == "longitudinal crack", s=s)
        m = _draw_lines((w, h), [pts], rng.uniform(3.0, 5.0) * px)
        rgb = rgb * (1 - m) + dark * m
        mask = m > 0.5
    elif name == "alligator crack":
        cx, cy = rng.uniform(0.35, 0.65) * w, rng.uniform(0.35, 0.65) * h
        rx, ry = rng.uniform(0.2, 0.32) * w, rng.uniform(0.2, 0.32) * h
        cell = rng.uniform(26, 38) * s
        xs = np.arange(cx - rx, cx + rx + 1e-6, cell)
        ys = np.arange(cy - ry, cy + ry + 1e-6, cell)
        gx = xs[None, :] + rng.uniform(-0.3, 0.3, (len(ys), len(xs))) * cell
        gy = ys[:, None] + rng.uniform(-0.3, 0.3, (len(ys), len(xs))) * cell
        lines = []
        for i in range(len(ys)):
            for j in range(len(xs)):
                if j + 1 < len(xs):
                    lines.append([(gx[i, j], gy[i, j]), (gx[i, j + 1], gy[i, j + 1])])
                if i + 1 < len(ys):
                    lines.append([(gx[i, j], gy[i, j]), (gx[i + 1, j], gy[i + 1, j])])
        m = _draw_lines((w, h), lines, rng.uniform(2.0, 3.5) * px)
        rgb = rgb * (1 - m) + dark * m
        mask = m > 0.5
    elif name == "massive crack":
        start = (rng.uniform(0.3, 0.7) * w, rng.uniform(0.3, 0.7) * h)
        ang = rng.uniform(0, 2 * np.pi)
        trunk = _walk(rng, start, ang, 0.35 * min(h, w), 10 * s, 0.5)
        tail = _walk(rng, start, ang + np.pi, 0.35 * min(h, w), 10 * s, 0.5)
        pts = tail[::-1] + trunk[1:]
        m = _draw_lines((w, h), [pts], rng.uniform(22, 34) * s)
        # ragged edges: erode the band with coarse noise
        rough = _smooth_noise(rng, h, w, max(3, int(12 * s)))
        m = m * (rough > -0.6)
        rgb = rgb * (1 - m) + dark * m
        mask = m > 0.5
    elif name == "crack pouring":
        vertical = bool(rng.integers(2))
        pts = _crack_across(rng, h, w, vertical=vertical, s=s)
        crack = _draw_lines((w, h), [pts], 3.0 * px)
        rgb = rgb * (1 - crack) + dark * crack
        band = _draw_lines((w, h), [pts], rng.uniform(14, 22) * s)
        seal = np.array([0.13, 0.13, 0.17], dtype=np.float32)[:, None, None]
        seal = seal + 0.02 * rng.standard_normal((1, h, w)).astype(np.float32)
        rgb = rgb * (1 - band) + seal * band
        mask = band > 0.5
    elif name == "raveling":
        cx, cy = rng.uniform(0.3, 0.7) * w, rng.uniform(0.3, 0.7) * h
        rx, ry = rng.uniform(0.16, 0.28) * w, rng.uniform(0.16, 0.28) * h
        yy, xx = np.mgrid[0:h, 0:w]
        edge = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
        edge = edge + 0.25 * _smooth_noise(rng, h, w, max(3, int(24 * s)))
        m = (edge < 1.0).astype(np.float32)
        speckle = rng.uniform(-0.2, 0.35, (h, w)).astype(np.float32)
        pits = (rng.random((h, w)) < 0.08).astype(np.float32)
        rgb = rgb + (m * (speckle - 0.25 * pits))[None]
        mask = m > 0.5
    else:  # repair
        ph, pw = rng.uniform(0.3, 0.55) * h, rng.uniform(0.3, 0.55) * w
        y0, x0 = rng.uniform(0, h - ph), rng.uniform(0, w - pw)
        m = np.zeros((h, w), dtype=np.float32)
        m[int(y0) : int(y0 + ph), int(x0) : int(x0 + pw)] = 1.0
        tone = base + rng.choice([-1.0, 1.0]) * rng.uniform(0.12, 0.2)
        patch = tone + 0.3 * spec.texture_amplitude * rng.standard_normal((h, w)).astype(np.float32)
        tint = np.array([1.1, 1.0, 0.85], dtype=np.float32)[:, None, None]
        rgb = rgb * (1 - m) + (patch[None] * tint) * m
        mask = m > 0.5

    return np.clip(rgb, 0.0, 1.0).astype(np.float32), mask


# ---------------------------------------------------------------------------
# PNG I/O


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def save_png(image: np.ndarray, path) -> None:
    """Save a 3 x H x W array in [0, 1] (clamped) as 8-bit RGB."""
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    """Load an RGB PNG as float32 3 x H x W in [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except FileNotFoundError:
        raise
    except Exception as exc:  # PIL raises a zoo of types for bad data
        raise DecodeError(f"cannot decode PNG {path}: {exc}") from exc
    return (arr / 255.0).transpose(2, 0, 1).copy()


# ---------------------------------------------------------------------------
# manifests


_NAME_RE = re.compile(r"c\d+_(\d+)\.png$")


@dataclass
class SampleRecord:
    path: str
    label: int
    class_name: str
    split: str
    index: int = 0  # sample index within its class


@dataclass
class DatasetManifest:
    records: list
    seed: int
    spec: dict
    root: Path = Path(".")

    def split(self, tag: str) -> list:
        return [r for r in self.records if r.split == tag]

    def resolve(self, rec: SampleRecord) -> Path:
        return self.root / rec.path

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(**self.spec)

    def save(self, path) -> None:
        path = Path(path)
        lines = [json.dumps({"spec": self.spec, "seed": self.seed}, sort_keys=True)]
        for r in self.records:
            lines.append(json.dumps({"path": r.path, "label": r.label, "class_name": r.class_name,
                                     "split": r.split}, sort_keys=True))
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        lines = path.read_text().splitlines()
        if not lines:
            raise ValueError(f"empty manifest {path}")
        header = json.loads(lines[0])
        records = []
        for line in lines[1:]:
            if line.strip():
                d = json.loads(line)
                m = _NAME_RE.search(d["path"])
                records.append(SampleRecord(d["path"], int(d["label"]), d["class_name"], d["split"],
                                            int(m.group(1)) if m else 0))
        return cls(records, header["seed"], header["spec"], path.parent)

    def with_records(self, records) -> "DatasetManifest":
        return DatasetManifest(list(records), self.seed, dict(self.spec), self.root)


def synth_generate(spec: DatasetSpec, out_dir) -> DatasetManifest:
    """Render the corpus under ``out_dir`` and write ``manifest.jsonl``."""
    spec.validate()
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out / 'images'}: {exc}") from exc
    records = []
    for label, name in enumerate(CLASS_NAMES):
        for i in range(spec.samples_per_class):
            image, _ = render_sample(spec, label, i)
            rel = f"images/c{label}_{i:05d}.png"
            try:
                save_png(image, out / rel)
            except OSError as exc:
                raise OSError(f"cannot write {out / rel}: {exc}") from exc
            records.append(SampleRecord(rel, label, name, "train", i))
    manifest = DatasetManifest(records, int(spec.seed), spec.to_dict(), out)
    manifest = make_splits(manifest, spec.train_fraction, spec.seed)
    manifest.save(out / "manifest.jsonl")
    return manifest


def make_splits(manifest: DatasetManifest, train_fraction: float, seed: int) -> DatasetManifest:
    """Stratified, seeded train/test assignment."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    by_class: dict[int, list] = {}
    for pos, r in enumerate(manifest.records):
        by_class.setdefault(r.label, []).append(pos)
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 0x5EED])
    tags = [None] * len(manifest.records)
    for label in sorted(by_class):
        members = by_class[label]
        n_train = int(round(train_fraction * len(members)))
        if n_train == 0 or n_train == len(members):
            raise ValueError(f"class {label} with {len(members)} samples cannot be split at {train_fraction}")
        order = rng.permutation(len(members))
        for rank, k in enumerate(order):
            tags[members[k]] = "train" if rank < n_train else "test"
    records = [SampleRecord(r.path, r.label, r.class_name, t, r.index) for r, t in zip(manifest.records, tags)]
    return manifest.with_records(records)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# batching


def normalize(images: np.ndarray) -> np.ndarray:
    return ((images - NORM_MEAN) / NORM_STD).astype(np.float32)


class ImageCache:
    """Decoded images keyed by resolved path; avoids re-decoding every epoch."""

    def __init__(self):
        self._store: dict = {}

    def get(self, path) -> np.ndarray:
        key = str(path)
        img = self._store.get(key)
        if img is None:
            if not Path(path).exists():
                raise FileNotFoundError(f"missing image {path}")
            img = load_png(path)
            self._store[key] = img
        return img


def batches(manifest: DatasetManifest, split: str, batch_size: int, epoch_seed: int | None,
            cache: ImageCache | None = None):
    """Yield ``(images N x 3 x H x W normalized float32, labels int array)``.

    ``epoch_seed=None`` keeps manifest order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    recs = manifest.split(split)
    order = np.arange(len(recs))
    if epoch_seed is not None:
        order = np.random.default_rng([int(epoch_seed) & 0xFFFFFFFFFFFFFFFF, 0xBA7C]).permutation(len(recs))
    cache = cache or ImageCache()
    for start in range(0, len(recs), batch_size):
        chunk = [recs[k] for k in order[start : start + batch_size]]
        imgs = [cache.get(manifest.resolve(r)) for r in chunk]
        for r, img in zip(chunk, imgs):
            if img.shape != imgs[0].shape:
                raise ValueError(f"image {manifest.resolve(r)} is {img.shape}, batch expects {imgs[0].shape}")
        imgs = np.stack(imgs)
        yield normalize(imgs), np.array([r.label for r in chunk], dtype=np.intp)


def png_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()
