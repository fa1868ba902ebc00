"""Procedural tactile-style dataset: renderer, on-disk format, annotation.

Samples are synthesized from three independent factors so that conditioning
claims stay testable: a contact shape (binary mask), a texture word mapped to
a procedural noise field, and a gel status (background color, light
direction, channel tint). Images are quantized to the 8-bit grid at creation
so the PPM round trip is lossless.

Layout on disk:
    <root>/manifest.json          counts, vocabularies, split assignments
    <root>/images/<id>.ppm        binary P6, 8 bit
    <root>/captions/<id>.json     {"texture", "shape", "gel_id", "contact"}
"""

from __future__ import annotations

import base64
import json
import os
import re
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError, DatasetFormatError, DatasetIntegrityError

NO_CONTACT = -1  # shape_id sentinel for frames captured without contact

DEFAULT_TEXTURES = ["smooth", "rough", "bumpy", "knitted"]
DEFAULT_SHAPES = ["a round button", "a ridged panel", "a cross stud", "a basketball surface"]

# frequency/contrast recipe per texture word; unknown words fall back to "smooth"
_TEXTURE_RECIPES = {
    "smooth": dict(freq=2, amp=0.12, octaves=1, aniso=1.0),
    "rough": dict(freq=10, amp=0.90, octaves=2, aniso=1.0),
    "bumpy": dict(freq=3, amp=0.85, octaves=1, aniso=1.0),
    "knitted": dict(freq=6, amp=0.80, octaves=1, aniso=4.0),
}


@dataclass
class GelPalette:
    """Per-gel rendering parameters for G gel statuses."""

    backgrounds: np.ndarray  # (G, 3) in [0, 1]
    light_dirs: np.ndarray   # (G, 2) unit vectors
    tints: np.ndarray        # (G, 3, 3)

    @property
    def gel_count(self) -> int:
        return self.backgrounds.shape[0]

    def validate(self) -> None:
        g = self.gel_count
        if self.light_dirs.shape != (g, 2) or self.tints.shape != (g, 3, 3):
            raise ConfigError("palette arrays disagree on gel count")
        if np.any(self.backgrounds < 0) or np.any(self.backgrounds > 1):
            raise ConfigError("background colors must lie in [0, 1]")
        norms = np.linalg.norm(self.light_dirs, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ConfigError("light directions must be unit vectors")
        for i in range(g):
            for j in range(i + 1, g):
                dist = float(np.linalg.norm(self.backgrounds[i] - self.backgrounds[j]))
                if dist < 0.2:
                    raise ConfigError(
                        f"gel backgrounds {i} and {j} too close (L2 {dist:.3f} < 0.2)")

    def expected_border_color(self, gel_id: int) -> np.ndarray:
        """Mean color of the non-contact border as the renderer produces it."""
        return np.clip(self.tints[gel_id] @ self.backgrounds[gel_id], 0.0, 1.0)


def default_palette(gel_count: int = 3) -> GelPalette:
    base_bg = np.array([
        [0.35, 0.45, 0.65],
        [0.60, 0.35, 0.40],
        [0.30, 0.58, 0.35],
        [0.62, 0.58, 0.30],
        [0.45, 0.30, 0.60],
    ])
    base_dirs = np.array([[1.0, 0.0], [0.0, 1.0], [0.7071067811865476, 0.7071067811865476],
                          [-0.7071067811865476, 0.7071067811865476], [-1.0, 0.0]])
    base_tints = np.stack([
        np.eye(3),
        np.array([[0.96, 0.04, 0.0], [0.0, 0.98, 0.02], [0.02, 0.0, 0.98]]),
        np.array([[0.97, 0.0, 0.03], [0.03, 0.97, 0.0], [0.0, 0.04, 0.96]]),
        np.array([[0.95, 0.05, 0.0], [0.05, 0.95, 0.0], [0.0, 0.0, 1.0]]),
        np.array([[1.0, 0.0, 0.0], [0.0, 0.96, 0.04], [0.04, 0.0, 0.96]]),
    ])
    if gel_count > base_bg.shape[0]:
        raise ConfigError(f"default palette supports up to {base_bg.shape[0]} gels")
    palette = GelPalette(base_bg[:gel_count].copy(), base_dirs[:gel_count].copy(),
                         base_tints[:gel_count].copy())
    palette.validate()
    return palette


@dataclass
class TactileSample:
    image: np.ndarray          # (H, W, 3) float in [0, 1]
    texture_caption: str
    shape_caption: str
    gel_id: int
    contact: bool
    sample_id: str = ""
    seed: int = 0

    def validate(self, gel_count: int | None = None) -> None:
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise ValueError("pixel values outside [0, 1]")
        if gel_count is not None and not (0 <= self.gel_id < gel_count):
            raise ValueError(f"gel_id {self.gel_id} outside [0, {gel_count})")
        if not self.contact and (self.texture_caption or self.shape_caption):
            raise ValueError("non-contact sample must have empty captions")


@dataclass
class RenderConfig:
    image_size: int = 32
    border_px: int = 4
    texture_vocab: list[str] = field(default_factory=lambda: list(DEFAULT_TEXTURES))
    shape_vocab: list[str] = field(default_factory=lambda: list(DEFAULT_SHAPES))
    palette: GelPalette = field(default_factory=default_palette)
    noise_sigma: float = 0.012
    light_amp: float = 0.04

    def validate(self) -> None:
        if self.image_size <= 0:
            raise ConfigError("image size must be positive")
        if self.image_size < 4 * self.border_px:
            raise ConfigError("image too small for the configured border")
        self.palette.validate()


# -- shape masks -------------------------------------------------------------

def _coord_grid(size: int):
    ax = np.arange(size) - (size - 1) / 2.0
    return np.meshgrid(ax, ax, indexing="xy")


def _contact_disk(size: int, border_px: int) -> np.ndarray:
    xx, yy = _coord_grid(size)
    radius = size / 2.0 - border_px - 1.0
    return xx * xx + yy * yy <= radius * radius


def shape_mask(shape_id: int, size: int, border_px: int) -> np.ndarray:
    """Binary contact mask confined to the central disk; border stays clear."""
    disk = _contact_disk(size, border_px)
    xx, yy = _coord_grid(size)
    if shape_id == NO_CONTACT:
        return np.zeros((size, size), dtype=bool)
    kind = shape_id % 4
    if kind == 0:  # filled circle
        r = size * 0.22
        mask = xx * xx + yy * yy <= r * r
    elif kind == 1:  # parallel stripes
        period = max(4, size // 8)
        mask = (np.floor(yy / (period / 2.0)).astype(int) % 2) == 0
    elif kind == 2:  # plus-shaped stud
        bar = size * 0.09
        mask = (np.abs(xx) <= bar) | (np.abs(yy) <= bar)
    else:  # pentagon-like tiling seams (Voronoi edges of a jittered grid)
        rng = np.random.default_rng(1234)
        step = max(6, size // 5)
        sites = []
        for row, cy in enumerate(np.arange(-size / 2, size / 2 + step, step)):
            offset = (step / 2.0) * (row % 2)
            for cx in np.arange(-size / 2, size / 2 + step, step):
                jitter = rng.uniform(-step * 0.25, step * 0.25, size=2)
                sites.append([cx + offset + jitter[0], cy + jitter[1]])
        sites_arr = np.array(sites)
        px = np.stack([xx.ravel(), yy.ravel()], axis=1)
        d = np.linalg.norm(px[:, None, :] - sites_arr[None, :, :], axis=2)
        d.sort(axis=1)
        seam = (d[:, 1] - d[:, 0]) < 1.6
        mask = seam.reshape(size, size)
    return mask & disk


# -- texture fields -------------------------------------------------------------

def _value_noise(rng: np.random.Generator, size: int, freq: int, aniso: float) -> np.ndarray:
    """Bilinearly upsampled random lattice in [0, 1]; aniso stretches x."""
    fx = max(2, int(round(freq * aniso)))
    fy = max(2, freq)
    lattice = rng.uniform(0.0, 1.0, size=(fy + 1, fx + 1))
    ys = np.linspace(0, fy, size)
    xs = np.linspace(0, fx, size)
    y0 = np.clip(ys.astype(int), 0, fy - 1)
    x0 = np.clip(xs.astype(int), 0, fx - 1)
    ty = (ys - y0)[:, None]
    tx = (xs - x0)[None, :]
    a = lattice[np.ix_(y0, x0)]
    b = lattice[np.ix_(y0, x0 + 1)]
    c = lattice[np.ix_(y0 + 1, x0)]
    d = lattice[np.ix_(y0 + 1, x0 + 1)]
    return a * (1 - ty) * (1 - tx) + b * (1 - ty) * tx + c * ty * (1 - tx) + d * ty * tx


def texture_field(texture_word: str, rng: np.random.Generator, size: int) -> np.ndarray:
    """Procedural texture in [0, 1] whose frequency content encodes the word."""
    recipe = _TEXTURE_RECIPES.get(texture_word, _TEXTURE_RECIPES["smooth"])
    total = np.zeros((size, size))
    weight = 0.0
    for octave in range(recipe["octaves"]):
        w = 0.5 ** octave
        total += w * _value_noise(rng, size, recipe["freq"] * (2 ** octave), recipe["aniso"])
        weight += w
    field_ = total / weight
    centered = (field_ - 0.5) * recipe["amp"]
    return 0.5 + centered


# -- sample generation ------------------------------------------------------------

def generate_sample(texture_id: int, shape_id: int, gel_id: int, seed: int,
                    config: RenderConfig | None = None) -> TactileSample:
    """Render one sample as a pure function of its four arguments."""
    cfg = config or RenderConfig()
    cfg.validate()
    size = cfg.image_size
    contact = shape_id != NO_CONTACT
    if contact and not (0 <= shape_id < len(cfg.shape_vocab)):
        raise IndexError(f"shape_id {shape_id} outside vocabulary of {len(cfg.shape_vocab)}")
    if contact and not (0 <= texture_id < len(cfg.texture_vocab)):
        raise IndexError(f"texture_id {texture_id} outside vocabulary of {len(cfg.texture_vocab)}")
    if not (0 <= gel_id < cfg.palette.gel_count):
        raise IndexError(f"gel_id {gel_id} outside palette of {cfg.palette.gel_count}")

    rng = np.random.default_rng([seed, texture_id + 1, shape_id + 1, gel_id, 0x7AC7])
    mask = shape_mask(shape_id, size, cfg.border_px).astype(float)

    bg = cfg.palette.backgrounds[gel_id]
    raw = np.broadcast_to(bg, (size, size, 3)).copy()

    if contact:
        tex = texture_field(cfg.texture_vocab[texture_id], rng, size)
        # contact deformation: blend toward a bright contact tone; the texture
        # field drives the blend strength, so its variation never clips
        blend = mask * (0.55 + 0.9 * (tex - 0.5))
        raw += blend[:, :, None] * (0.92 - raw)

    # zero-mean illumination gradient along the gel's light direction
    xx, yy = _coord_grid(size)
    dx, dy = cfg.palette.light_dirs[gel_id]
    grad = (xx * dx + yy * dy) / (size / 2.0)
    raw += cfg.light_amp * grad[:, :, None]

    raw += rng.normal(0.0, cfg.noise_sigma, size=(size, size, 3))

    tinted = raw @ cfg.palette.tints[gel_id].T
    image = np.clip(tinted, 0.0, 1.0)
    image = np.round(image * 255.0) / 255.0  # snap to the 8-bit grid (lossless IO)

    if contact:
        texture_caption = cfg.texture_vocab[texture_id]
        shape_caption = cfg.shape_vocab[shape_id]
    else:
        texture_caption = ""
        shape_caption = ""
    return TactileSample(image=image.astype(np.float32), texture_caption=texture_caption,
                         shape_caption=shape_caption, gel_id=gel_id, contact=contact,
                         seed=seed)


def border_mask(size: int, border_px: int) -> np.ndarray:
    m = np.zeros((size, size), dtype=bool)
    m[:border_px, :] = True
    m[-border_px:, :] = True
    m[:, :border_px] = True
    m[:, -border_px:] = True
    return m


# -- manifest and splits ------------------------------------------------------------

@dataclass
class SampleRecord:
    sample_id: str
    texture_id: int
    shape_id: int
    gel_id: int
    seed: int
    split: str
    contact: bool


@dataclass
class DatasetManifest:
    root: str
    image_size: int
    gel_count: int
    texture_vocab: list[str]
    shape_vocab: list[str]
    records: list[SampleRecord]

    @property
    def sample_count(self) -> int:
        return len(self.records)

    def split_ids(self, split: str) -> list[str]:
        return [r.sample_id for r in self.records if r.split == split]

    def validate(self) -> None:
        if not self.texture_vocab or not self.shape_vocab:
            raise ConfigError("vocabularies must be non-empty")
        if len(set(self.texture_vocab)) != len(self.texture_vocab):
            raise ConfigError("texture vocabulary contains duplicates")
        if len(set(self.shape_vocab)) != len(self.shape_vocab):
            raise ConfigError("shape vocabulary contains duplicates")
        seen: set[str] = set()
        for r in self.records:
            if r.sample_id in seen:
                raise ConfigError(f"sample id {r.sample_id} assigned more than once")
            seen.add(r.sample_id)
            if r.split not in ("train", "val", "test"):
                raise ConfigError(f"unknown split {r.split!r} for sample {r.sample_id}")

    def to_json(self) -> dict:
        return {
            "image_size": self.image_size,
            "gel_count": self.gel_count,
            "texture_vocab": self.texture_vocab,
            "shape_vocab": self.shape_vocab,
            "samples": [vars(r) for r in self.records],
        }

    @classmethod
    def from_json(cls, payload: dict, root: str) -> "DatasetManifest":
        records = [SampleRecord(**entry) for entry in payload["samples"]]
        manifest = cls(root=root, image_size=int(payload["image_size"]),
                       gel_count=int(payload["gel_count"]),
                       texture_vocab=list(payload["texture_vocab"]),
                       shape_vocab=list(payload["shape_vocab"]), records=records)
        manifest.validate()
        return manifest


@dataclass
class DatasetSpec:
    """Recipe for the procedurally generated desk-scale dataset."""

    render: RenderConfig = field(default_factory=RenderConfig)
    seeds_per_combo: int = 64
    noncontact_per_gel: int = 32
    train_frac: float = 0.8
    val_frac: float = 0.1  # remainder goes to test

    def split_for_seed(self, seed_index: int, total: int) -> str:
        frac = seed_index / total
        if frac < self.train_frac:
            return "train"
        if frac < self.train_frac + self.val_frac:
            return "val"
        return "test"


def build_manifest(root: str, spec: DatasetSpec) -> DatasetManifest:
    spec.render.validate()
    records: list[SampleRecord] = []
    idx = 0
    gels = spec.render.palette.gel_count
    for gel_id in range(gels):
        for shape_id in range(len(spec.render.shape_vocab)):
            for texture_id in range(len(spec.render.texture_vocab)):
                for seed in range(spec.seeds_per_combo):
                    records.append(SampleRecord(
                        sample_id=f"{idx:05d}", texture_id=texture_id, shape_id=shape_id,
                        gel_id=gel_id, seed=seed,
                        split=spec.split_for_seed(seed, spec.seeds_per_combo), contact=True))
                    idx += 1
    for gel_id in range(gels):
        for seed in range(spec.noncontact_per_gel):
            split = spec.split_for_seed(seed, max(1, spec.noncontact_per_gel))
            records.append(SampleRecord(
                sample_id=f"{idx:05d}", texture_id=0, shape_id=NO_CONTACT,
                gel_id=gel_id, seed=seed, split=split, contact=False))
            idx += 1
    manifest = DatasetManifest(root=root, image_size=spec.render.image_size,
                               gel_count=gels, texture_vocab=list(spec.render.texture_vocab),
                               shape_vocab=list(spec.render.shape_vocab), records=records)
    manifest.validate()
    return manifest


def generate_dataset(root: str, spec: DatasetSpec | None = None,
                     progress: bool = False) -> DatasetManifest:
    """Render every sample in the manifest and write the dataset to disk."""
    spec = spec or DatasetSpec()
    manifest = build_manifest(root, spec)

    def sample_iter() -> Iterator[TactileSample]:
        for i, rec in enumerate(manifest.records):
            if progress and i % 500 == 0:
                print(f"  rendering {i}/{len(manifest.records)}")
            sample = generate_sample(rec.texture_id, rec.shape_id, rec.gel_id, rec.seed,
                                     spec.render)
            sample.sample_id = rec.sample_id
            yield sample

    write_dataset(manifest, sample_iter())
    return manifest


# -- PPM io ------------------------------------------------------------

def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Write an (H, W, 3) float [0,1] image as binary P6 (8 bit)."""
    h, w, c = image.shape
    if c != 3:
        raise ValueError(f"P6 requires 3 channels, got {c}")
    payload = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(payload.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P6"):
        raise DatasetFormatError(f"{path}: not a binary P6 file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        try:
            fields.append(int(blob[start:pos]))
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: malformed PPM header") from exc
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise DatasetFormatError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
    expected = w * h * 3
    data = blob[pos:pos + expected]
    if len(data) != expected:
        raise DatasetFormatError(f"{path}: truncated pixel payload")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
    return (arr.astype(np.float32) / 255.0)


# -- dataset io ------------------------------------------------------------

def write_dataset(manifest: DatasetManifest, samples: Iterable[TactileSample]) -> None:
    root = Path(manifest.root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "captions").mkdir(parents=True, exist_ok=True)
    count = 0
    for rec, sample in zip(manifest.records, samples):
        write_ppm(root / "images" / f"{rec.sample_id}.ppm", sample.image)
        caption = {"texture": sample.texture_caption, "shape": sample.shape_caption,
                   "gel_id": sample.gel_id, "contact": sample.contact}
        with open(root / "captions" / f"{rec.sample_id}.json", "w", encoding="utf-8") as fh:
            json.dump(caption, fh)
        count += 1
    if count != manifest.sample_count:
        raise DatasetIntegrityError(
            f"manifest lists {manifest.sample_count} samples but {count} were written")
    with open(root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest.to_json(), fh, indent=1)


def read_manifest(root: str | Path) -> DatasetManifest:
    path = Path(root) / "manifest.json"
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError:
        raise DatasetFormatError(f"{path}: manifest not found")
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: invalid JSON ({exc})") from exc
    return DatasetManifest.from_json(payload, str(root))


def load_sample(root: str | Path, sample_id: str) -> TactileSample:
    root = Path(root)
    image = read_ppm(root / "images" / f"{sample_id}.ppm")
    cap_path = root / "captions" / f"{sample_id}.json"
    try:
        with open(cap_path, "r", encoding="utf-8") as fh:
            caption = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{cap_path}: invalid JSON ({exc})") from exc
    return TactileSample(image=image, texture_caption=caption["texture"],
                         shape_caption=caption["shape"], gel_id=int(caption["gel_id"]),
                         contact=bool(caption["contact"]), sample_id=sample_id)


def read_dataset(root: str | Path):
    """Return (manifest, iterator over samples in manifest order)."""
    manifest = read_manifest(root)
    image_dir = Path(root) / "images"
    n_images = len(list(image_dir.glob("*.ppm"))) if image_dir.is_dir() else 0
    if n_images != manifest.sample_count:
        raise DatasetIntegrityError(
            f"manifest lists {manifest.sample_count} samples but found {n_images} images")

    def iterator() -> Iterator[TactileSample]:
        for rec in manifest.records:
            yield load_sample(root, rec.sample_id)

    return manifest, iterator()


# -- annotation adapter ------------------------------------------------------------

ANNOTATION_TEMPLATE = """You are watching a tactile capture session: {context}.
Answer step by step.
Step 1: Describe the scene while the sensor is about to touch the object.
Step 2: Describe what changes once the sensor is in contact with the surface.
Step 3: Note any special situations (slip, partial contact, occlusion).
Step 4: State the final answer as 'the object is <object phrase>'."""

_STEP4_RE = re.compile(r"step\s*4\s*[:.\-]?\s*the object is\s+(.+)", re.IGNORECASE)


def build_annotation_prompt(context: str) -> str:
    return ANNOTATION_TEMPLATE.format(context=context)


def parse_annotation_response(text: str) -> tuple[str, bool]:
    """Extract the step-four object phrase; returns (caption, warning_flag)."""
    match = _STEP4_RE.search(text or "")
    if not match:
        return "", True
    caption = match.group(1).strip().strip(".!?'\" ").strip()
    if not caption:
        return "", True
    return caption.lower(), False


class SidecarCaptionAdapter:
    """Default annotator: trust the caption stored next to the image."""

    def shape_caption(self, sample: TactileSample, context: str = "") -> tuple[str, bool]:
        return sample.shape_caption, False


class HttpAnnotatorClient:
    """POST {prompt, image_base64} to an annotation endpoint and parse the reply."""

    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def shape_caption(self, sample: TactileSample, context: str = "") -> tuple[str, bool]:
        payload = {
            "prompt": build_annotation_prompt(context or "tactile sensor capture"),
            "image_base64": base64.b64encode(
                np.round(sample.image * 255).astype(np.uint8).tobytes()).decode("ascii"),
        }
        req = urllib.request.Request(
            self.endpoint, data=json.dumps(payload).encode("utf-8"),
            headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            body = resp.read().decode("utf-8")
        try:
            answer = json.loads(body).get("response", body)
        except json.JSONDecodeError:
            answer = body
        return parse_annotation_response(answer)


def make_annotator(endpoint: str | None = None):
    """HTTP client when ANNOTATOR_URL (or an explicit endpoint) is set, else sidecar."""
    url = endpoint or os.environ.get("ANNOTATOR_URL", "")
    if url:
        return HttpAnnotatorClient(url)
    return SidecarCaptionAdapter()
