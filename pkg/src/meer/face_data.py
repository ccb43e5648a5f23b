"""Aligned-face data: toy identity synthesis, mask overlays, manifests.

Images are float32 CHW tensors in [-1, 1] (default 112x112) and are stored
on disk as 8-bit RGB PNGs, converted back with v / 127.5 - 1. A dataset is
a directory tree with one subdirectory per identity; masked images follow
the naming convention ``<stem>__m<ccc>.png`` where ``ccc`` is the
zero-padded mask pattern class of the overlay applied to ``<stem>.png``.

Manifest files are UTF-8 text, one record per line, tab-separated:
``path  identity_label  mask_flag  pattern_class  paired_path_or_dash``.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import mask_patterns
from .mask_patterns import PatternVocabulary, enumerate_patterns

REAL_UNMASKED = "real_unmasked"
SIMULATED_MASKED = "simulated_masked"
FAKE_UNMASKED = "fake_unmasked"
MASK_FLAGS = (REAL_UNMASKED, SIMULATED_MASKED, FAKE_UNMASKED)

MANIFEST_SCHEMA_VERSION = 1
MIN_FACE_SIZE = 16

_MASKED_STEM_RE = re.compile(r"^(?P<stem>.+)__m(?P<cls>\d{3})$")


@dataclass
class AlignedFace:
    """A normalized face image plus its training metadata."""

    pixels: np.ndarray  # float32, (3, H, W), values in [-1, 1]
    identity_label: int
    mask_flag: str = REAL_UNMASKED
    pattern_class: int = 0
    paired_unmasked_path: str | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ValueError(f"pixels must be (3, H, W), got {self.pixels.shape}")
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < -1.0 or hi > 1.0:
            raise ValueError(f"pixel values outside [-1, 1]: min={lo}, max={hi}")
        if self.identity_label < 0:
            raise ValueError(f"identity_label must be >= 0, got {self.identity_label}")
        if self.mask_flag not in MASK_FLAGS:
            raise ValueError(f"unknown mask_flag {self.mask_flag!r}")
        if self.mask_flag == REAL_UNMASKED and self.pattern_class != 0:
            raise ValueError("real_unmasked faces must have pattern_class 0")


def rasterize_polygon(polygon, height: int, width: int) -> np.ndarray:
    """Even-odd rasterization of a polygon onto pixel centers.

    Pixel (r, c) is covered iff its center (c + 0.5, r + 0.5) lies inside
    the polygon, vertices given as (x, y) in pixel coordinates.
    """
    if len(polygon) < 3:
        raise ValueError(f"polygon needs >= 3 vertices, got {len(polygon)}")
    xs = np.array([p[0] for p in polygon], dtype=np.float64)
    ys = np.array([p[1] for p in polygon], dtype=np.float64)
    if xs.min() < 0 or xs.max() > width or ys.min() < 0 or ys.max() > height:
        raise ValueError("polygon vertices must lie within image bounds")

    py, px = np.mgrid[0:height, 0:width].astype(np.float64)
    px += 0.5
    py += 0.5
    inside = np.zeros((height, width), dtype=bool)
    n = len(polygon)
    for i in range(n):
        x1, y1 = xs[i], ys[i]
        x2, y2 = xs[(i + 1) % n], ys[(i + 1) % n]
        if y1 == y2:
            continue
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(invalid="ignore"):
            x_at = (x2 - x1) * (py - y1) / (y2 - y1) + x1
        inside ^= crosses & (px < x_at)
    return inside


@dataclass(frozen=True)
class MaskSpec:
    """A polygonal occlusion with its fill texture and exact pixel coverage."""

    polygon: tuple  # ((x, y), ...) in pixel coordinates
    fill_texture: str  # "solid_color" | "noise"
    color: tuple[float, float, float]
    coverage_region: np.ndarray  # bool, H x W; rasterization of polygon
    noise_seed: int = 0

    @classmethod
    def create(cls, polygon, height, width, fill_texture="solid_color",
               color=(-0.2, -0.2, 0.6), noise_seed=0) -> "MaskSpec":
        if fill_texture not in ("solid_color", "noise"):
            raise ValueError(f"unknown fill_texture {fill_texture!r}")
        color = tuple(float(c) for c in color)
        if any(c < -1.0 or c > 1.0 for c in color):
            raise ValueError(f"fill color must be in [-1, 1], got {color}")
        region = rasterize_polygon(polygon, height, width)
        return cls(polygon=tuple(tuple(p) for p in polygon), fill_texture=fill_texture,
                   color=color, coverage_region=region, noise_seed=noise_seed)

    def fill_pixels(self, height: int, width: int) -> np.ndarray:
        """The (3, H, W) texture painted inside the coverage region."""
        if self.fill_texture == "solid_color":
            tex = np.empty((3, height, width), dtype=np.float32)
            tex[0], tex[1], tex[2] = self.color
            return tex
        rng = np.random.default_rng(self.noise_seed)
        return rng.uniform(-1.0, 1.0, size=(3, height, width)).astype(np.float32)


def synth_identity_face(id_seed: int, variation_seed: int, size: int = 112) -> AlignedFace:
    """Deterministic toy face: geometry/colors from id_seed, jitter from variation_seed.

    The identity stream fixes face-ellipse geometry, feature placement and
    base colors; the variation stream adds a small pose shift, a lighting
    gradient and pixel noise. Output pixels are clipped to [-1, 1].
    """
    if size < MIN_FACE_SIZE:
        raise ValueError(f"size must be >= {MIN_FACE_SIZE}, got {size}")

    id_rng = np.random.default_rng([0x1D5EED, int(id_seed)])
    var_rng = np.random.default_rng([0x7A12, int(id_seed), int(variation_seed)])

    # identity parameters (normalized [0, 1] coordinates)
    bg = id_rng.uniform(-0.95, -0.3, size=3)
    skin = id_rng.uniform(0.0, 0.8, size=3)
    hair = id_rng.uniform(-0.9, 0.1, size=3)
    iris = id_rng.uniform(-0.9, 0.3, size=3)
    mouth_col = id_rng.uniform(-0.6, 0.4, size=3)
    face_rx = id_rng.uniform(0.26, 0.38)
    face_ry = id_rng.uniform(0.34, 0.46)
    eye_dx = id_rng.uniform(0.10, 0.16)
    eye_y = id_rng.uniform(0.40, 0.48)
    eye_r = id_rng.uniform(0.028, 0.05)
    brow_dy = id_rng.uniform(0.05, 0.09)
    brow_h = id_rng.uniform(0.008, 0.02)
    nose_w = id_rng.uniform(0.015, 0.04)
    nose_len = id_rng.uniform(0.08, 0.14)
    mouth_y = id_rng.uniform(0.68, 0.76)
    mouth_w = id_rng.uniform(0.07, 0.14)
    mouth_h = id_rng.uniform(0.015, 0.035)
    has_hair = id_rng.uniform() > 0.25

    # variation parameters
    jx = var_rng.uniform(-0.02, 0.02)
    jy = var_rng.uniform(-0.02, 0.02)
    gain = var_rng.uniform(0.85, 1.0)
    light_dir = var_rng.uniform(-1.0, 1.0, size=2)
    light_amp = var_rng.uniform(0.0, 0.12)
    noise_amp = var_rng.uniform(0.0, 0.02)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    yy = (yy + 0.5) / size
    xx = (xx + 0.5) / size
    cx, cy = 0.5 + jx, 0.54 + jy

    img = np.empty((3, size, size), dtype=np.float32)
    img[0], img[1], img[2] = bg

    def ellipse(ecx, ecy, rx, ry):
        return ((xx - ecx) / rx) ** 2 + ((yy - ecy) / ry) ** 2 <= 1.0

    def paint(mask, color):
        for ch in range(3):
            img[ch][mask] = color[ch]

    if has_hair:
        paint(ellipse(cx, cy - 0.16, face_rx * 1.12, face_ry * 0.82), hair)
    paint(ellipse(cx, cy, face_rx, face_ry), skin)

    for sgn in (-1.0, 1.0):
        ex = cx + sgn * eye_dx
        ey = cy - 0.54 + eye_y  # eye row, id-dependent
        brow = (np.abs(yy - (ey - brow_dy)) <= brow_h) & (np.abs(xx - ex) <= eye_r * 1.6)
        paint(brow, hair)
        paint(ellipse(ex, ey, eye_r * 1.4, eye_r), (0.95, 0.95, 0.95))
        paint(ellipse(ex, ey, eye_r * 0.65, eye_r * 0.65), iris)
        paint(ellipse(ex, ey, eye_r * 0.28, eye_r * 0.28), (-1.0, -1.0, -1.0))

    nose = (np.abs(xx - cx) <= nose_w) & (yy >= cy - 0.02) & (yy <= cy - 0.02 + nose_len)
    paint(nose, skin * 0.6)
    paint(ellipse(cx, cy - 0.54 + mouth_y, mouth_w, mouth_h), mouth_col)

    shade = light_amp * ((xx - 0.5) * light_dir[0] + (yy - 0.5) * light_dir[1])
    img = img * gain + shade[None, :, :]
    img += var_rng.normal(0.0, 1.0, size=img.shape).astype(np.float32) * noise_amp
    img = np.clip(img, -1.0, 1.0).astype(np.float32)

    return AlignedFace(pixels=img, identity_label=0, mask_flag=REAL_UNMASKED, pattern_class=0)


def overlay_mask(
    face: AlignedFace,
    spec: MaskSpec,
    vocab: PatternVocabulary | None = None,
    cell_threshold: float = mask_patterns.DEFAULT_CELL_THRESHOLD,
) -> tuple[AlignedFace, np.ndarray]:
    """Paint the mask texture inside the spec's coverage region.

    Pixels outside the region are bit-identical to the source. The output's
    pattern class is recomputed from the coverage region on the default
    4x4 grid (or the supplied vocabulary).
    """
    if face.mask_flag != REAL_UNMASKED:
        raise ValueError(f"overlay_mask needs a real_unmasked face, got {face.mask_flag}")
    if len(spec.polygon) < 3:
        raise ValueError("mask polygon is empty")
    h, w = face.pixels.shape[1:]
    region = spec.coverage_region
    if region.shape != (h, w):
        raise ValueError(f"coverage region {region.shape} does not match image ({h}, {w})")

    if vocab is None:
        vocab = enumerate_patterns(mask_patterns.DEFAULT_GRID_SIZE)
    pattern = mask_patterns.pattern_class_of_region(region, vocab, cell_threshold)

    out = face.pixels.copy()
    tex = spec.fill_pixels(h, w)
    out[:, region] = tex[:, region]
    masked = AlignedFace(
        pixels=out,
        identity_label=face.identity_label,
        mask_flag=SIMULATED_MASKED,
        pattern_class=pattern,
        paired_unmasked_path=face.paired_unmasked_path,
    )
    return masked, region.copy()


def sample_mask_spec(height: int, width: int, rng: np.random.Generator,
                     style: str = "trapezoid", grid_size: int = 4) -> MaskSpec:
    """Occlusion sampler.

    ``trapezoid`` mimics surgical-mask placement: full-width bottom edge,
    randomized top edge in rows [0.45 H, 0.65 H]. ``lower_half`` covers
    exactly the bottom half of the image. ``random_rect`` covers a random
    grid-aligned cell rectangle, exercising the full pattern vocabulary.
    """
    color = rng.uniform(-1.0, 1.0, size=3)
    if style == "lower_half":
        poly = [(0, height / 2), (width, height / 2), (width, height), (0, height)]
        return MaskSpec.create(poly, height, width, color=color)
    if style == "random_rect":
        ch, cw = height / grid_size, width / grid_size
        r0, c0 = rng.integers(grid_size), rng.integers(grid_size)
        r1, c1 = rng.integers(r0, grid_size), rng.integers(c0, grid_size)
        x0, y0, x1, y1 = c0 * cw, r0 * ch, (c1 + 1) * cw, (r1 + 1) * ch
        poly = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
        return MaskSpec.create(poly, height, width, color=color)
    if style != "trapezoid":
        raise ValueError(f"unknown mask style {style!r}")
    top = rng.uniform(0.45, 0.65) * height
    inset_l = rng.uniform(0.05, 0.2) * width
    inset_r = rng.uniform(0.05, 0.2) * width
    poly = [(inset_l, top), (width - inset_r, top), (width, height), (0, height)]
    return MaskSpec.create(poly, height, width, color=color)


# ---------------------------------------------------------------------------
# image files

def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """[-1, 1] CHW float -> HWC uint8."""
    arr = np.clip((np.asarray(pixels, dtype=np.float64) + 1.0) * 127.5, 0.0, 255.0)
    return np.round(arr).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    """HWC uint8 -> [-1, 1] CHW float32, as v / 127.5 - 1."""
    return (arr.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)


def save_image(pixels: np.ndarray, path: str | Path) -> None:
    Image.fromarray(to_uint8(pixels), mode="RGB").save(path)


def load_image(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except Exception as exc:
        raise OSError(f"unreadable image file: {path}") from exc
    return from_uint8(arr)


# ---------------------------------------------------------------------------
# manifests

@dataclass(frozen=True)
class ManifestRecord:
    path: str
    identity_label: int
    mask_flag: str
    pattern_class: int
    paired_unmasked_path: str | None = None


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)
    num_identities: int = 0
    schema_version: int = MANIFEST_SCHEMA_VERSION
    warnings: tuple[str, ...] = ()

    def masked_records(self) -> list[ManifestRecord]:
        return [r for r in self.records if r.mask_flag == SIMULATED_MASKED]


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    lines = [f"# schema={manifest.schema_version} num_identities={manifest.num_identities}"]
    for rec in manifest.records:
        paired = rec.paired_unmasked_path if rec.paired_unmasked_path else "-"
        lines.append("\t".join([
            rec.path, str(rec.identity_label), rec.mask_flag,
            str(rec.pattern_class), paired,
        ]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    text = Path(path).read_text(encoding="utf-8")
    records = []
    schema = MANIFEST_SCHEMA_VERSION
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            m = re.search(r"schema=(\d+)", line)
            if m:
                schema = int(m.group(1))
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
        rec = ManifestRecord(
            path=parts[0],
            identity_label=int(parts[1]),
            mask_flag=parts[2],
            pattern_class=int(parts[3]),
            paired_unmasked_path=None if parts[4] == "-" else parts[4],
        )
        if rec.mask_flag not in MASK_FLAGS:
            raise ValueError(f"{path}:{lineno}: unknown mask_flag {rec.mask_flag!r}")
        records.append(rec)

    labels = sorted({r.identity_label for r in records})
    if labels and labels != list(range(len(labels))):
        raise ValueError(f"{path}: identity labels are not contiguous from 0: {labels[:8]}...")
    if check_files:
        for rec in records:
            for p in (rec.path, rec.paired_unmasked_path):
                if p is not None and not os.path.isfile(p):
                    raise FileNotFoundError(f"manifest references missing file: {p}")
    return DatasetManifest(records=records, num_identities=len(labels), schema_version=schema)


def synthesize_dataset(
    out_dir: str | Path,
    n_ids: int,
    imgs_per_id: int,
    masked_ratio: float,
    size: int = 112,
    seed: int = 0,
    mask_style: str = "trapezoid",
) -> DatasetManifest:
    """Write a toy dataset tree plus its manifest; fully seeded.

    Each identity gets ``imgs_per_id`` manifest records of which
    ``round(masked_ratio * imgs_per_id)`` are masked overlays. A masked
    record is generated from one of the identity's unmasked records (same
    variation seed) and pairs back to it, so pixel-level supervision is
    exact. At least one unmasked record per identity is required; a masked
    count above the unmasked count would collide on source images.
    """
    if n_ids < 1 or imgs_per_id < 1:
        raise ValueError("need n_ids >= 1 and imgs_per_id >= 1")
    if not 0.0 <= masked_ratio <= 1.0:
        raise ValueError(f"masked_ratio must be in [0, 1], got {masked_ratio}")
    n_masked = int(round(imgs_per_id * masked_ratio))
    n_unmasked = imgs_per_id - n_masked
    if n_masked > n_unmasked:
        raise ValueError(
            f"masked_ratio {masked_ratio} needs more masked images ({n_masked}) than "
            f"unmasked sources ({n_unmasked}); use a ratio of at most 0.5"
        )

    out = Path(out_dir)
    vocab = enumerate_patterns()
    records: list[ManifestRecord] = []
    for ident in range(n_ids):
        id_dir = out / f"id{ident:04d}"
        id_dir.mkdir(parents=True, exist_ok=True)
        id_seed = seed * 1_000_003 + ident

        src_paths = []
        for v in range(n_unmasked):
            face = synth_identity_face(id_seed, v, size)
            path = id_dir / f"img{v:03d}.png"
            save_image(face.pixels, path)
            src_paths.append(str(path))
            records.append(ManifestRecord(str(path), ident, REAL_UNMASKED, 0))

        for j in range(n_masked):
            src_v = j % n_unmasked
            face = synth_identity_face(id_seed, src_v, size)
            rng = np.random.default_rng([0x3A5C, seed, ident, j])
            spec = sample_mask_spec(size, size, rng, style=mask_style)
            masked, _ = overlay_mask(face, spec, vocab)
            path = id_dir / f"img{src_v:03d}__m{masked.pattern_class:03d}.png"
            save_image(masked.pixels, path)
            records.append(ManifestRecord(
                str(path), ident, SIMULATED_MASKED, masked.pattern_class, src_paths[src_v]))

    manifest = DatasetManifest(records=records, num_identities=n_ids)
    write_manifest(manifest, out / "manifest.tsv")
    return manifest


def parse_masked_filename(filename: str) -> tuple[str, int] | None:
    """``img3__m042.png`` -> (source stem ``img3``, pattern class 42); None if unmasked."""
    m = _MASKED_STEM_RE.match(Path(filename).stem)
    if m is None:
        return None
    return m.group("stem"), int(m.group("cls"))


def build_manifest(root_dir: str | Path, pairing: str = "none") -> DatasetManifest:
    """Scan a one-subdirectory-per-identity tree into a manifest.

    Identities are relabeled contiguously in sorted directory order; empty
    identity directories are skipped and reported in ``warnings``. With
    pairing="masked_unmasked", each masked record points at its source
    image inferred from the filename convention.
    """
    if pairing not in ("none", "masked_unmasked"):
        raise ValueError(f"unknown pairing mode {pairing!r}")
    root = Path(root_dir)
    if not root.is_dir():
        raise NotADirectoryError(f"dataset root does not exist: {root}")

    records: list[ManifestRecord] = []
    warnings: list[str] = []
    label = 0
    for ident_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(p for p in ident_dir.iterdir()
                       if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
        if not files:
            warnings.append(f"identity directory with no images skipped: {ident_dir.name}")
            continue
        for f in files:
            try:
                with Image.open(f) as im:
                    im.verify()
            except Exception as exc:
                raise OSError(f"unreadable image file: {f}") from exc
            masked = parse_masked_filename(f.name)
            if masked is None:
                rec = ManifestRecord(str(f), label, REAL_UNMASKED, 0)
            else:
                stem, cls = masked
                paired = None
                if pairing == "masked_unmasked":
                    src = f.with_name(stem + f.suffix)
                    if not src.is_file():
                        raise FileNotFoundError(
                            f"masked image {f} has no unmasked source {src}")
                    paired = str(src)
                rec = ManifestRecord(str(f), label, SIMULATED_MASKED, cls, paired)
            records.append(rec)
        label += 1

    return DatasetManifest(records=records, num_identities=label,
                           warnings=tuple(warnings))
