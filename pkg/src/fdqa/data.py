"""Manifests, image I/O, preprocessing and the synthetic fundus generator."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .labels import QualityLabel
from .tensor import FLOAT, Tensor, interp_matrix

SPLITS = ("train", "test")
DEGRADATIONS = ("blur", "illumination", "occlusion", "low_contrast")
USABLE_MAX_FRACTION = 0.20

DEFAULT_MEAN = (0.5, 0.5, 0.5)
DEFAULT_STD = (0.25, 0.25, 0.25)


class DataError(ValueError):
    pass


# --------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestRecord:
    image: str
    label: QualityLabel
    split: str


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    root: Path = field(default_factory=lambda: Path("."))

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, split: str) -> "DatasetManifest":
        return DatasetManifest([r for r in self.records if r.split == split], self.root)

    def counts(self, split: str | None = None) -> tuple[int, int, int]:
        c = [0, 0, 0]
        for r in self.records:
            if split is None or r.split == split:
                c[int(r.label)] += 1
        return tuple(c)

    def path(self, record: ManifestRecord) -> Path:
        p = Path(record.image)
        return p if p.is_absolute() else self.root / p


def load_manifest(path: str | os.PathLike, default_split: str = "train") -> DatasetManifest:
    """Read a manifest CSV with at least ``image`` and ``quality`` columns.

    A ``split`` column is optional; other columns (e.g. an unnamed index or a
    DR grade) are ignored.  Errors name the 1-based file line.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty manifest") from None
        for col in ("image", "quality"):
            if col not in header:
                raise DataError(f"{path}: line 1: missing required column {col!r}")
        ii, qi = header.index("image"), header.index("quality")
        si = header.index("split") if "split" in header else None
        records = []
        seen: set[tuple[str, str]] = set()
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise DataError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            image = row[ii].strip()
            if not image:
                raise DataError(f"{path}: line {lineno}: empty image path")
            try:
                label = QualityLabel.from_code(row[qi].strip())
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            split = row[si].strip() if si is not None else default_split
            if split not in SPLITS:
                raise DataError(f"{path}: line {lineno}: unknown split {split!r}")
            if (image, split) in seen:
                raise DataError(f"{path}: line {lineno}: duplicate image {image!r} in split {split!r}")
            seen.add((image, split))
            records.append(ManifestRecord(image, label, split))
    return DatasetManifest(records, path.parent)


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["image", "quality", "split"])
    for r in manifest.records:
        writer.writerow([r.image, int(r.label), r.split])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def split(manifest: DatasetManifest, fractions: float | Sequence[float] = (0.8, 0.2), seed: int = 0):
    """Shuffle and split records into (train, test) manifests."""
    if isinstance(fractions, (int, float)):
        fractions = (float(fractions), 1.0 - float(fractions))
    if len(fractions) != 2 or min(fractions) < 0 or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise DataError(f"fractions must be two non-negative numbers summing to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(manifest.records))
    n_train = int(round(fractions[0] * len(order)))
    recs = manifest.records
    train = [ManifestRecord(recs[i].image, recs[i].label, "train") for i in order[:n_train]]
    test = [ManifestRecord(recs[i].image, recs[i].label, "test") for i in order[n_train:]]
    return DatasetManifest(train, manifest.root), DatasetManifest(test, manifest.root)


# --------------------------------------------------------------------------
# image files


def _ppm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PPM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # single whitespace byte after maxval


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, offset = _ppm_tokens(buf, 4)
    if tokens[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=offset)
    return data.reshape(h, w, 3).copy()


def write_ppm(path: str | os.PathLike, image: np.ndarray, comment: str | None = None) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise DataError("write_ppm needs an H x W x 3 uint8 array")
    h, w = img.shape[:2]
    head = b"P6\n"
    if comment:
        head += b"".join(b"# " + line.encode("utf-8") + b"\n" for line in comment.splitlines())
    Path(path).write_bytes(head + b"%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes())


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Load an image as ``H x W x 3`` uint8.  PPM natively, anything else via Pillow."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"image not found: {path}")
    if path.suffix.lower() in (".ppm", ".pnm"):
        return read_ppm(path)
    try:
        from PIL import Image
    except ImportError:  # pragma: no cover
        raise DataError(f"{path}: reading {path.suffix} files requires Pillow") from None
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_image(path: str | os.PathLike, image: np.ndarray, comment: str | None = None) -> None:
    """Write ``H x W x 3`` uint8 as PPM (``.ppm``) or via Pillow (e.g. PNG).

    ``comment`` goes into PPM header comments or a PNG text chunk.
    """
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        write_ppm(path, image, comment)
        return
    try:
        from PIL import Image, PngImagePlugin
    except ImportError:  # pragma: no cover
        raise DataError(f"{path}: writing {path.suffix} files requires Pillow") from None
    kw = {}
    if comment and path.suffix.lower() == ".png":
        info = PngImagePlugin.PngInfo()
        info.add_text("Comment", comment)
        kw["pnginfo"] = info
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, **kw)


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    """Quantise [0, 1] floats as ``round(255 * v)``."""
    return np.clip(np.round(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------
# preprocessing


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Separable bilinear resize of ``H x W x C`` (half-pixel centres)."""
    h, w = image.shape[:2]
    if (h, w) == (height, width):
        return image.astype(np.float64)
    Rh = interp_matrix(h, height)
    Rw = interp_matrix(w, width)
    return np.einsum("ih,hwc,jw->ijc", Rh, image.astype(np.float64), Rw)


def preprocess(
    image: np.ndarray,
    resolution: int = 64,
    mean: Sequence[float] = DEFAULT_MEAN,
    std: Sequence[float] = DEFAULT_STD,
) -> Tensor:
    """``H x W x 3`` bytes -> standardised ``3 x r x r`` float tensor."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"expected an H x W x 3 image, got shape {list(img.shape)}")
    x = resize_bilinear(img, resolution, resolution) / 255.0
    x = (x - np.asarray(mean)) / np.asarray(std)
    return Tensor(x.transpose(2, 0, 1).astype(FLOAT))


def load_arrays(
    manifest: DatasetManifest, split_name: str | None, resolution: int, **norm
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Preprocess every image of a split into ``(N x 3 x r x r, labels, ids)``."""
    recs = [r for r in manifest.records if split_name is None or r.split == split_name]
    X = np.empty((len(recs), 3, resolution, resolution), dtype=FLOAT)
    for i, r in enumerate(recs):
        X[i] = preprocess(read_image(manifest.path(r)), resolution, **norm).data
    y = np.array([int(r.label) for r in recs], dtype=np.int64)
    return X, y, [r.image for r in recs]


# --------------------------------------------------------------------------
# synthetic fundus images


def grade(fraction: float, structures_intact: bool) -> QualityLabel:
    """Quality label from the degraded fundus-area fraction and structure visibility."""
    if not structures_intact or fraction > USABLE_MAX_FRACTION:
        return QualityLabel.UNUSABLE
    if fraction > 0:
        return QualityLabel.USABLE
    return QualityLabel.GOOD


@dataclass(frozen=True)
class SyntheticConfig:
    resolution: int = 64
    counts: tuple[tuple[QualityLabel, str, int], ...] = tuple(
        (lab, sp, n) for sp, n in (("train", 300), ("test", 100)) for lab in QualityLabel
    )
    degradations: tuple[str, ...] = DEGRADATIONS
    seed: int = 0
    usable_range: tuple[float, float] = (0.05, 0.16)
    unusable_range: tuple[float, float] = (0.32, 0.60)
    missing_structure_rate: float = 0.3

    def __post_init__(self):
        if self.resolution < 32:
            raise DataError("synthetic resolution must be >= 32")
        for lab, sp, n in self.counts:
            if n < 0:
                raise DataError("synthetic counts must be >= 0")
            if sp not in SPLITS:
                raise DataError(f"unknown split {sp!r}")
        for k in self.degradations:
            if k not in DEGRADATIONS:
                raise DataError(f"unknown degradation {k!r} (expected one of {DEGRADATIONS})")
        if not self.degradations:
            raise DataError("at least one degradation kind must be enabled")
        lo, hi = self.usable_range
        if not 0 < lo <= hi <= USABLE_MAX_FRACTION:
            raise DataError("usable_range must lie within (0, 0.20]")
        lo, hi = self.unusable_range
        if not USABLE_MAX_FRACTION < lo <= hi <= 1:
            raise DataError("unusable_range must lie within (0.20, 1]")

    @classmethod
    def balanced(cls, train_per_class: int, test_per_class: int, **kw) -> "SyntheticConfig":
        counts = tuple((lab, sp, n) for sp, n in (("train", train_per_class), ("test", test_per_class)) for lab in QualityLabel)
        return cls(counts=counts, **kw)


@dataclass
class FundusSample:
    image: np.ndarray  # H x W x 3 uint8
    mask: np.ndarray  # degraded pixels
    field: np.ndarray  # circular fundus region
    fraction: float  # requested degraded fraction, structure patches included
    od_visible: bool
    macula_visible: bool
    kinds: tuple[str, ...]

    @property
    def measured_fraction(self) -> float:
        return float(self.mask[self.field].mean())

    @property
    def label(self) -> QualityLabel:
        return grade(self.fraction, self.od_visible and self.macula_visible)


def _disc(yy, xx, cy, cx, r, soft):
    d = np.hypot(yy - cy, xx - cx)
    return np.clip((r - d) / soft + 0.5, 0.0, 1.0)


def _segment_alpha(yy, xx, p0, p1, width):
    d = np.asarray(p1) - np.asarray(p0)
    L2 = max(float(d @ d), 1e-12)
    t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / L2, 0, 1)
    dist = np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))
    return np.clip(width / 2 - dist + 0.5, 0.0, 1.0)


def _vessels(rng, yy, xx, od, r0, scale):
    """Alpha map of branching vessel polylines leaving the optic disc."""
    alpha = np.zeros_like(yy)
    side = 1.0 if od[1] < xx.mean() else -1.0
    stack = []
    for vert in (-1.0, 1.0):
        for _ in range(2):
            ang = math.atan2(vert, side * rng.uniform(0.4, 1.6))
            stack.append((np.array(od, dtype=float), ang, 1.6 * scale, 0))
    while stack:
        p, ang, width, depth = stack.pop()
        for _ in range(int(rng.integers(5, 9))):
            step = r0 * rng.uniform(0.08, 0.13)
            ang += rng.normal(0, 0.18)
            q = p + step * np.array([math.sin(ang), math.cos(ang)])
            alpha = np.maximum(alpha, _segment_alpha(yy, xx, p, q, width))
            p = q
            if depth < 2 and rng.random() < 0.22:
                stack.append((p.copy(), ang + rng.choice([-1, 1]) * rng.uniform(0.4, 0.9), width * 0.75, depth + 1))
    return alpha


def degradation_mask(
    rng, field: np.ndarray, fraction: float, resolution: int, protect: np.ndarray | None = None
) -> np.ndarray:
    """Contiguous-ish blob covering exactly ``round(fraction * |field|)`` field pixels.

    Pixels in ``protect`` are never chosen (the fraction is still relative to
    the whole field).
    """
    mask = np.zeros_like(field)
    n_field = int(field.sum())
    n = int(round(fraction * n_field))
    if n == 0:
        return mask
    allowed = field if protect is None else field & ~protect
    if n > allowed.sum():
        raise DataError(f"cannot place a {fraction:.2f} degradation outside protected structures")
    idx = np.flatnonzero(allowed)
    ys, xs = np.divmod(idx, field.shape[1])
    a = idx[rng.integers(len(idx))]
    ay, ax = divmod(a, field.shape[1])
    noise = ndimage.gaussian_filter(rng.normal(size=field.shape), sigma=resolution / 10)
    noise /= noise.std() + 1e-12
    score = np.hypot(ys - ay, xs - ax) - 0.08 * resolution * noise.reshape(-1)[idx]
    chosen = idx[np.argsort(score, kind="stable")[:n]]
    mask.reshape(-1)[chosen] = True
    return mask


def _apply(kind, rng, img, mask, yy, xx, resolution):
    m = mask[..., None]
    if kind == "blur":
        blurred = ndimage.gaussian_filter(img, sigma=(2.0 * resolution / 64, 2.0 * resolution / 64, 0))
        haze = np.array([0.80, 0.72, 0.62])
        out = 0.6 * blurred + 0.4 * haze
    elif kind == "illumination":
        ang = rng.uniform(0, 2 * math.pi)
        ramp = (np.cos(ang) * xx + np.sin(ang) * yy) / resolution
        ramp = (ramp - ramp.min()) / (np.ptp(ramp) + 1e-12)
        if rng.random() < 0.5:
            out = img * (0.15 + 0.25 * ramp)[..., None]
        else:
            out = np.clip(img + (0.45 + 0.3 * ramp)[..., None] * np.array([1.0, 0.95, 0.85]), 0, 1)
    elif kind == "occlusion":
        shade = rng.uniform(0.03, 0.10)
        out = np.full_like(img, shade) + rng.normal(0, 0.01, img.shape)
    else:  # low_contrast
        mu = img[mask].mean(axis=0) if mask.any() else img.mean(axis=(0, 1))
        out = 0.15 * (img - mu) + 0.5 * mu + 0.5 * np.array([0.62, 0.58, 0.55])
    return np.where(m, out, img)


def render_fundus(
    rng: np.random.Generator,
    resolution: int,
    fraction: float,
    od_visible: bool = True,
    macula_visible: bool = True,
    kinds: Sequence[str] = ("occlusion",),
) -> FundusSample:
    """Render one synthetic fundus photograph.

    ``fraction`` is the degraded area beyond any patch that occludes a
    non-visible structure; the sample's ``fraction`` is the total.
    """
    R = resolution
    yy, xx = np.mgrid[0:R, 0:R].astype(np.float64) + 0.5
    cy, cx = R / 2 + rng.normal(0, 0.01 * R, 2)
    r0 = 0.45 * R * rng.uniform(0.96, 1.03)
    dist = np.hypot(yy - cy, xx - cx)
    field = dist <= r0
    scale = R / 64

    base = np.array([0.78, 0.36, 0.17]) * rng.uniform(0.85, 1.1) + rng.normal(0, 0.03, 3)
    vignette = 1.0 - 0.35 * (dist / r0) ** 2
    texture = ndimage.gaussian_filter(rng.normal(size=(R, R)), sigma=1.5 * scale)
    texture *= 0.04 / (texture.std() + 1e-12)
    img = base[None, None, :] * vignette[..., None] + texture[..., None]

    side = rng.choice([-1.0, 1.0])
    od = (cy + rng.normal(0, 0.06 * r0), cx + side * r0 * rng.uniform(0.42, 0.55))
    mac = (cy + rng.normal(0, 0.05 * r0), cx - side * r0 * rng.uniform(0.05, 0.18))

    spot = np.exp(-((yy - mac[0]) ** 2 + (xx - mac[1]) ** 2) / (2 * (0.11 * r0) ** 2))
    img = img * (1.0 - 0.6 * spot)[..., None]
    va = _vessels(rng, yy, xx, od, r0, scale)
    img = img * (1 - 0.75 * va[..., None]) + 0.75 * va[..., None] * np.array([0.42, 0.07, 0.05])
    disc = _disc(yy, xx, od[0], od[1], 0.17 * r0, 1.2 * scale)
    img = img * (1 - disc[..., None]) + disc[..., None] * np.array([1.0, 0.93, 0.68])

    # a structure that is not visible is hidden under an occluding patch whose
    # area counts towards the degraded fraction
    cover = np.zeros_like(field)
    if not od_visible:
        cover |= np.hypot(yy - od[0], xx - od[1]) <= 0.26 * r0
    if not macula_visible:
        cover |= np.hypot(yy - mac[0], xx - mac[1]) <= 0.24 * r0
    cover &= field

    protect = cover
    if od_visible and macula_visible and fraction <= USABLE_MAX_FRACTION:
        # keep landmarks visible so the grade stays Usable
        protect = (np.hypot(yy - od[0], xx - od[1]) <= 0.3 * r0) | (np.hypot(yy - mac[0], xx - mac[1]) <= 0.25 * r0)
    extra = degradation_mask(rng, field, fraction, R, protect)
    img = np.clip(img, 0, 1)
    for kind in kinds if extra.any() else ():
        img = _apply(kind, rng, img, extra, yy, xx, R)
    if cover.any():
        img = _apply("occlusion", rng, img, cover, yy, xx, R)
        kinds = tuple(dict.fromkeys((*kinds, "occlusion")))
    mask = extra | cover
    total = fraction + cover.sum() / field.sum()

    img = img + rng.normal(0, 0.012, img.shape)
    img = np.where(field[..., None], np.clip(img, 0, 1), 0.02)
    return FundusSample(to_uint8(img), mask, field, float(total), od_visible, macula_visible, tuple(kinds))


def _draw_case(rng: np.random.Generator, label: QualityLabel, cfg: SyntheticConfig) -> dict:
    od = mac = True
    if label == QualityLabel.GOOD:
        f = 0.0
    elif label == QualityLabel.USABLE:
        f = rng.uniform(*cfg.usable_range)
    elif rng.random() < cfg.missing_structure_rate:
        if rng.random() < 2 / 3:
            od = False
        else:
            mac = False
        f = 0.0 if rng.random() < 0.5 else rng.uniform(*cfg.usable_range)
    else:
        f = rng.uniform(*cfg.unusable_range)
    n_kinds = 1 if len(cfg.degradations) == 1 or rng.random() < 0.7 else 2
    kinds = tuple(str(k) for k in rng.choice(cfg.degradations, size=n_kinds, replace=False)) if f > 0 else ()
    return dict(fraction=f, od_visible=od, macula_visible=mac, kinds=kinds)


def sample_synthetic(cfg: SyntheticConfig, index: int, label: QualityLabel) -> FundusSample:
    rng = np.random.default_rng([cfg.seed, index])
    case = _draw_case(rng, label, cfg)
    sample = render_fundus(rng, cfg.resolution, **case)
    if sample.label != label:  # pragma: no cover - guarded by the sampling ranges
        raise AssertionError(f"sampled case {case} grades as {sample.label}, wanted {label}")
    return sample


def synthesize(cfg: SyntheticConfig, out_dir: str | os.PathLike) -> DatasetManifest:
    """Write PPM images, ``manifest.csv`` and ``synth_meta.csv`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    meta = io.StringIO()
    w = csv.writer(meta, lineterminator="\n")
    w.writerow(["image", "quality", "split", "fraction", "measured_fraction", "od_visible", "macula_visible", "degradations"])
    index = 0
    for label, split_name, n in cfg.counts:
        for _ in range(n):
            s = sample_synthetic(cfg, index, QualityLabel(label))
            name = f"images/{split_name}_{index:05d}.ppm"
            write_ppm(out / name, s.image)
            records.append(ManifestRecord(name, s.label, split_name))
            w.writerow(
                [name, int(s.label), split_name, f"{s.fraction:.6f}", f"{s.measured_fraction:.6f}",
                 int(s.od_visible), int(s.macula_visible), "+".join(s.kinds)]
            )
            index += 1
    manifest = DatasetManifest(records, out)
    write_manifest(manifest, out / "manifest.csv")
    (out / "synth_meta.csv").write_text(meta.getvalue(), encoding="utf-8")
    return manifest
