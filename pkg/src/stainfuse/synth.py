"""Synthetic three-site slide cohorts for exercising the full pipeline.

Slides are rendered from a small generative model: low-frequency tissue
texture in a stain-appropriate palette, a lesion built as a union of star
polygons (which double as the annotation), nuclei-proxy dots, and for MelanA
a red-chromogen field covering a controllable fraction of the lesion.

Class signal is carried by a per-slide latent in [0, 1] whose class centers
are ``0.5 +/- 0.35 * effect_size``; with the complementary switch on, H&E and
MelanA draw independent latents, so each stain sees only part of the signal
and fusing them recovers it.  Site profiles perturb hue/saturation/brightness
and chromogen intensity, realizing the inter-site domain shift.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from shapely.geometry import Polygon, box
from shapely.ops import unary_union

from .rng import derive_seed, substream
from .tess import AnnotationMask, SlideImage, Stain, rasterize_polygons, save_annotation

LABEL_MELANOMA = "melanoma"
LABEL_IN_SITU = "in_situ"
LABEL_NEVUS = "nevus"


@dataclass(frozen=True)
class ColorShift:
    """Whole-image HSV perturbation: hue in degrees, multiplicative sat/brightness."""

    hue_deg: float = 0.0
    sat_scale: float = 1.0
    brightness_scale: float = 1.0

    def __post_init__(self):
        if not -180.0 <= self.hue_deg <= 180.0:
            raise ValueError("hue shift must be in [-180, 180] degrees")
        if self.sat_scale <= 0 or self.brightness_scale <= 0:
            raise ValueError("scales must be positive")

    @property
    def is_identity(self) -> bool:
        return self.hue_deg == 0.0 and self.sat_scale == 1.0 and self.brightness_scale == 1.0

    def apply(self, rgb: np.ndarray) -> np.ndarray:
        """Apply to an (H, W, 3) uint8 image; returns uint8.

        Uses OpenCV's 8-bit HSV space (hue steps of 2 degrees) with lookup
        tables for the multiplicative channels, which keeps whole-slide
        recoloring cheap.
        """
        if self.is_identity:
            return rgb
        hsv = cv2.cvtColor(rgb, cv2.COLOR_RGB2HSV)
        steps = int(round(self.hue_deg / 2.0))
        hsv[..., 0] = ((hsv[..., 0].astype(np.int16) + steps) % 180).astype(np.uint8)
        lut_s = np.clip(np.round(np.arange(256) * self.sat_scale), 0, 255).astype(np.uint8)
        lut_v = np.clip(np.round(np.arange(256) * self.brightness_scale), 0, 255).astype(np.uint8)
        hsv[..., 1] = cv2.LUT(hsv[..., 1], lut_s)
        hsv[..., 2] = cv2.LUT(hsv[..., 2], lut_v)
        return cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)


@dataclass(frozen=True)
class SiteProfile:
    site_id: str
    he_shift: ColorShift = ColorShift()
    melana_shift: ColorShift = ColorShift()
    melana_intensity: float = 1.0  # chromogen strength, mimics antibody dilution spread

    def __post_init__(self):
        if self.melana_intensity <= 0:
            raise ValueError("melana_intensity must be positive")

    def shift_for(self, stain: Stain) -> ColorShift:
        return self.he_shift if stain is Stain.HE else self.melana_shift


def default_site_profiles() -> list:
    return [
        SiteProfile("site_a"),
        SiteProfile(
            "site_b",
            he_shift=ColorShift(hue_deg=20.0, sat_scale=0.6, brightness_scale=1.18),
            melana_shift=ColorShift(hue_deg=8.0, sat_scale=0.85, brightness_scale=1.04),
            melana_intensity=0.75,
        ),
        SiteProfile(
            "site_c",
            he_shift=ColorShift(hue_deg=-16.0, sat_scale=1.35, brightness_scale=0.82),
            melana_shift=ColorShift(hue_deg=-10.0, sat_scale=1.2, brightness_scale=0.96),
            melana_intensity=1.3,
        ),
    ]


@dataclass(frozen=True)
class SynthConfig:
    n_per_class: int = 20
    image_px: int = 1896
    um_per_px: float = 0.25
    effect_size: float = 0.8
    complementary: bool = True
    latent_sigma: float = 0.22
    stain_variability: float = 1.0  # per-slide staining-depth nuisance scale
    in_situ_fraction: float = 0.15
    blob_count: tuple = (3, 6)
    train_fraction: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.image_px < 474:
            raise ValueError("image_px must be >= 474 (two tiles per axis at base resolution)")
        if not 0.0 <= self.effect_size <= 1.0:
            raise ValueError("effect_size must be in [0, 1]")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")


@dataclass
class ManifestEntry:
    slide_id: str
    site: str
    label: str
    split: str  # train | holdout | test
    stains: dict  # stain name -> image path
    annotation: str


@dataclass
class CohortManifest:
    cohort_id: str
    entries: list

    def slide_ids(self) -> list:
        return [e.slide_id for e in self.entries]


# ---------------------------------------------------------------------------
# Rendering helpers

_HE_BG_LIGHT = np.array([243.0, 207.0, 219.0], dtype=np.float32)
_HE_BG_DEEP = np.array([226.0, 172.0, 196.0], dtype=np.float32)
_HE_LESION = np.array([182.0, 138.0, 182.0], dtype=np.float32)
_HE_LESION_DEEP = np.array([136.0, 90.0, 188.0], dtype=np.float32)
_HE_DOT_LIGHT = np.array([118.0, 88.0, 148.0], dtype=np.float32)
_HE_DOT_DARK = np.array([52.0, 24.0, 82.0], dtype=np.float32)
_MEL_BG_LIGHT = np.array([230.0, 227.0, 240.0], dtype=np.float32)
_MEL_BG_DEEP = np.array([206.0, 206.0, 226.0], dtype=np.float32)
_MEL_LESION = np.array([196.0, 186.0, 214.0], dtype=np.float32)
_MEL_CHROMOGEN = np.array([178.0, 45.0, 40.0], dtype=np.float32)
_MEL_CHROMOGEN_DEEP = np.array([118.0, 22.0, 18.0], dtype=np.float32)
_MEL_NUCLEI = np.array([96.0, 104.0, 158.0], dtype=np.float32)


def _low_freq_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Smooth noise field in [0, 1]: a coarse uniform grid, bilinearly upsampled."""
    coarse = rng.uniform(0.0, 1.0, size=(cells + 1, cells + 1)).astype(np.float32)
    pos = np.linspace(0.0, cells, size, dtype=np.float32)
    i0 = np.minimum(pos.astype(np.int64), cells - 1)
    frac = pos - i0
    # interpolate along x on the coarse grid first, then along y at full size
    cols = coarse[:, i0] * (1 - frac)[None, :] + coarse[:, i0 + 1] * frac[None, :]
    return cols[i0] * (1 - frac)[:, None] + cols[i0 + 1] * frac[:, None]


def _star_polygon(rng: np.random.Generator, cx: float, cy: float, radius: float, amp: float, n_vertices: int = 24):
    angles = np.linspace(0.0, 2.0 * np.pi, n_vertices, endpoint=False)
    wobble = rng.normal(0.0, 1.0, n_vertices)
    kernel = np.array([0.25, 0.5, 0.25])
    for _ in range(2):  # circular smoothing keeps the outline organic, not spiky
        wobble = sum(np.roll(wobble, k - 1) * kernel[k] for k in range(3))
    wobble = wobble / (np.max(np.abs(wobble)) + 1e-9)
    radii = radius * (1.0 + amp * wobble)
    xs = cx + radii * np.cos(angles)
    ys = cy + radii * np.sin(angles)
    return Polygon(np.stack([xs, ys], axis=1))


def _lesion_polygons(rng: np.random.Generator, size: int, config: SynthConfig, spread: float = 0.5) -> list:
    """Lesion outline as non-overlapping rings: the union of random blobs.

    Retries with fresh draws until the lesion covers enough of the slide that
    even the single whole-image tile at the coarsest magnification clears the
    50% mask-coverage rule.
    """
    frame = box(0.0, 0.0, float(size), float(size))
    for _ in range(16):
        blobs = []
        # one dominant blob keeps every magnification's tile grid populated
        cx = size * rng.uniform(0.47, 0.53)
        cy = size * rng.uniform(0.47, 0.53)
        blobs.append(_star_polygon(rng, cx, cy, size * rng.uniform(0.46, 0.52), amp=0.12))
        lo, hi = config.blob_count
        for _ in range(int(rng.integers(lo, hi + 1)) - 1):
            bx = size * rng.uniform(0.2, 0.8)
            by = size * rng.uniform(0.2, 0.8)
            # higher spread (melanoma) widens the satellite-blob size range
            blobs.append(_star_polygon(rng, bx, by, size * rng.uniform(0.08, 0.14 + 0.08 * spread), amp=0.18))
        union = unary_union(blobs).intersection(frame)
        if union.area / (size * size) >= 0.54:
            break
    rings = []
    geoms = union.geoms if hasattr(union, "geoms") else [union]
    for geom in geoms:
        rings.append([[float(x), float(y)] for x, y in geom.exterior.coords[:-1]])
        for interior in geom.interiors:
            rings.append([[float(x), float(y)] for x, y in interior.coords[:-1]])
    return rings


def _upsample(arr: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor upsample along the two leading axes."""
    if factor == 1:
        return arr.copy()
    return np.repeat(np.repeat(arr, factor, axis=0), factor, axis=1)


def _stamp_background_dots(img, lesion, rng, density_per_1000: float, color) -> None:
    """Sparse dots outside the lesion, placed by rejection sampling."""
    h, w = img.shape[:2]
    n_bg = int((h * w - int(lesion.sum())) * density_per_1000 / 1000.0)
    if n_bg <= 0:
        return
    m = int(n_bg * 1.8) + 8
    cand_y = rng.integers(0, h, size=m)
    cand_x = rng.integers(0, w, size=m)
    keep = ~lesion[cand_y, cand_x]
    cy, cx = cand_y[keep][:n_bg], cand_x[keep][:n_bg]
    if cy.size:
        _stamp_dots(img, (cy, cx), rng, cy.size, (2, 2), color)


def _stamp_dots(img: np.ndarray, mask_idx: tuple, rng: np.random.Generator, n_dots: int, radius_range, color) -> None:
    """Paint filled disks at random lesion positions, vectorized per radius."""
    ys, xs = mask_idx
    if n_dots <= 0 or ys.size == 0:
        return
    pick = rng.integers(0, ys.size, size=n_dots)
    radii = rng.integers(radius_range[0], radius_range[1] + 1, size=n_dots)
    h, w = img.shape[:2]
    for r in np.unique(radii):
        sel = radii == r
        cy, cx = ys[pick[sel]], xs[pick[sel]]
        dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
        disk = dy * dy + dx * dx <= r * r
        oy, ox = dy[disk], dx[disk]
        yy = np.clip(cy[:, None] + oy[None, :], 0, h - 1).ravel()
        xx = np.clip(cx[:, None] + ox[None, :], 0, w - 1).ravel()
        img[yy, xx] = color


def _lerp(a, b, t):
    # a + t*(b - a): two passes instead of four
    a = np.asarray(a, dtype=np.float32)
    delta = np.asarray(b, dtype=np.float32) - a
    return a + np.asarray(t, dtype=np.float32)[..., None] * delta


def _class_latent(rng: np.random.Generator, label: str, config: SynthConfig) -> float:
    half_gap = 0.35 * config.effect_size
    if label == LABEL_MELANOMA:
        center = 0.5 + half_gap
    elif label == LABEL_IN_SITU:
        center = 0.5 + 0.5 * half_gap  # early lesions carry a weaker signal
    else:
        center = 0.5 - half_gap
    return float(np.clip(rng.normal(center, config.latent_sigma), 0.02, 0.98))


def generate_slide(
    label: str,
    site: SiteProfile,
    stain: Stain,
    config: SynthConfig,
    seed: int,
    slide_id: str = "synthetic",
) -> tuple:
    """Render one synthetic slide; returns (SlideImage, AnnotationMask).

    Geometry and the per-stain class latents depend only on the slide seed,
    so both stains of a slide share one lesion annotation.  Deterministic
    given (label, site, stain, config, seed).
    """
    if label not in (LABEL_MELANOMA, LABEL_IN_SITU, LABEL_NEVUS):
        raise ValueError(f"unknown label {label!r}")
    size = config.image_px
    u_geo = _class_latent(substream(seed, "geom-latent"), label, config)
    polygons = _lesion_polygons(substream(seed, "geom"), size, config, spread=u_geo)

    latent_rng = substream(seed, "latent")
    u_he = _class_latent(latent_rng, label, config)
    u_mel = _class_latent(latent_rng, label, config) if config.complementary else u_he
    u = u_he if stain is Stain.HE else u_mel

    lesion = rasterize_polygons(polygons, size, size)
    lesion_idx = np.nonzero(lesion)

    rng = substream(seed, "render", stain.value)
    # smooth fields render at half resolution; nearest upsample is invisible
    # in the color statistics and halves the generation cost
    up = 2 if size % 2 == 0 else 1
    rs = size // up
    base_field = _low_freq_noise(rng, rs, 28)
    detail_field = _low_freq_noise(rng, rs, 60)
    texture = rng.standard_normal((rs, rs), dtype=np.float32) * np.float32(2.5)

    if stain is Stain.HE:
        small = _lerp(_HE_BG_LIGHT, _HE_BG_DEEP, base_field)
        small += texture[..., None]
        img = _upsample(small, up)
        # hematoxylin dominance scales with the class latent: the wash gets
        # deeper and bluer, putting part of the signal into hue/saturation
        lesion_color = _HE_LESION * (1.0 - np.float32(u)) + _HE_LESION_DEEP * np.float32(u)
        alpha = _upsample(np.float32(0.30) + np.float32(0.25) * detail_field, up) * lesion
        img += alpha[..., None] * (lesion_color - img)
        # nuclei proxies: melanoma lesions are denser and darker
        density = 2.5 + 3.0 * u  # dots per 1000 lesion px
        n_dots = int(lesion_idx[0].size * density / 1000.0)
        dot_color = _HE_DOT_LIGHT * (1.0 - u) + _HE_DOT_DARK * u
        _stamp_dots(img, lesion_idx, rng, n_dots, (2, 3), dot_color)
        _stamp_background_dots(img, lesion, rng, density_per_1000=0.8, color=_HE_DOT_LIGHT)
    else:
        small = _lerp(_MEL_BG_LIGHT, _MEL_BG_DEEP, base_field)
        small += texture[..., None]
        img = _upsample(small, up)
        alpha = _upsample(np.float32(0.18) + np.float32(0.14) * base_field, up) * lesion
        img += alpha[..., None] * (_MEL_LESION - img)
        # chromogen-positive fraction of the lesion is the class signal
        frac = 0.08 + 0.52 * u
        inside = _upsample(detail_field, up)[lesion_idx]
        if inside.size:
            cut = np.quantile(inside, 1.0 - frac)
            pos_sel = inside >= cut
            pos_idx = (lesion_idx[0][pos_sel], lesion_idx[1][pos_sel])
            strength = np.float32(np.clip(0.62 * site.melana_intensity, 0.15, 0.95))
            deep = np.float32(np.clip(site.melana_intensity - 1.0, 0.0, 1.0))
            chromogen = _MEL_CHROMOGEN * (1.0 - deep) + _MEL_CHROMOGEN_DEEP * deep
            img[pos_idx] = img[pos_idx] * (1.0 - strength) + chromogen * strength
        n_dots = int(lesion_idx[0].size * 1.2 / 1000.0)
        _stamp_dots(img, lesion_idx, rng, n_dots, (2, 2), _MEL_NUCLEI)

    pixels = np.floor(np.clip(img, 0.0, 255.0, out=img) + 0.5).astype(np.uint8)
    # per-slide staining-depth nuisance composed with the site transform, one pass
    var_rng = substream(seed, "stainvar", stain.value)
    v = config.stain_variability
    site_shift = site.shift_for(stain)
    combined = ColorShift(
        hue_deg=site_shift.hue_deg + v * var_rng.uniform(-4.0, 4.0),
        sat_scale=site_shift.sat_scale * (1.0 + v * var_rng.uniform(-0.08, 0.08)),
        brightness_scale=site_shift.brightness_scale * (1.0 + v * var_rng.uniform(-0.06, 0.06)),
    )
    pixels = combined.apply(pixels)
    return (
        SlideImage(slide_id=slide_id, stain=stain, pixels=pixels, um_per_px=config.um_per_px),
        AnnotationMask(slide_id=slide_id, polygons=polygons),
    )


# ---------------------------------------------------------------------------
# Cohort assembly


def _slide_plan(site_id: str, config: SynthConfig) -> list:
    """Deterministic (slide_id, label) list for one site."""
    n = config.n_per_class
    n_insitu = int(round(config.in_situ_fraction * n))
    labels = [LABEL_MELANOMA] * (n - n_insitu) + [LABEL_IN_SITU] * n_insitu + [LABEL_NEVUS] * n
    return [(f"{site_id}_s{i:03d}", label) for i, label in enumerate(labels)]


def _assign_splits(plan: list, config: SynthConfig, site_id: str, is_train_site: bool) -> dict:
    if not is_train_site:
        return {sid: "test" for sid, _ in plan}
    rng = substream(config.seed, "split", site_id)
    splits = {}
    by_label = {}
    for sid, label in plan:
        by_label.setdefault(label, []).append(sid)
    for label, sids in sorted(by_label.items()):
        order = rng.permutation(len(sids))
        n_train = int(round(config.train_fraction * len(sids)))
        for rank, idx in enumerate(order):
            splits[sids[idx]] = "train" if rank < n_train else "holdout"
    return splits


def _generate_one(args):
    slide_id, label, site, config, out_dir = args
    seed = derive_seed(config.seed, "slide", slide_id)
    paths = {}
    annotation = None
    for stain in (Stain.HE, Stain.MELANA):
        image, mask = generate_slide(label, site, stain, config, seed, slide_id=slide_id)
        annotation = mask
        path = out_dir / f"{slide_id}_{stain.value}.png"
        cv2.imwrite(str(path), image.pixels[:, :, ::-1], [cv2.IMWRITE_PNG_COMPRESSION, 1])
        paths[stain.value] = str(path)
    ann_path = out_dir / f"{slide_id}_annotation.json"
    save_annotation(annotation, ann_path)
    return slide_id, paths, str(ann_path)


def generate_cohorts(config: SynthConfig, out_root, sites=None, workers: int = 1) -> list:
    """Generate all three site cohorts and write manifests.

    The first site is the training site and carries the train/holdout split;
    the other sites are full out-of-distribution test cohorts.  Returns the
    three CohortManifests (also written as JSON next to the images).
    """
    sites = list(sites) if sites is not None else default_site_profiles()
    out_root = Path(out_root)
    manifests = []
    for site_index, site in enumerate(sites):
        site_dir = out_root / site.site_id
        site_dir.mkdir(parents=True, exist_ok=True)
        plan = _slide_plan(site.site_id, config)
        splits = _assign_splits(plan, config, site.site_id, is_train_site=site_index == 0)
        jobs = [(sid, label, site, config, site_dir) for sid, label in plan]
        if workers > 1 and len(jobs) > 1:
            # rendering is CPU-bound numpy work; processes sidestep the GIL
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = {r[0]: r for r in pool.map(_generate_one, jobs, chunksize=2)}
        else:
            results = {r[0]: r for r in map(_generate_one, jobs)}
        entries = []
        for sid, label in plan:
            _, paths, ann_path = results[sid]
            entries.append(
                ManifestEntry(
                    slide_id=sid,
                    site=site.site_id,
                    label=label,
                    split=splits[sid],
                    stains=paths,
                    annotation=ann_path,
                )
            )
        manifest = CohortManifest(cohort_id=site.site_id, entries=entries)
        save_manifest(manifest, out_root / f"manifest_{site.site_id}.json")
        manifests.append(manifest)
    return manifests


# ---------------------------------------------------------------------------
# File interface


def save_manifest(manifest: CohortManifest, path) -> None:
    payload = {
        "cohort_id": manifest.cohort_id,
        "entries": [
            {
                "slide_id": e.slide_id,
                "site": e.site,
                "label": e.label,
                "split": e.split,
                "stains": e.stains,
                "annotation": e.annotation,
            }
            for e in manifest.entries
        ],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def load_manifest(path) -> CohortManifest:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    entries = [
        ManifestEntry(
            slide_id=e["slide_id"],
            site=e["site"],
            label=e["label"],
            split=e.get("split", "test"),
            stains=e["stains"],
            annotation=e["annotation"],
        )
        for e in data["entries"]
    ]
    return CohortManifest(cohort_id=data["cohort_id"], entries=entries)
