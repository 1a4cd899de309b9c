"""Dataset layout IO and the deterministic synthetic scene generator.

Layout: ``<root>/<split>/{images,semantics,plant_instances,leaf_instances
[,visibility]}/<name>.{png,csv}``. Images are 8-bit RGB PNG, semantics 8-bit
grayscale (0 soil, 1 crop, 2 weed, 3 partial crop, 4 partial weed), instance
maps 16-bit grayscale, and visibility sidecars CSV rows ``plant_id,fraction``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

log = logging.getLogger(__name__)

MAP_DIRS = ("semantics", "plant_instances", "leaf_instances")
MAX_INSTANCE_ID = 65535


@dataclass
class HierarchicalSample:
    """One image with its three annotation levels."""

    name: str
    image: np.ndarray | None          # (H, W, 3) uint8, may be absent for predictions
    semantics: np.ndarray             # (H, W) uint8
    plant_instances: np.ndarray       # (H, W) int32, 0 = none
    leaf_instances: np.ndarray        # (H, W) int32, 0 = none
    visibility: dict[int, float] | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.semantics.shape


def _read_png(path: Path) -> np.ndarray:
    if not path.exists():
        raise DataError(f"missing file: {path}")
    with Image.open(path) as im:
        return np.array(im)


def _write_png(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def _read_visibility(path: Path) -> dict[int, float] | None:
    if not path.exists():
        return None
    out: dict[int, float] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("plant_id"):
            continue
        pid, _, frac = line.partition(",")
        out[int(pid)] = float(frac)
    return out


def validate_sample(sample: HierarchicalSample, strict: bool) -> None:
    """Check the cross-map invariants; report the first offending pixel."""
    sem = sample.semantics
    problems = []
    bad_leaf = (sample.leaf_instances > 0) & ~np.isin(sem, (1, 3))
    if bad_leaf.any():
        y, x = np.argwhere(bad_leaf)[0]
        problems.append(f"leaf instance on non-crop pixel ({y}, {x}), semantic={sem[y, x]}")
    plant_areas = np.isin(sem, (1, 2, 3, 4))
    mismatch = (sample.plant_instances > 0) != plant_areas
    if mismatch.any():
        y, x = np.argwhere(mismatch)[0]
        problems.append(
            f"plant instance/semantic mismatch at ({y}, {x}): "
            f"id={sample.plant_instances[y, x]}, semantic={sem[y, x]}")
    for msg in problems:
        if strict:
            raise DataError(f"{sample.name}: {msg}")
        log.warning("%s: %s", sample.name, msg)


def load_maps(split_dir, name: str, require_image: bool = True,
              strict: bool = False, validate: bool = True) -> HierarchicalSample:
    """Load one sample from a split directory.

    Predictions are loaded with ``require_image=False, validate=False``: they
    carry only the three maps and need not satisfy ground-truth invariants.
    """
    split_dir = Path(split_dir)
    sem = _read_png(split_dir / "semantics" / f"{name}.png").astype(np.uint8)
    plants = _read_png(split_dir / "plant_instances" / f"{name}.png").astype(np.int32)
    leaves = _read_png(split_dir / "leaf_instances" / f"{name}.png").astype(np.int32)
    image = None
    if require_image:
        image = _read_png(split_dir / "images" / f"{name}.png")
        if image.ndim != 3 or image.shape[2] != 3:
            raise DataError(f"{name}: image is not RGB")
    shapes = {sem.shape, plants.shape, leaves.shape} | ({image.shape[:2]} if image is not None else set())
    if len(shapes) != 1:
        raise DataError(f"{name}: map dimensions disagree: {sorted(shapes)}")
    sample = HierarchicalSample(
        name=name, image=image, semantics=sem,
        plant_instances=plants, leaf_instances=leaves,
        visibility=_read_visibility(split_dir / "visibility" / f"{name}.csv"),
    )
    if validate:
        validate_sample(sample, strict=strict)
    return sample


def load_sample(root, split: str, name: str, strict: bool = False) -> HierarchicalSample:
    return load_maps(Path(root) / split, name, require_image=True, strict=strict)


def list_names(split_dir, sub: str = "semantics") -> list[str]:
    """Lexicographically sorted sample names present in a split directory."""
    map_dir = Path(split_dir) / sub
    if not map_dir.is_dir():
        return []
    return sorted(p.stem for p in map_dir.glob("*.png"))


@dataclass(frozen=True)
class DatasetIndex:
    root: str
    split: str
    names: tuple[str, ...]

    @classmethod
    def open(cls, root, split: str, require_image: bool = True) -> "DatasetIndex":
        split_dir = Path(root) / split
        names = list_names(split_dir)
        if not names:
            raise DataError(f"no samples under {split_dir}")
        required = list(MAP_DIRS) + (["images"] if require_image else [])
        for name in names:
            for sub in required:
                ext = "png"
                if not (split_dir / sub / f"{name}.{ext}").exists():
                    raise DataError(f"{split_dir}: sample '{name}' missing {sub}/{name}.{ext}")
        return cls(root=str(root), split=split, names=tuple(names))

    def load(self, name: str, strict: bool = False) -> HierarchicalSample:
        return load_sample(self.root, self.split, name, strict=strict)

    def load_all(self, strict: bool = False) -> list[HierarchicalSample]:
        return [self.load(n, strict=strict) for n in self.names]

    def __len__(self) -> int:
        return len(self.names)


def write_prediction(out_split_dir, name: str, pmap) -> None:
    """Write a PanopticMap in the ground-truth encodings for round-tripping."""
    out = Path(out_split_dir)
    for id_map in (pmap.plant_instance, pmap.leaf_instance):
        top = int(id_map.max()) if id_map.size else 0
        if top > MAX_INSTANCE_ID:
            raise DataError(f"{name}: instance id {top} exceeds 16-bit range")
    _write_png(out / "semantics" / f"{name}.png", pmap.semantic.astype(np.uint8))
    _write_png(out / "plant_instances" / f"{name}.png", pmap.plant_instance.astype(np.uint16))
    _write_png(out / "leaf_instances" / f"{name}.png", pmap.leaf_instance.astype(np.uint16))


# -- synthetic scenes ---------------------------------------------------------

CROP_BASE = np.array([44, 148, 62], dtype=np.float64)
WEED_BASE = np.array([148, 138, 52], dtype=np.float64)
SOIL_BASE = np.array([106, 82, 58], dtype=np.float64)
MAX_LEAVES_PER_IMAGE = 18


def _ellipse(canvas_size: int, cy: float, cx: float, a: float, b: float,
             theta: float) -> np.ndarray:
    """Rasterize a rotated ellipse on an (E, E) canvas."""
    e = canvas_size
    r = max(a, b) + 1.5
    y0, y1 = max(0, int(cy - r)), min(e, int(cy + r) + 2)
    x0, x1 = max(0, int(cx - r)), min(e, int(cx + r) + 2)
    mask = np.zeros((e, e), dtype=bool)
    if y0 >= y1 or x0 >= x1:
        return mask
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dy = ys - cy
    dx = xs - cx
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    mask[y0:y1, x0:x1] = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return mask


def _leaf_counts(rng: np.random.Generator, n_crops: int) -> list[int]:
    """Per-crop leaf counts in 3..8, capped so one image stays matchable."""
    counts = [int(rng.integers(3, 9)) for _ in range(n_crops)]
    while sum(counts) > MAX_LEAVES_PER_IMAGE:
        top = max(range(len(counts)), key=lambda i: counts[i])
        if counts[top] > 3:
            counts[top] -= 1
        else:
            counts.pop()    # drop a trailing crop; the anchor (index 0) survives
    return counts


def synth_generate(out_root, count: int, size: int, seed: int,
                   split: str = "train") -> list[str]:
    """Write ``count`` deterministic synthetic samples of ``size`` x ``size``.

    Scenes hold 1-4 crop rosettes of 3-8 overlapping elliptical leaves (the
    first rosette is always fully inside the frame), 0-6 small elliptical
    weeds, and textured soil. Border-crossing plants get partial labels and
    their exact in-frame pixel fraction goes to the visibility sidecar.
    """
    if size % 32:
        raise DataError(f"size {size} not divisible by 32")
    if count < 1:
        raise DataError("count must be positive")
    rng = np.random.default_rng(seed)
    out = Path(out_root) / split
    names = []
    for idx in range(count):
        name = f"synth_{idx:04d}"
        for _attempt in range(20):
            sample, visibility, anchor_ok = _generate_scene(rng, size, name)
            if anchor_ok:
                break
        else:
            raise DataError(f"{name}: could not place an anchor crop with 3 visible leaves")
        validate_sample(sample, strict=True)
        _write_png(out / "images" / f"{name}.png", sample.image)
        _write_png(out / "semantics" / f"{name}.png", sample.semantics)
        _write_png(out / "plant_instances" / f"{name}.png",
                   sample.plant_instances.astype(np.uint16))
        _write_png(out / "leaf_instances" / f"{name}.png",
                   sample.leaf_instances.astype(np.uint16))
        vis_path = out / "visibility" / f"{name}.csv"
        vis_path.parent.mkdir(parents=True, exist_ok=True)
        rows = ["plant_id,fraction"]
        rows += [f"{pid},{frac:.6f}" for pid, frac in sorted(visibility.items())]
        vis_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
        names.append(name)
    return names


def _generate_scene(rng: np.random.Generator, size: int, name: str):
    s = size
    pad = s // 2
    e = s + 2 * pad
    window = (slice(pad, pad + s), slice(pad, pad + s))

    noise = rng.normal(0, 9, size=(s, s, 3))
    image = np.clip(SOIL_BASE + noise, 0, 255)
    gradient = np.linspace(-10, 10, s)[:, None, None] * np.array([1.0, 0.8, 0.6])
    image = np.clip(image + gradient, 0, 255)
    semantics = np.zeros((s, s), dtype=np.uint8)
    plants = np.zeros((s, s), dtype=np.int32)
    leaves = np.zeros((s, s), dtype=np.int32)
    visibility: dict[int, float] = {}

    n_crops = int(rng.integers(1, 5))
    leaf_counts = _leaf_counts(rng, n_crops)
    n_crops = len(leaf_counts)
    n_weeds = int(rng.integers(0, 7))

    # plan crops: anchor first (kept fully inside), others may cross borders
    crop_plans = []
    for ci in range(n_crops):
        radius = s * rng.uniform(0.16, 0.26)
        if ci == 0:
            # leaves reach ~1.35 * radius from the rosette center
            margin = 1.45 * radius + 2
            cy = rng.uniform(margin, s - margin)
            cx = rng.uniform(margin, s - margin)
        else:
            cy = rng.uniform(-0.08 * s, 1.08 * s)
            cx = rng.uniform(-0.08 * s, 1.08 * s)
        leaf_geo = []
        base_angle = rng.uniform(0, 2 * np.pi)
        n = leaf_counts[ci]
        for k in range(n):
            theta = base_angle + 2 * np.pi * k / n + rng.uniform(-0.25, 0.25)
            a = radius * rng.uniform(0.5, 0.66)
            b = a * rng.uniform(0.38, 0.62)
            d = a * rng.uniform(0.85, 1.05)
            leaf_geo.append((cy + d * np.sin(theta), cx + d * np.cos(theta), a, b, theta))
        crop_plans.append(leaf_geo)

    weed_plans = []
    for _ in range(n_weeds):
        a = s * rng.uniform(0.03, 0.065)
        b = a * rng.uniform(0.5, 1.0)
        weed_plans.append((rng.uniform(-0.05 * s, 1.05 * s),
                           rng.uniform(-0.05 * s, 1.05 * s),
                           a, b, rng.uniform(0, 2 * np.pi)))

    next_plant = 1
    next_leaf = 1

    def draw_crop(leaf_geo):
        nonlocal next_plant, next_leaf, image
        leaf_ids = []
        leaf_masks_e = [
            _ellipse(e, pad + cy, pad + cx, a, b, theta)
            for cy, cx, a, b, theta in leaf_geo
        ]
        union_e = np.logical_or.reduce(leaf_masks_e)
        total = int(union_e.sum())
        if total == 0:
            return leaf_ids
        union_in = union_e[window]
        if not union_in.any():
            return leaf_ids
        frac = union_in.sum() / total
        pid = next_plant
        next_plant += 1
        visibility[pid] = float(frac)
        sem_label = 1 if frac >= 0.5 else 3
        semantics[union_in] = sem_label
        plants[union_in] = pid
        leaves[union_in] = 0
        for mask_e, (cy, cx, a, b, theta) in zip(leaf_masks_e, leaf_geo):
            mask_in = mask_e[window]
            if not mask_in.any():
                continue
            lid = next_leaf
            next_leaf += 1
            leaf_ids.append(lid)
            leaves[mask_in] = lid
            shade = rng.uniform(0.68, 1.32)
            tint = rng.normal(0, 6, size=3)
            color = np.clip(CROP_BASE * shade + tint, 0, 255)
            image[mask_in] = color + rng.normal(0, 5, size=(int(mask_in.sum()), 3))
        return leaf_ids

    def draw_weed(plan):
        nonlocal next_plant, image
        cy, cx, a, b, theta = plan
        mask_e = _ellipse(e, pad + cy, pad + cx, a, b, theta)
        total = int(mask_e.sum())
        if total == 0:
            return
        mask_in = mask_e[window]
        if not mask_in.any():
            return
        frac = mask_in.sum() / total
        pid = next_plant
        next_plant += 1
        visibility[pid] = float(frac)
        semantics[mask_in] = 2 if frac >= 0.5 else 4
        plants[mask_in] = pid
        leaves[mask_in] = 0
        shade = rng.uniform(0.75, 1.25)
        image[mask_in] = (np.clip(WEED_BASE * shade, 0, 255)
                          + rng.normal(0, 6, size=(int(mask_in.sum()), 3)))

    # draw order: secondary crops, weeds, anchor crop on top (stays complete)
    for geo in crop_plans[1:]:
        draw_crop(geo)
    for plan in weed_plans:
        draw_weed(plan)
    anchor_leaf_ids = draw_crop(crop_plans[0])

    # drop sidecar rows for plants completely painted over
    present = set(np.unique(plants).tolist())
    visibility = {pid: f for pid, f in visibility.items() if pid in present}
    leaf_present = set(np.unique(leaves).tolist())
    anchor_ok = sum(1 for lid in anchor_leaf_ids if lid in leaf_present) >= 3

    sample = HierarchicalSample(
        name=name,
        image=np.clip(image, 0, 255).astype(np.uint8),
        semantics=semantics,
        plant_instances=plants,
        leaf_instances=leaves,
        visibility=visibility,
    )
    return sample, visibility, anchor_ok
