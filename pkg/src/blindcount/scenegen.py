"""Procedural multi-class 2-D scenes with per-instance occlusion labels.

A class is fully determined by an integer ``class_seed``: its outline,
aspect ratio, texture pattern and colours. Instances are dropped one after
another at random positions, orientations and sizes; later drops cover
earlier ones. Occlusion is measured on the final raster as ``1 - A0 / A1``
where ``A0`` counts visible in-frame pixels and ``A1`` the pixels the
instance would cover alone on an unbounded canvas.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from skimage.draw import polygon as draw_polygon

from .densitymap import DEFAULT_SIGMA, integrate, pseudo_density, read_dmap, write_dmap

SPLITS = ("train", "val", "test")
_SPLIT_CODE = {"train": 1, "val": 2, "test": 3}
MAX_CLASSES = 4
MAX_INSTANCES = 300
EXEMPLAR_MAX_OCCLUSION = 0.3


class GenerationError(RuntimeError):
    pass


@dataclass
class GenConfig:
    image_size: int = 64
    min_classes: int = 1
    max_classes: int = 4
    class_count_mean: float = 1.75
    min_instances: int = 1
    max_instances: int = 20
    # wider than the raster default: with 1/8-resolution features a 2 px
    # kernel makes the all-zero map the L1 optimum and training collapses
    sigma: float = 3.0
    max_occlusion: float = 0.7
    # per-scene nominal object radius in pixels, before crowding adjustment
    min_radius: float = 3.0
    max_radius: float = 6.0
    coverage: float = 0.45
    brightness_jitter: float = 0.15
    contrast_jitter: float = 0.2
    noise: float = 0.02
    pool_sizes: dict = field(default_factory=lambda: {"train": 287, "val": 37, "test": 19})
    max_retries: int = 50

    def validate(self) -> None:
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")
        if not 1 <= self.min_classes <= self.max_classes <= MAX_CLASSES:
            raise ValueError(f"class range must lie within [1, {MAX_CLASSES}]")
        if not 1 <= self.min_instances <= self.max_instances <= MAX_INSTANCES:
            raise ValueError(f"instance range must lie within [1, {MAX_INSTANCES}]")
        if not self.min_classes <= self.class_count_mean <= self.max_classes:
            raise ValueError("class_count_mean must lie within the class range")
        if not 0 <= self.max_occlusion <= 1:
            raise ValueError("max_occlusion must be a fraction")
        if not 0 < self.min_radius <= self.max_radius:
            raise ValueError("radius range must be positive and ordered")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        for split in SPLITS:
            if self.pool_sizes.get(split, 0) < self.max_classes:
                raise ValueError(f"{split} class pool smaller than max_classes")

    @classmethod
    def from_dict(cls, data: dict) -> "GenConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass(frozen=True)
class ClassSpec:
    class_seed: int
    n_vertices: int  # 0 means ellipse
    star: bool
    aspect: float
    pattern: int  # 0 solid, 1 stripes, 2 checker, 3 ring
    frequency: float
    base_color: tuple[float, float, float]
    accent_color: tuple[float, float, float]
    size_factor: float

    @classmethod
    def from_seed(cls, class_seed: int) -> "ClassSpec":
        rng = np.random.default_rng(class_seed)
        n_vertices = int(rng.choice([0, 3, 4, 5, 6, 8]))
        base = rng.uniform(0.1, 1.0, size=3)
        accent = np.clip(base + rng.choice([-1, 1], size=3) * rng.uniform(0.3, 0.6, size=3), 0, 1)
        return cls(
            class_seed=int(class_seed),
            n_vertices=n_vertices,
            star=bool(n_vertices >= 5 and rng.random() < 0.5),
            aspect=float(rng.uniform(0.55, 1.0)),
            pattern=int(rng.integers(0, 4)),
            frequency=float(rng.uniform(1.5, 3.0)),
            base_color=tuple(float(c) for c in base),
            accent_color=tuple(float(c) for c in accent),
            size_factor=float(rng.uniform(0.8, 1.2)),
        )

    def outline(self) -> np.ndarray:
        """Unit-radius outline in local coordinates, shape (n, 2) of (u, v)."""
        if self.n_vertices == 0:
            t = np.linspace(0, 2 * np.pi, 24, endpoint=False)
            r = np.ones_like(t)
        elif self.star:
            t = np.linspace(0, 2 * np.pi, 2 * self.n_vertices, endpoint=False)
            r = np.where(np.arange(t.size) % 2 == 0, 1.0, 0.5)
        else:
            t = np.linspace(0, 2 * np.pi, self.n_vertices, endpoint=False)
            r = np.ones_like(t)
        return np.stack([r * np.cos(t) * self.aspect, r * np.sin(t)], axis=1)

    def texture(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """RGB colour at local coordinates ``(u, v)`` (unit radius)."""
        f = self.frequency
        if self.pattern == 1:
            accent = np.floor(u * f * 2) % 2 == 1
        elif self.pattern == 2:
            accent = (np.floor(u * f * 2) + np.floor(v * f * 2)) % 2 == 1
        elif self.pattern == 3:
            accent = np.hypot(u, v) < 0.45
        else:
            accent = np.zeros(u.shape, dtype=bool)
        base = np.asarray(self.base_color)
        acc = np.asarray(self.accent_color)
        return np.where(accent[..., None], acc, base)


@dataclass
class InstanceRecord:
    class_index: int
    center: tuple[float, float]  # (x, y) pixels
    bbox: tuple[int, int, int, int]  # (x0, y0, x1, y1), end exclusive, in-frame extent
    visible_pixels: int  # A0
    full_pixels: int  # A1
    occlusion: float
    rotation: float
    radius: float
    counted: bool
    mask: np.ndarray = field(repr=False)  # visible pixels, bool (H, W)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "mask"}
        d["center"] = list(self.center)
        d["bbox"] = list(self.bbox)
        d["mask_rle"] = encode_rle(self.mask)
        return d

    @classmethod
    def from_dict(cls, d: dict, shape: tuple[int, int]) -> "InstanceRecord":
        return cls(
            class_index=int(d["class_index"]),
            center=tuple(d["center"]),
            bbox=tuple(d["bbox"]),
            visible_pixels=int(d["visible_pixels"]),
            full_pixels=int(d["full_pixels"]),
            occlusion=float(d["occlusion"]),
            rotation=float(d["rotation"]),
            radius=float(d["radius"]),
            counted=bool(d["counted"]),
            mask=decode_rle(d["mask_rle"], shape),
        )


@dataclass
class SceneLabel:
    image: np.ndarray  # uint8 (H, W, 3)
    class_seeds: list[int]
    instances: list[InstanceRecord]
    seed: int = 0
    sigma: float = DEFAULT_SIGMA

    @property
    def m(self) -> int:
        return len(self.class_seeds)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]

    def counted(self, class_index: int) -> list[InstanceRecord]:
        return [r for r in self.instances if r.class_index == class_index and r.counted]

    @property
    def counts(self) -> list[int]:
        return [len(self.counted(c)) for c in range(self.m)]

    def density_maps(self, sigma: float | None = None) -> list[np.ndarray]:
        h, w = self.shape
        s = self.sigma if sigma is None else sigma
        return [pseudo_density([r.center for r in self.counted(c)], h, w, s) for c in range(self.m)]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "sigma": self.sigma,
            "height": self.shape[0],
            "width": self.shape[1],
            "class_seeds": list(self.class_seeds),
            "counts": self.counts,
            "instances": [r.to_dict() for r in self.instances],
        }


# -- masks ------------------------------------------------------------------

def encode_rle(mask: np.ndarray) -> list[int]:
    """Run lengths of a row-major bool mask, starting with a run of False."""
    flat = np.asarray(mask, dtype=bool).ravel()
    changes = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def decode_rle(runs: Sequence[int], shape: tuple[int, int]) -> np.ndarray:
    flat = np.zeros(shape[0] * shape[1], dtype=bool)
    pos = 0
    for k, run in enumerate(runs):
        if k % 2 == 1:
            flat[pos:pos + run] = True
        pos += run
    return flat.reshape(shape)


# -- sampling helpers -------------------------------------------------------

def class_count_probs(lo: int, hi: int, mean: float) -> np.ndarray:
    """Truncated geometric distribution on ``lo..hi`` with the requested mean."""
    ks = np.arange(lo, hi + 1)
    if lo == hi:
        return np.ones(1)

    def dist(ratio):
        p = ratio ** (ks - lo)
        return p / p.sum()

    a, b = 1e-9, 1e9
    for _ in range(200):
        mid = math.sqrt(a * b)
        if dist(mid) @ ks < mean:
            a = mid
        else:
            b = mid
    return dist(math.sqrt(a * b))


def _log_uniform_int(rng: np.random.Generator, lo: int, hi: int) -> int:
    value = math.exp(rng.uniform(math.log(lo), math.log(hi + 1)))
    return int(min(max(math.floor(value), lo), hi))


def class_pools(seed: int, sizes: dict) -> dict[str, list[int]]:
    """Pairwise-disjoint class-seed pools for each split, fixed by ``seed``."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC1A55]))
    total = sum(sizes[s] for s in SPLITS)
    seeds: list[int] = []
    seen: set[int] = set()
    while len(seeds) < total:
        for s in rng.integers(1, 2**31 - 1, size=total).tolist():
            if s not in seen and len(seeds) < total:
                seen.add(s)
                seeds.append(s)
    pools, start = {}, 0
    for split in SPLITS:
        pools[split] = sorted(seeds[start:start + sizes[split]])
        start += sizes[split]
    return pools


def image_seed(seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([seed, _SPLIT_CODE[split], index])
    return int(ss.generate_state(1)[0])


# -- rendering --------------------------------------------------------------

def _rasterize(spec: ClassSpec, center, rotation: float, radius: float,
               h: int, w: int, pad: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel rows/cols (on a canvas padded by ``pad``) covered by one instance."""
    local = spec.outline() * radius
    c, s = math.cos(rotation), math.sin(rotation)
    xs = local[:, 0] * c - local[:, 1] * s + center[0] - 0.5 + pad
    ys = local[:, 0] * s + local[:, 1] * c + center[1] - 0.5 + pad
    rr, cc = draw_polygon(ys, xs, shape=(h + 2 * pad, w + 2 * pad))
    if rr.size == 0:
        rr = np.array([int(center[1]) + pad])
        cc = np.array([int(center[0]) + pad])
    return rr, cc


def _draw_scene(rng: np.random.Generator, cfg: GenConfig, specs: list[ClassSpec],
                n_per_class: list[int]):
    size = cfg.image_size
    h = w = size
    n_total = sum(n_per_class)
    crowd_radius = math.sqrt(cfg.coverage * h * w / (math.pi * n_total))
    nominal = [
        max(min(rng.uniform(cfg.min_radius, cfg.max_radius), crowd_radius) * sp.size_factor, 1.0)
        for sp in specs
    ]
    pad = int(math.ceil(1.5 * max(nominal))) + 2
    order = rng.permutation(np.repeat(np.arange(len(specs)), n_per_class))

    id_map = np.full((h, w), -1, dtype=np.int64)
    background = rng.uniform(0.0, 1.0, size=3)
    canvas = np.broadcast_to(background, (h, w, 3)).copy()
    drops = []
    for idx, cls in enumerate(order.tolist()):
        spec = specs[cls]
        center = (float(rng.uniform(0, w)), float(rng.uniform(0, h)))
        rotation = float(rng.uniform(0, 2 * np.pi))
        radius = float(nominal[cls] * rng.uniform(0.5, 1.5))
        rr, cc = _rasterize(spec, center, rotation, radius, h, w, pad)
        inside = (rr >= pad) & (rr < h + pad) & (cc >= pad) & (cc < w + pad)
        fr, fc = rr[inside] - pad, cc[inside] - pad
        id_map[fr, fc] = idx
        # texture in instance-local unit coordinates
        dx, dy = fc + 0.5 - center[0], fr + 0.5 - center[1]
        cr, sr = math.cos(rotation), math.sin(rotation)
        u = (dx * cr + dy * sr) / radius
        v = (-dx * sr + dy * cr) / radius
        canvas[fr, fc] = spec.texture(u, v)
        drops.append((cls, center, rotation, radius, rr.size, fr, fc))

    records = []
    for idx, (cls, center, rotation, radius, a1, fr, fc) in enumerate(drops):
        mask = id_map == idx
        a0 = int(mask.sum())
        occlusion = 1.0 - a0 / a1
        if fr.size:
            bbox = (int(fc.min()), int(fr.min()), int(fc.max()) + 1, int(fr.max()) + 1)
        else:
            bbox = (0, 0, 0, 0)
        records.append(InstanceRecord(
            class_index=int(cls), center=center, bbox=bbox, visible_pixels=a0,
            full_pixels=int(a1), occlusion=occlusion, rotation=rotation, radius=radius,
            counted=bool(occlusion <= cfg.max_occlusion), mask=mask,
        ))

    # global illumination stand-in: brightness/contrast jitter plus sensor noise
    contrast = 1.0 + rng.uniform(-cfg.contrast_jitter, cfg.contrast_jitter)
    brightness = rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter)
    canvas = (canvas - 0.5) * contrast + 0.5 + brightness
    canvas = canvas + rng.normal(0.0, cfg.noise, size=canvas.shape)
    image = np.clip(np.round(canvas * 255), 0, 255).astype(np.uint8)
    return image, records


def generate_scene(seed: int, config: GenConfig | None = None,
                   class_pool: Sequence[int] | None = None,
                   n_classes: int | None = None,
                   n_instances: Sequence[int] | None = None) -> SceneLabel:
    """Render one scene. Deterministic in ``seed`` and ``config``.

    ``n_classes`` and ``n_instances`` override the sampled class count and
    per-class drop counts. If some class ends with no counted instance the
    placement is redrawn, up to ``config.max_retries`` times.
    """
    cfg = config or GenConfig()
    cfg.validate()
    if n_instances is not None and n_classes is None:
        n_classes = len(n_instances)
    if n_classes is not None and not 1 <= n_classes <= MAX_CLASSES:
        raise ValueError(f"n_classes must lie within [1, {MAX_CLASSES}]")
    if n_instances is not None and not all(1 <= n <= MAX_INSTANCES for n in n_instances):
        raise ValueError(f"instance counts must lie within [1, {MAX_INSTANCES}]")
    rng = np.random.default_rng(seed)
    pool = list(class_pool) if class_pool is not None else None
    probs = class_count_probs(cfg.min_classes, cfg.max_classes, cfg.class_count_mean)

    m = n_classes if n_classes is not None else int(
        rng.choice(np.arange(cfg.min_classes, cfg.max_classes + 1), p=probs))
    if pool is None:
        class_seeds = [int(s) for s in rng.integers(1, 2**31 - 1, size=m)]
    else:
        if len(pool) < m:
            raise GenerationError(f"class pool of {len(pool)} cannot supply {m} classes")
        class_seeds = [int(s) for s in rng.choice(pool, size=m, replace=False)]
    specs = [ClassSpec.from_seed(s) for s in class_seeds]
    if n_instances is not None:
        counts = list(n_instances)
    else:
        counts = [_log_uniform_int(rng, cfg.min_instances, cfg.max_instances) for _ in range(m)]

    # Only the placement is redrawn on failure, so the class-count and
    # instance-count distributions are not biased by rejections.
    for _ in range(cfg.max_retries):
        image, records = _draw_scene(rng, cfg, specs, counts)
        label = SceneLabel(image, class_seeds, records, seed=int(seed), sigma=cfg.sigma)
        if all(n >= 1 for n in label.counts):
            return label
    raise GenerationError(f"seed {seed}: no valid scene after {cfg.max_retries} attempts")


def sample_exemplar_boxes(label: SceneLabel, class_index: int, k: int, mode: str = "eval",
                          rng: np.random.Generator | None = None) -> list[tuple[int, int, int, int]]:
    """Exemplar boxes for one class.

    ``eval``: the ``k`` least-occluded counted instances (ties by index).
    ``train``: ``k`` drawn uniformly from instances under 30% occlusion.
    """
    pool = [(i, r) for i, r in enumerate(label.instances)
            if r.class_index == class_index and r.counted]
    if mode == "eval":
        if len(pool) < k:
            raise ValueError(f"class {class_index} has {len(pool)} instances, need {k}")
        ranked = sorted(pool, key=lambda p: (p[1].occlusion, p[0]))
        return [r.bbox for _, r in ranked[:k]]
    if mode == "train":
        pool = [p for p in pool if p[1].occlusion < EXEMPLAR_MAX_OCCLUSION]
        if len(pool) < k:
            raise ValueError(f"class {class_index} has {len(pool)} instances under "
                             f"{EXEMPLAR_MAX_OCCLUSION:.0%} occlusion, need {k}")
        rng = rng or np.random.default_rng()
        picks = rng.choice(len(pool), size=k, replace=False)
        return [pool[int(p)][1].bbox for p in picks]
    raise ValueError(f"unknown mode {mode!r}")


# -- datasets on disk -------------------------------------------------------

def generate_split(split: str, n_images: int, config: GenConfig, seed: int, out_dir,
                   m1: bool = False) -> dict:
    """Write ``n_images`` scenes for ``split`` under ``out_dir/split`` and return its manifest."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    config.validate()
    pools = class_pools(seed, config.pool_sizes)
    pool = pools[split]
    root = Path(out_dir) / split
    for sub in ("images", "labels", "density"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    ids, class_hist, instance_counts = [], {}, []
    for index in range(n_images):
        image_id = f"{split}_{index:05d}"
        label = generate_scene(image_seed(seed, split, index), config, pool,
                               n_classes=1 if m1 else None)
        Image.fromarray(label.image).save(root / "images" / f"{image_id}.png")
        (root / "labels" / f"{image_id}.json").write_text(
            json.dumps({"image_id": image_id, **label.to_dict()}, sort_keys=True))
        for c, dmap in enumerate(label.density_maps()):
            write_dmap(root / "density" / f"{image_id}_{c}.dmap", dmap,
                       {"image_id": image_id, "class_index": c,
                        "class_seed": label.class_seeds[c], "count": label.counts[c]})
        ids.append(image_id)
        class_hist[label.m] = class_hist.get(label.m, 0) + 1
        instance_counts.extend(label.counts)

    manifest = {
        "split": split,
        "seed": seed,
        "m1": m1,
        "n_images": n_images,
        "config": asdict(config),
        "class_pool": pool,
        "image_ids": ids,
        "stats": {
            "classes_per_image": {str(k): v for k, v in sorted(class_hist.items())},
            "mean_classes_per_image": float(np.mean([int(k) for k, v in class_hist.items()
                                                     for _ in range(v)])) if ids else 0.0,
            "mean_instances_per_class": float(np.mean(instance_counts)) if instance_counts else 0.0,
            "max_instances_per_class": int(max(instance_counts)) if instance_counts else 0,
        },
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


@dataclass
class Sample:
    image_id: str
    image: np.ndarray  # uint8 (H, W, 3)
    densities: list[np.ndarray]
    label: dict

    @property
    def counts(self) -> list[float]:
        return [integrate(d) for d in self.densities]


def load_label(split_dir, image_id: str) -> SceneLabel:
    root = Path(split_dir)
    d = json.loads((root / "labels" / f"{image_id}.json").read_text())
    shape = (d["height"], d["width"])
    image = np.asarray(Image.open(root / "images" / f"{image_id}.png").convert("RGB"))
    return SceneLabel(image, d["class_seeds"],
                      [InstanceRecord.from_dict(r, shape) for r in d["instances"]],
                      seed=d["seed"], sigma=d["sigma"])


def load_split(split_dir, limit: int | None = None) -> list[Sample]:
    root = Path(split_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    samples = []
    for image_id in manifest["image_ids"][:limit]:
        label = json.loads((root / "labels" / f"{image_id}.json").read_text())
        image = np.asarray(Image.open(root / "images" / f"{image_id}.png").convert("RGB"))
        dens = [read_dmap(root / "density" / f"{image_id}_{c}.dmap")
                for c in range(len(label["class_seeds"]))]
        samples.append(Sample(image_id, image, dens, label))
    return samples


def read_manifest(split_dir) -> dict:
    return json.loads((Path(split_dir) / "manifest.json").read_text())
