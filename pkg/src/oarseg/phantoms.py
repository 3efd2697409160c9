"""Synthetic head phantoms with paired CT / MR renders and exact organ annotations.

Each case is a stack of 2D slices.  A slice carries a body ellipse with a
bone ring (not annotated) and a set of non-overlapping elliptical organs.
Organs are drawn as polygons and scan-converted with the same rasterizer the
annotation pipeline uses, so the label raster and the derived instances agree
pixel for pixel.

CT and MR are rendered from the same structure.  CT shows bone and most organs
but gives the tumor-like class only a faint offset; MR blurs bone and makes the
tumor-like class very bright.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from oarseg.taxonomy import CLASS_IDS, NUM_CLASSES
from oarseg.voxelio.raster import compute_instance_bbox, rasterize_contour
from oarseg.voxelio.types import AnnotationSet, Contour, Modality, Phase, VolumeScan

AIR, SOFT, BONE = 0, 1, 2


@dataclass(frozen=True)
class OrganSpec:
    """How one category is drawn.

    ``presence`` is the fraction of a case's slices the organ spans (as one
    contiguous run).  ``size`` is the semi-axis range as a fraction of the
    image side.  ``anchors`` are nominal centers (fractions of the image);
    instance ``k`` on a slice uses ``anchors[k % len(anchors)]``.  ``None``
    places the organ anywhere inside the body.
    """

    name: str
    presence: float
    size: tuple[float, float]
    ct: float
    mr: float
    count: tuple[int, int] = (1, 1)
    anchors: tuple[tuple[float, float], ...] | None = None
    jitter: float = 0.03

    @property
    def class_id(self) -> int:
        return CLASS_IDS[self.name]

    def mean_count(self) -> float:
        return (self.count[0] + self.count[1]) / 2


@dataclass(frozen=True)
class PhantomConfig:
    image_size: int = 64
    n_slices: int = 8
    organs: tuple[OrganSpec, ...] = ()
    # (air, soft tissue, bone) intensities
    tissue_ct: tuple[float, float, float] = (-1000.0, 40.0, 900.0)
    tissue_mr: tuple[float, float, float] = (0.0, 300.0, 100.0)
    noise_ct: float = 8.0
    noise_mr: float = 15.0
    bias_ct: float = 0.0
    bias_mr: float = 30.0
    mr_bone_blur: float = 1.5
    # presence_eff = presence ** skew; 0 puts every organ on every slice
    skew: float = 1.0
    tumor_class: str = "GTV"
    spacing: tuple[float, float, float] = (5.0, 1.0, 1.0)
    min_area: int = 10

    def __post_init__(self):
        if self.image_size < 16 or self.n_slices < 1:
            raise ValueError("image_size must be >= 16 and n_slices >= 1")
        if min(self.noise_ct, self.noise_mr) < 0:
            raise ValueError("noise sigma must be >= 0")
        for o in self.organs:
            if not (0 < o.size[0] <= o.size[1] < 1):
                raise ValueError(f"{o.name}: size fractions must satisfy 0 < lo <= hi < 1")
            if not 0 <= o.presence <= 1 or o.count[0] < 0 or o.count[1] < o.count[0]:
                raise ValueError(f"{o.name}: invalid presence/count")
        if self.skew < 0:
            raise ValueError("skew must be >= 0")

    def presence(self, organ: OrganSpec) -> float:
        return organ.presence**self.skew if organ.presence > 0 else 0.0

    def organ(self, name: str) -> OrganSpec:
        for o in self.organs:
            if o.name == name:
                return o
        raise KeyError(name)

    def lookup(self, modality: Modality) -> np.ndarray:
        """Per-class intensity table (index = class id); background rows hold soft tissue."""
        tissue = self.tissue_ct if modality == Modality.CT else self.tissue_mr
        table = np.full(NUM_CLASSES, tissue[SOFT], dtype=np.float64)
        for o in self.organs:
            table[o.class_id] = o.ct if modality == Modality.CT else o.mr
        return table


def desk_config(**overrides) -> PhantomConfig:
    """64x64 preset used by the end-to-end checks: two large classes, a rare small one, an MR-salient tumor."""
    organs = (
        OrganSpec("BrainStem", 0.85, (0.095, 0.125), ct=78.0, mr=460.0, anchors=((0.5, 0.55),)),
        OrganSpec("SpinalCord", 1.0, (0.07, 0.085), ct=95.0, mr=520.0, anchors=((0.5, 0.8),), jitter=0.02),
        OrganSpec("Eye", 0.5, (0.06, 0.075), ct=12.0, mr=800.0, count=(2, 2), anchors=((0.31, 0.26), (0.69, 0.26))),
        OrganSpec("Chiasm", 0.35, (0.05, 0.06), ct=130.0, mr=560.0, anchors=((0.5, 0.37),), jitter=0.02),
        OrganSpec("GTV", 0.6, (0.065, 0.1), ct=54.0, mr=950.0),
    )
    return replace(PhantomConfig(organs=organs), **overrides)


# relative image counts and median relative areas (percent) of the clinical statistics table
TABLE1_IMAGES = {
    "BrainStem": 3422, "Chiasm": 390, "Cochlea": 523, "Eye": 1642, "InnerEar": 376,
    "Larynx": 1113, "Lens": 382, "OpticNerve": 537, "SpinalCord": 9693, "GTV": 4899,
}
TABLE1_AREA_PCT = {
    "BrainStem": 1.4, "Chiasm": 0.23, "Cochlea": 0.21, "Eye": 1.08, "InnerEar": 0.23,
    "Larynx": 2.4, "Lens": 0.06, "OpticNerve": 0.45, "SpinalCord": 0.29, "GTV": 1.04,
}
_TABLE1_LAYOUT = {
    "BrainStem": ((0.5, 0.5),),
    "Chiasm": ((0.5, 0.37),),
    "Cochlea": ((0.3, 0.48), (0.7, 0.48)),
    "Eye": ((0.3, 0.22), (0.7, 0.22)),
    "InnerEar": ((0.25, 0.58), (0.75, 0.58)),
    "Larynx": ((0.5, 0.86),),
    "Lens": ((0.3, 0.12), (0.7, 0.12)),
    "OpticNerve": ((0.38, 0.31), (0.62, 0.31)),
    "SpinalCord": ((0.5, 0.72),),
    "GTV": None,
}


def table1_config(image_size: int = 128, n_slices: int = 10, **overrides) -> PhantomConfig:
    """All ten categories with presence proportional to the clinical image counts."""
    top = max(TABLE1_IMAGES.values())
    organs = []
    for name, images in TABLE1_IMAGES.items():
        r = math.sqrt(TABLE1_AREA_PCT[name] / 100 / math.pi)
        r = max(r, 2.4 / image_size)
        anchors = _TABLE1_LAYOUT[name]
        count = (2, 2) if anchors and len(anchors) == 2 else (1, 1)
        organs.append(
            OrganSpec(name, images / top, (0.9 * r, 1.1 * r), ct=60.0, mr=500.0, count=count, anchors=anchors, jitter=0.02)
        )
    return replace(PhantomConfig(image_size=image_size, n_slices=n_slices, organs=tuple(organs)), **overrides)


@dataclass
class StructureMap:
    """Label, instance-id and tissue rasters, each ``(slices, rows, cols)``."""

    labels: np.ndarray
    instances: np.ndarray
    tissue: np.ndarray
    contours: list[Contour] = field(default_factory=list)

    def __post_init__(self):
        if self.labels.shape != self.instances.shape or self.labels.shape != self.tissue.shape:
            raise ValueError("structure rasters must share one shape")
        if self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES:
            raise ValueError("label raster holds ids outside the taxonomy")

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.labels, self.instances, self.tissue):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


class PhantomCapacityError(ValueError):
    """The configured organs cannot fit in the body."""


def _ellipse_polygon(cx, cy, a, b, theta, n=32) -> np.ndarray:
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    x, y = a * np.cos(t), b * np.sin(t)
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([cx + c * x - s * y, cy + s * x + c * y], axis=1)


def _check_capacity(config: PhantomConfig) -> None:
    n = config.image_size
    body = math.pi * (0.44 * 0.85 * n) * (0.47 * 0.85 * n)
    demand = sum(o.count[1] * math.pi * (o.size[1] * n + 1) ** 2 for o in config.organs)
    if demand > body:
        raise PhantomCapacityError(
            f"organs may need {demand:.0f} px but the body interior holds only {body:.0f} px"
        )


GOLDEN = (math.sqrt(5) - 1) / 2


def generate_structure(seed, config: PhantomConfig, rounding: float | None = None) -> StructureMap:
    """Deterministic structure rasters for one case.

    Each organ spans ``presence * n_slices`` slices, rounded stochastically.
    ``rounding`` in ``[0, 1)`` replaces the random rounding draw; a corpus
    passes a low-discrepancy sequence so per-class counts over many cases
    track the configured presence closely.
    """
    if rounding is not None and not 0 <= rounding < 1:
        raise ValueError("rounding must lie in [0, 1)")
    _check_capacity(config)
    rng = np.random.default_rng(seed)
    n, S = config.image_size, config.n_slices
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    labels = np.zeros((S, n, n), dtype=np.int64)
    instances = np.zeros((S, n, n), dtype=np.int64)
    tissue = np.zeros((S, n, n), dtype=np.int8)
    contours: list[Contour] = []

    ax, ay = 0.44 * n * rng.uniform(0.95, 1.05), 0.47 * n * rng.uniform(0.95, 1.05)
    cx, cy = n / 2 + rng.uniform(-1, 1), n / 2 + rng.uniform(-1, 1)
    rho = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2
    interior = rho <= 0.85**2
    tissue[:, rho <= 1.0] = BONE
    tissue[:, rho <= 0.88**2] = SOFT

    # slice run for each organ: stochastic rounding of presence * S, contiguous in z
    runs = {}
    for j, o in enumerate(config.organs):
        target = config.presence(o) * S
        u = rng.random()
        if rounding is not None:
            u = (rounding + j * GOLDEN) % 1.0
        length = int(math.floor(target)) + int(u < target - math.floor(target))
        start = int(rng.integers(0, S - length + 1))
        runs[o.name] = range(start, start + length)

    # bigger organs first so small ones fill the gaps
    order = sorted(config.organs, key=lambda o: -o.size[1])
    for z in range(S):
        occupied = np.zeros((n, n), dtype=bool)
        next_id = 1
        for o in order:
            if z not in runs[o.name]:
                continue
            count = int(rng.integers(o.count[0], o.count[1] + 1))
            for k in range(count):
                placed = _place(rng, o, k, n, cx, cy, interior, occupied, config.min_area)
                if placed is None:
                    continue
                poly, mask = placed
                occupied |= ndimage.binary_dilation(mask)
                labels[z][mask] = o.class_id
                instances[z][mask] = next_id
                next_id += 1
                contours.append(Contour(z, o.class_id, poly, source_name=o.name))
    return StructureMap(labels, instances, tissue, contours)


def _place(rng, organ: OrganSpec, k, n, cx, cy, interior, occupied, min_area):
    for attempt in range(200):
        spread = organ.jitter * (1 + attempt / 40)
        if organ.anchors:
            fx, fy = organ.anchors[k % len(organ.anchors)]
            px = cx + (fx - 0.5) * n + rng.normal(0, spread * n)
            py = cy + (fy - 0.5) * n + rng.normal(0, spread * n)
        else:
            px, py = rng.uniform(0.15 * n, 0.85 * n, size=2)
        a = rng.uniform(*organ.size) * n
        b = a * rng.uniform(0.75, 1.0)
        poly = _ellipse_polygon(px, py, a, b, rng.uniform(0, np.pi))
        mask = rasterize_contour(poly, (n, n))
        if mask.sum() < min_area or (mask & ~interior).any() or (mask & occupied).any():
            continue
        return poly, mask
    return None


def render_modality(
    structure: StructureMap,
    modality: Modality | str,
    noise_seed,
    config: PhantomConfig,
    *,
    noise: float | None = None,
    bias: float | None = None,
) -> np.ndarray:
    """Intensity = tissue/class lookup + smooth bias field + Gaussian noise."""
    modality = Modality(modality)
    is_ct = modality == Modality.CT
    tissue_vals = np.asarray(config.tissue_ct if is_ct else config.tissue_mr, dtype=np.float64)
    sigma = (config.noise_ct if is_ct else config.noise_mr) if noise is None else noise
    amp = (config.bias_ct if is_ct else config.bias_mr) if bias is None else bias
    rng = np.random.default_rng(noise_seed)

    img = tissue_vals[structure.tissue.astype(np.int64)]
    if not is_ct and config.mr_bone_blur > 0:
        img = ndimage.gaussian_filter(img, sigma=(0, config.mr_bone_blur, config.mr_bone_blur), mode="nearest")
    table = config.lookup(modality)
    organ = structure.labels > 0
    img = np.where(organ, table[structure.labels], img)

    S, H, W = img.shape
    if amp:
        yy, xx = np.mgrid[0:H, 0:W] / max(H, W) * 2 - 1
        coef = rng.normal(size=(S, 5))
        field_ = (
            coef[:, 0, None, None] * xx
            + coef[:, 1, None, None] * yy
            + coef[:, 2, None, None] * xx * yy
            + coef[:, 3, None, None] * (xx**2 - 0.5)
            + coef[:, 4, None, None] * (yy**2 - 0.5)
        )
        field_ /= np.abs(field_).max(axis=(1, 2), keepdims=True) + 1e-12
        img = img + amp * field_ * (structure.tissue > AIR)
    if sigma:
        img = img + rng.normal(0.0, sigma, size=img.shape)
    return img.astype(np.float32)


@dataclass
class PhantomCase:
    ct: VolumeScan
    mr: VolumeScan
    annotations: AnnotationSet
    structure: StructureMap

    def __iter__(self):
        # unpacks as (ct, mr, annotations)
        return iter((self.ct, self.mr, self.annotations))


def generate_phantom_case(
    seed, config: PhantomConfig | None = None, case_id: str | None = None, rounding: float | None = None
) -> PhantomCase:
    """Render one case; every array is a pure function of ``seed``, ``config`` and ``rounding``."""
    config = config or desk_config()
    ss = np.random.SeedSequence(seed)
    s_struct, s_ct, s_mr = ss.spawn(3)
    structure = generate_structure(s_struct, config, rounding)
    case_id = case_id or f"phantom{_seed_tag(seed)}"
    meta = {"phantom_seed": seed, "rounding": rounding, "structure_digest": structure.digest(), "config": config}
    ct = VolumeScan(
        render_modality(structure, Modality.CT, s_ct, config),
        config.spacing, Modality.CT, case_id, Phase.PRE, meta=meta,
    )
    mr = VolumeScan(
        render_modality(structure, Modality.MR, s_mr, config),
        config.spacing, Modality.MR, case_id, Phase.PRE, meta=meta,
    )
    ann = annotations_from_structure(structure, case_id, config.min_area)
    return PhantomCase(ct, mr, ann, structure)


def _seed_tag(seed) -> str:
    if isinstance(seed, (int, np.integer)):
        return f"{int(seed):05d}"
    return "-".join(str(int(s)) for s in np.atleast_1d(seed))


def structure_from_meta(meta: dict) -> StructureMap:
    """Rebuild the structure a phantom render came from."""
    s_struct, _, _ = np.random.SeedSequence(meta["phantom_seed"]).spawn(3)
    return generate_structure(s_struct, meta["config"], meta.get("rounding"))


def annotations_from_structure(structure: StructureMap, case_id: str, min_area: int = 10) -> AnnotationSet:
    S, H, W = structure.labels.shape
    ann = AnnotationSet(case_id=case_id, grid=(H, W), contours=list(structure.contours))
    for z in range(S):
        ids = structure.instances[z]
        for iid in np.unique(ids[ids > 0]):
            mask = ids == iid
            cid = int(structure.labels[z][mask][0])
            rec = compute_instance_bbox(mask, min_area=min_area, class_id=cid, slice_index=z)
            if rec is not None:
                ann.instances.append(rec)
    return ann


def generate_corpus(n_cases: int, seed: int = 0, config: PhantomConfig | None = None) -> list[PhantomCase]:
    """``n_cases`` phantoms whose slice-count rounding follows a golden-ratio sequence."""
    start = float(np.random.default_rng(seed).random())
    return [
        generate_phantom_case((seed, i), config, f"phantom{seed:03d}_{i:04d}", (start + i * GOLDEN) % 1.0)
        for i in range(n_cases)
    ]


class UnpairedSampler:
    """Draws CT slices and MR slices from disjoint case pools.

    ``draw(step)`` is a pure function of ``(seed, step)`` so training can
    resume at any step without replaying the sampler.
    """

    def __init__(self, n_cases: int, n_slices: int, seed: int = 0):
        if n_cases < 2:
            raise ValueError("unpaired sampling needs at least two cases")
        perm = np.random.default_rng(seed).permutation(n_cases)
        half = n_cases // 2
        self.ct_pool = np.sort(perm[:half])
        self.mr_pool = np.sort(perm[half:])
        self.n_slices = n_slices
        self.seed = seed

    def draw(self, step: int) -> tuple[tuple[int, int], tuple[int, int]]:
        rng = np.random.default_rng([self.seed, step])
        ct_case = int(rng.choice(self.ct_pool))
        mr_case = int(rng.choice(self.mr_pool))
        return (ct_case, int(rng.integers(self.n_slices))), (mr_case, int(rng.integers(self.n_slices)))


def class_contrast(image: np.ndarray, labels: np.ndarray, tissue: np.ndarray, class_id: int) -> float:
    """Mean class intensity minus mean surrounding soft tissue (background label, soft tissue compartment)."""
    inside = labels == class_id
    if not inside.any():
        return float("nan")
    ring = ndimage.binary_dilation(inside, iterations=3) & ~inside & (labels == 0) & (tissue == SOFT)
    if not ring.any():
        ring = (labels == 0) & (tissue == SOFT)
    return float(image[inside].mean() - image[ring].mean())


def contrast_to_noise(config: PhantomConfig, class_name: str, modality: Modality) -> float:
    """Configured contrast-to-noise ratio of a class against soft tissue."""
    table = config.lookup(modality)
    tissue = config.tissue_ct if modality == Modality.CT else config.tissue_mr
    sigma = config.noise_ct if modality == Modality.CT else config.noise_mr
    return abs(table[CLASS_IDS[class_name]] - tissue[SOFT]) / max(sigma, 1e-12)
