"""Procedural abdomen-like phantoms: a body cylinder in air, ellipsoid organs and
superellipsoid lymph nodes placed outside the organs."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DataError
from .volumes import LabelVolume, ScalarVolume

AIR_HU = -1000.0
NOISE_SIGMA = 10.0
MIN_NODE_CONTRAST = 30.0

DEFAULT_INTENSITIES = {
    "air": (AIR_HU, 0.0),
    "body": (40.0, 5.0),
    "node": (150.0, 5.0),
    1: (90.0, 5.0),
    2: (210.0, 5.0),
    3: (-40.0, 5.0),
    4: (240.0, 5.0),
    5: (100.0, 5.0),
    6: (0.0, 5.0),
}


class PlacementError(DataError):
    pass


@dataclass
class PhantomSpec:
    grid: tuple = (32, 32, 32)
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    organ_count: int = 2
    node_count_range: tuple = (1, 3)
    intensity_table: dict = field(default_factory=lambda: dict(DEFAULT_INTENSITIES))
    rng_seed: int = 0
    node_diameter_range: tuple = (4, 12)
    max_retries: int = 200

    def __post_init__(self):
        self.grid = tuple(int(v) for v in self.grid)
        self.spacing_mm = tuple(float(v) for v in self.spacing_mm)
        self.intensity_table = {(int(k) if str(k).isdigit() else k): tuple(v)
                                for k, v in self.intensity_table.items()}
        lo, hi = self.node_count_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad node_count_range {self.node_count_range}")
        if min(self.grid) < 24:
            raise ValueError(f"phantom grid must be at least 24^3, got {self.grid}")
        dlo, dhi = self.node_diameter_range
        if not 4 <= dlo <= dhi <= 12:
            raise ValueError("node diameters must lie in 4..12 voxels")
        node_mean = self.intensity_table["node"][0]
        for k in range(1, self.organ_count + 1):
            if k not in self.intensity_table:
                raise ValueError(f"no intensity for organ label {k}")
            if abs(self.intensity_table[k][0] - node_mean) < MIN_NODE_CONTRAST:
                raise ValueError(f"organ {k} mean within {MIN_NODE_CONTRAST} of the node mean")

    def to_dict(self) -> dict:
        return {"grid": list(self.grid), "spacing_mm": list(self.spacing_mm), "organ_count": self.organ_count,
                "node_count_range": list(self.node_count_range),
                "intensity_table": {str(k): list(v) for k, v in self.intensity_table.items()},
                "rng_seed": self.rng_seed, "node_diameter_range": list(self.node_diameter_range),
                "max_retries": self.max_retries}


def body_region(grid) -> np.ndarray:
    """Cylinder along the last axis, centred in the first two."""
    h, w, d = grid
    r = 0.45 * min(h, w)
    y, x = np.mgrid[:h, :w]
    disk = ((y - (h - 1) / 2) ** 2 + (x - (w - 1) / 2) ** 2) <= r * r
    return np.repeat(disk[:, :, None], d, axis=2)


def _coords(grid):
    return np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in grid], indexing="ij"), -1)


def _place(rng, free, make_shape, max_retries):
    """Sample shapes centred on free voxels until one lies entirely in ``free``."""
    cells = np.argwhere(free)
    if len(cells) == 0:
        raise PlacementError("no free space left for another shape")
    for _ in range(max_retries):
        centre = cells[rng.integers(len(cells))] + rng.uniform(-0.5, 0.5, 3)
        shape = make_shape(rng, centre)
        if shape.any() and not (shape & ~free).any():
            return shape
    raise PlacementError(f"could not place a shape after {max_retries} attempts")


def generate_phantom(spec: PhantomSpec):
    """Return ``(image, anatomy_raw, ln_mask)``; organs carry labels 1..organ_count."""
    rng = np.random.default_rng(spec.rng_seed)
    grid = spec.grid
    xyz = _coords(grid)
    body = body_region(grid)
    # keep shapes off the body wall so they stay enclosed by body voxels
    interior = ndimage.binary_erosion(body, iterations=2)
    interior[..., :1] = interior[..., -1:] = False
    g = np.array(grid, dtype=float)

    def ellipsoid(r, centre):
        semi = r.uniform(0.1, 0.2, 3) * g
        return ((((xyz - centre) / semi) ** 2).sum(-1)) <= 1.0

    organs = np.zeros(grid, dtype=np.uint8)
    taken = np.zeros(grid, dtype=bool)
    for k in range(1, spec.organ_count + 1):
        free = interior & ~ndimage.binary_dilation(taken, iterations=2)
        shape = _place(rng, free, ellipsoid, spec.max_retries)
        organs[shape] = k
        taken |= shape

    dlo, dhi = spec.node_diameter_range

    def superellipsoid(r, centre):
        semi = r.uniform(dlo, dhi, 3) / 2.0
        expo = r.uniform(1.5, 3.0)
        return (np.abs((xyz - centre) / semi) ** expo).sum(-1) <= 1.0

    n_nodes = int(rng.integers(spec.node_count_range[0], spec.node_count_range[1] + 1))
    nodes = np.zeros(grid, dtype=bool)
    for _ in range(n_nodes):
        free = interior & ~ndimage.binary_dilation(taken | nodes, iterations=2)
        nodes |= _place(rng, free, superellipsoid, spec.max_retries)

    table = spec.intensity_table
    image = np.full(grid, AIR_HU, dtype=np.float64)

    def fill(region, key):
        mean, std = table[key]
        image[region] = mean + std * rng.standard_normal(int(region.sum()))

    fill(body, "body")
    for k in range(1, spec.organ_count + 1):
        fill(organs == k, k)
    fill(nodes, "node")
    image += NOISE_SIGMA * rng.standard_normal(grid)

    names = {k: f"organ_{k}" for k in range(1, spec.organ_count + 1)}
    return (ScalarVolume(image.astype(np.float32), spec.spacing_mm),
            LabelVolume(organs, spec.spacing_mm, label_table=names),
            LabelVolume(nodes.astype(np.uint8), spec.spacing_mm, label_table={1: "lymph_node"}))
