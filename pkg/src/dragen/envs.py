"""Procedural 2D extruded objects rendered as G x G heightmaps.

Coordinates: a pixel ``(row, col)`` has its center at ``x = col``, ``y = row``;
the grid center is ``((G - 1) / 2, (G - 1) / 2)``. Rotations are
counter-clockwise in the (x, y) frame.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from dragen import __version__

KINDS = ("rectangle", "ellipse", "triangle")
SIZE_PARAMS = {
    "rectangle": ("width", "height"),
    "ellipse": ("a", "b"),
    "triangle": ("base", "height"),
}
PROVENANCE_PREFIXES = ("sampled", "dragen-iter-", "dr", "gaussian")
DEFAULT_G = 16


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeParams:
    kind: str
    size: tuple  # two sizes, see SIZE_PARAMS
    rotation: float = 0.0
    offset: tuple = (0.0, 0.0)  # (dx, dy) from the grid center, pixels

    def corners(self):
        """Extreme points (x, y) relative to the shape center, after rotation."""
        s0, s1 = self.size
        if self.kind == "rectangle":
            pts = np.array([[-s0, -s1], [s0, -s1], [s0, s1], [-s0, s1]]) / 2.0
        elif self.kind == "triangle":
            pts = np.array([[-s0 / 2, -s1 / 2], [s0 / 2, -s1 / 2], [0.0, s1 / 2]])
        else:
            t = np.linspace(0.0, 2 * np.pi, 721)
            pts = np.stack([s0 * np.cos(t), s1 * np.sin(t)], axis=1)
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        return pts @ np.array([[c, s], [-s, c]])

    def fits(self, G):
        lo, hi = 0.5, G - 1.5
        center = (G - 1) / 2.0 + np.asarray(self.offset)
        pts = self.corners() + center
        return bool(
            min(self.size) > 1.0 and pts.min() >= lo and pts.max() <= hi
        )

    def bbox(self, G):
        center = (G - 1) / 2.0 + np.asarray(self.offset)
        pts = self.corners() + center
        return pts.min(axis=0), pts.max(axis=0)


@dataclass
class DistributionConfig:
    label: str
    ranges: dict  # kind -> {param: [lo, hi]}
    weights: dict  # kind -> mixture weight
    rotation: tuple = (0.0, float(np.pi))
    offset: tuple = (0.0, 0.0)  # symmetric range for each of dx, dy

    @classmethod
    def from_dict(cls, d):
        try:
            cfg = cls(
                label=d["label"],
                ranges={k: {p: [float(v[0]), float(v[1])] for p, v in r.items()} for k, r in d["ranges"].items()},
                weights={k: float(w) for k, w in d["weights"].items()},
                rotation=tuple(float(x) for x in d.get("rotation", (0.0, float(np.pi)))),
                offset=tuple(float(x) for x in d.get("offset", (0.0, 0.0))),
            )
        except (KeyError, TypeError, AttributeError, IndexError, ValueError) as exc:
            raise ConfigError(f"malformed distribution config: {exc!r}") from exc
        cfg.validate()
        return cfg

    def to_dict(self):
        return asdict(self)

    def validate(self):
        if self.label not in ("train", "test"):
            raise ConfigError(f"label must be train or test, got {self.label!r}")
        if set(self.weights) - set(KINDS):
            raise ConfigError(f"unknown kinds {sorted(set(self.weights) - set(KINDS))}")
        if any(w < 0 for w in self.weights.values()):
            raise ConfigError("negative mixture weight")
        if abs(sum(self.weights.values()) - 1.0) > 1e-9:
            raise ConfigError(f"mixture weights sum to {sum(self.weights.values())}, not 1")
        for kind, w in self.weights.items():
            if w == 0:
                continue
            r = self.ranges.get(kind)
            if r is None or set(r) != set(SIZE_PARAMS[kind]):
                raise ConfigError(f"{kind}: need ranges for {SIZE_PARAMS[kind]}")
            for p, (lo, hi) in r.items():
                if lo > hi:
                    raise ConfigError(f"{kind}.{p}: low {lo} > high {hi}")
                if lo <= 1.0:
                    raise ConfigError(f"{kind}.{p}: sizes must exceed 1 pixel")
        lo, hi = self.rotation
        if lo > hi:
            raise ConfigError("rotation: low > high")
        if self.offset[0] > self.offset[1]:
            raise ConfigError("offset: low > high")

    def kinds(self):
        return [k for k in KINDS if self.weights.get(k, 0.0) > 0]


def validate_shift(train: DistributionConfig, test: DistributionConfig):
    """Refuse train/test pairs whose shape ranges coincide for some kind."""
    for kind in set(train.kinds()) & set(test.kinds()):
        if train.ranges[kind] == test.ranges[kind]:
            raise ConfigError(f"{kind}: train and test ranges are identical; no shift")


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def sample_shape(cfg: DistributionConfig, rng: np.random.Generator, G=DEFAULT_G, max_tries=1000):
    """Draw shape parameters from ``cfg``; draws that do not fit the grid are redrawn."""
    kinds = cfg.kinds()
    p = np.array([cfg.weights[k] for k in kinds])
    for _ in range(max_tries):
        kind = kinds[int(rng.choice(len(kinds), p=p / p.sum()))]
        size = tuple(float(rng.uniform(*cfg.ranges[kind][name])) for name in SIZE_PARAMS[kind])
        rot = float(rng.uniform(*cfg.rotation))
        off = tuple(float(v) for v in rng.uniform(cfg.offset[0], cfg.offset[1], size=2))
        shape = ShapeParams(kind, size, rot, off)
        if shape.fits(G):
            return shape
    raise ConfigError(f"{cfg.label}: no fitting shape after {max_tries} draws; ranges too large for G={G}")


def _pixel_offsets(G, shape):
    idx = np.arange(G, dtype=np.float64)
    cx = (G - 1) / 2.0 + shape.offset[0]
    cy = (G - 1) / 2.0 + shape.offset[1]
    X, Y = np.meshgrid(idx - cx, idx - cy)  # X varies along columns
    c, s = np.cos(shape.rotation), np.sin(shape.rotation)
    # into the shape's local (unrotated) frame
    return c * X + s * Y, -s * X + c * Y


def rasterize(shape: ShapeParams, G=DEFAULT_G) -> np.ndarray:
    """Binary heightmap: 1.0 where the pixel center is inside the shape."""
    if not shape.fits(G):
        raise ConfigError(f"shape {shape} does not fit a {G}x{G} grid")
    lx, ly = _pixel_offsets(G, shape)
    s0, s1 = shape.size
    if shape.kind == "rectangle":
        inside = (np.abs(lx) <= s0 / 2) & (np.abs(ly) <= s1 / 2)
    elif shape.kind == "ellipse":
        inside = (lx / s0) ** 2 + (ly / s1) ** 2 <= 1.0
    elif shape.kind == "triangle":
        half_w = (s0 / 2.0) * (s1 / 2.0 - ly) / s1
        inside = (ly >= -s1 / 2) & (np.abs(lx) <= half_w)
    else:
        raise ConfigError(f"unknown kind {shape.kind!r}")
    return inside.astype(np.float64)


def rotate_quarter(h, k=1):
    """Rotate a heightmap by k * 90 degrees counter-clockwise in the (x, y) frame.

    Because rows grow downwards this is ``np.rot90(h, -k)``.
    """
    return np.rot90(h, -k)


def _bbox_overlap(a, b):
    (alo, ahi), (blo, bhi) = a, b
    ov = np.minimum(ahi, bhi) - np.maximum(alo, blo)
    return bool(np.all(ov >= 1.0))


def generate_dr_object(rng: np.random.Generator, G=DEFAULT_G, base_cfg: DistributionConfig = None,
                       max_offset=3.0, attempts=50):
    """Domain-randomization object: pixel-wise max of 2-3 chained primitives.

    Each primitive gets a random center offset; every pair of bounding boxes
    must overlap by at least one pixel on both axes.
    """
    cfg = base_cfg or default_train_config()
    while True:
        n_parts = int(rng.integers(2, 4))
        parts = []
        for _ in range(n_parts):
            for _ in range(attempts):
                s = sample_shape(cfg, rng, G)
                s = ShapeParams(s.kind, s.size, s.rotation,
                                tuple(float(v) for v in rng.uniform(-max_offset, max_offset, size=2)))
                if not s.fits(G):
                    continue
                box = s.bbox(G)
                if all(_bbox_overlap(box, p.bbox(G)) for p in parts):
                    parts.append(s)
                    break
            else:
                break
        if len(parts) == n_parts:
            h = np.maximum.reduce([rasterize(p, G) for p in parts])
            if h.any():
                return h


def gaussian_augment(h, sigma, rng: np.random.Generator):
    if sigma < 0:
        raise ConfigError("sigma must be >= 0")
    if sigma == 0:
        return np.array(h, dtype=np.float64, copy=True)
    return np.clip(h + rng.normal(0.0, sigma, size=np.shape(h)), 0.0, 1.0)


def default_train_config():
    return DistributionConfig(
        label="train",
        ranges={
            "rectangle": {"width": [4.0, 8.0], "height": [4.0, 8.0]},
            "ellipse": {"a": [2.5, 4.5], "b": [2.5, 4.5]},
            "triangle": {"base": [5.0, 9.0], "height": [5.0, 9.0]},
        },
        weights={k: 1.0 / 3 for k in KINDS},
    )


def default_test_config():
    return DistributionConfig(
        label="test",
        ranges={
            "rectangle": {"width": [2.5, 4.0], "height": [7.0, 10.0]},
            "ellipse": {"a": [1.5, 2.5], "b": [4.5, 6.0]},
            "triangle": {"base": [3.0, 5.0], "height": [8.0, 11.0]},
        },
        weights={k: 1.0 / 3 for k in KINDS},
    )


# -- datasets ---------------------------------------------------------------

@dataclass
class Dataset:
    """Heightmaps plus a manifest of (id, provenance, seed) rows; the growing set S."""

    heightmaps: np.ndarray  # (n, G, G)
    entries: list  # dicts with id, provenance, seed (+ optional flags)

    @classmethod
    def empty(cls, G=DEFAULT_G):
        return cls(np.zeros((0, G, G)), [])

    def __len__(self):
        return len(self.entries)

    @property
    def G(self):
        return self.heightmaps.shape[1]

    def add(self, maps, provenance, seeds, flags=None):
        maps = np.asarray(maps, dtype=np.float64).reshape(-1, self.G, self.G)
        if len(maps) == 0:
            return
        if not np.all((maps >= 0) & (maps <= 1)):
            raise ValueError("heightmap values outside [0, 1]")
        start = len(self.entries)
        for i in range(len(maps)):
            entry = {"id": f"env-{start + i:06d}", "provenance": provenance, "seed": int(seeds[i])}
            if flags and flags[i]:
                entry["flags"] = list(flags[i])
            self.entries.append(entry)
        self.heightmaps = np.concatenate([self.heightmaps, maps])

    def save(self, path, meta=None):
        """``<path>.json`` manifest plus ``<path>.bin`` of little-endian float64 maps."""
        path = Path(path)
        manifest = {
            "format": "dragen-dataset/1",
            "tool_version": __version__,
            "grid_size": self.G,
            "count": len(self),
            "entries": self.entries,
        }
        manifest.update(meta or {})
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp_json = path.with_suffix(".json.tmp")
        tmp_bin = path.with_suffix(".bin.tmp")
        tmp_json.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        tmp_bin.write_bytes(self.heightmaps.astype("<f8").tobytes())
        tmp_bin.replace(path.with_suffix(".bin"))
        tmp_json.replace(path.with_suffix(".json"))

    @classmethod
    def load(cls, path):
        path = Path(path)
        manifest = json.loads(path.with_suffix(".json").read_text())
        G = manifest["grid_size"]
        maps = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
        maps = maps.astype(np.float64).reshape(-1, G, G)
        if len(maps) != len(manifest["entries"]):
            raise ValueError(f"{path}: {len(maps)} maps but {len(manifest['entries'])} entries")
        ds = cls(maps, manifest["entries"])
        ds.meta = {k: v for k, v in manifest.items() if k != "entries"}
        return ds


def sample_dataset(cfg: DistributionConfig, n, seed, G=DEFAULT_G) -> Dataset:
    """``n`` environments, each from its own child seed of ``seed``."""
    ds = Dataset.empty(G)
    children = np.random.SeedSequence(seed).spawn(n)
    maps, seeds = [], []
    for i, child in enumerate(children):
        shape = sample_shape(cfg, np.random.default_rng(child), G)
        maps.append(rasterize(shape, G))
        seeds.append(child.generate_state(1)[0])
    ds.add(np.array(maps).reshape(n, G, G), "sampled", seeds)
    return ds
