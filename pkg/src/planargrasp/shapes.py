"""Procedural planar objects: polygon families, shape-feature codes, splits.

Five shape families (ellipse-like, box-like, L-shaped, capsule-like,
star-like). The star family is held out of training by default and supplies
the unseen-category test split. Every object carries an 8-d analytic feature
code and a 32-point boundary cloud.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .numerics import rng_stream

CATEGORY_NAMES = ("ellipse", "box", "lshape", "capsule", "star")
ELLIPSE, BOX, LSHAPE, CAPSULE, STAR = range(5)

CODE_DIM = 8
CLOUD_POINTS = 32


class DatasetError(ValueError):
    pass


def poly_area(verts: np.ndarray) -> float:
    x, y = verts[:, 0], verts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def poly_centroid(verts: np.ndarray) -> np.ndarray:
    x, y = verts[:, 0], verts[:, 1]
    cross = x * np.roll(y, -1) - np.roll(x, -1) * y
    a = 0.5 * np.sum(cross)
    cx = np.sum((x + np.roll(x, -1)) * cross) / (6.0 * a)
    cy = np.sum((y + np.roll(y, -1)) * cross) / (6.0 * a)
    return np.array([cx, cy])


def poly_perimeter(verts: np.ndarray) -> float:
    edges = np.roll(verts, -1, axis=0) - verts
    return float(np.sum(np.hypot(edges[:, 0], edges[:, 1])))


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew monotone chain; returns CCW hull vertices."""
    pts = points[np.lexsort((points[:, 1], points[:, 0]))]

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2:
                u = out[-1] - out[-2]
                v = p - out[-2]
                if u[0] * v[1] - u[1] * v[0] > 0:
                    break
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def boundary_cloud(verts: np.ndarray, n: int = CLOUD_POINTS) -> np.ndarray:
    """n points evenly spaced by arc length along the polygon boundary."""
    seg = np.roll(verts, -1, axis=0) - verts
    lens = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(lens)])
    total = cum[-1]
    s = np.arange(n) * total / n
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(verts) - 1)
    frac = (s - cum[idx]) / np.maximum(lens[idx], 1e-300)
    return verts[idx] + frac[:, None] * seg[idx]


def shape_code(verts: np.ndarray, cloud: np.ndarray) -> np.ndarray:
    """8-d analytic feature vector: area, perimeter, aspect ratio,
    second-order central moments of the boundary cloud, convexity ratio,
    mean radius. Scaled so every entry is O(1) at desk scale."""
    area = abs(poly_area(verts))
    perim = poly_perimeter(verts)
    centered = cloud - cloud.mean(axis=0)
    cov = centered.T @ centered / len(cloud)
    eigs = np.sort(np.linalg.eigvalsh(cov))
    aspect = float(np.sqrt(max(eigs[1], 1e-300) / max(eigs[0], 1e-300)))
    hull = convex_hull(verts)
    convexity = area / max(abs(poly_area(hull)), 1e-300)
    mean_radius = float(np.mean(np.hypot(centered[:, 0], centered[:, 1])))
    return np.array([
        area * 100.0,
        perim * 10.0,
        min(aspect, 10.0),
        cov[0, 0] * 1e3,
        cov[1, 1] * 1e3,
        cov[0, 1] * 1e3,
        convexity,
        mean_radius * 20.0,
    ])


@dataclass
class ObjectShape:
    """A planar object: CCW polygon, feature code, boundary cloud.

    Vertices are in the object frame with the area centroid at the origin.
    """

    id: int
    category: int
    vertices: np.ndarray
    code: np.ndarray
    point_cloud: np.ndarray

    @property
    def mean_radius(self) -> float:
        return float(np.mean(np.hypot(self.vertices[:, 0], self.vertices[:, 1])))

    @property
    def rest_height(self) -> float:
        """Centroid height when resting on the table at angle 0."""
        return -float(np.min(self.vertices[:, 1]))

    def validate(self) -> None:
        if poly_area(self.vertices) <= 0.0:
            raise DatasetError(f"object {self.id}: polygon not CCW")
        if not np.all(np.isfinite(self.code)):
            raise DatasetError(f"object {self.id}: non-finite code")
        r = self.mean_radius
        if not (0.02 <= r <= 0.12):
            raise DatasetError(f"object {self.id}: radius {r:.3f} out of range")


def _ellipse_verts(rng, n=20):
    a = rng.uniform(0.8, 1.3)
    b = a / rng.uniform(1.0, 1.8)
    phi = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    return np.stack([a * np.cos(phi), b * np.sin(phi)], axis=1)


def _box_verts(rng):
    a = rng.uniform(0.7, 1.2)
    b = a / rng.uniform(1.0, 1.8)
    c = rng.uniform(0.05, 0.25) * min(a, b)  # chamfer
    return np.array([
        [a - c, -b], [a, -b + c], [a, b - c], [a - c, b],
        [-a + c, b], [-a, b - c], [-a, -b + c], [-a + c, -b],
    ])


def _lshape_verts(rng):
    a = rng.uniform(0.8, 1.2)
    b = a / rng.uniform(1.0, 1.5)
    nx = rng.uniform(0.35, 0.55) * a
    ny = rng.uniform(0.35, 0.55) * b
    # rectangle [-a,a]x[-b,b] with the top-right corner notched out
    return np.array([
        [-a, -b], [a, -b], [a, b - 2.0 * ny], [a - 2.0 * nx, b - 2.0 * ny],
        [a - 2.0 * nx, b], [-a, b],
    ])


def _capsule_verts(rng, n_arc=7):
    b = rng.uniform(0.45, 0.7)
    a = b * rng.uniform(1.2, 1.9)  # half-length of the straight section
    right = np.linspace(-np.pi / 2, np.pi / 2, n_arc)
    left = np.linspace(np.pi / 2, 3 * np.pi / 2, n_arc)
    pts = [np.stack([a + b * np.cos(right), b * np.sin(right)], axis=1),
           np.stack([-a + b * np.cos(left), b * np.sin(left)], axis=1)]
    return np.concatenate(pts)


def _star_verts(rng):
    n = int(rng.integers(5, 8))
    inner = rng.uniform(0.68, 0.8)
    phi = np.linspace(0.0, 2.0 * np.pi, 2 * n, endpoint=False)
    r = np.where(np.arange(2 * n) % 2 == 0, 1.0, inner)
    return np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1)


_BUILDERS = {
    ELLIPSE: _ellipse_verts,
    BOX: _box_verts,
    LSHAPE: _lshape_verts,
    CAPSULE: _capsule_verts,
    STAR: _star_verts,
}


def make_shape(object_id: int, category: int, rng: np.random.Generator,
               radius_range=(0.035, 0.08)) -> ObjectShape:
    """Build one object of the given family, rescaled to a target mean radius
    and recentered on its area centroid."""
    verts = _BUILDERS[category](rng)
    target = rng.uniform(*radius_range)
    verts = verts - poly_centroid(verts)
    scale = target / np.mean(np.hypot(verts[:, 0], verts[:, 1]))
    verts = verts * scale
    verts = verts - poly_centroid(verts)
    cloud = boundary_cloud(verts)
    shape = ObjectShape(id=object_id, category=category, vertices=verts,
                        code=shape_code(verts, cloud), point_cloud=cloud)
    shape.validate()
    return shape


@dataclass
class ObjectDataset:
    train: list
    test_seen: list
    test_unseen: list

    def all_objects(self):
        return self.train + self.test_seen + self.test_unseen

    def by_id(self, object_id: int):
        for obj in self.all_objects():
            if obj.id == object_id:
                return obj
        raise KeyError(object_id)

    def check_split_hygiene(self) -> None:
        ids = [o.id for o in self.all_objects()]
        if len(ids) != len(set(ids)):
            raise DatasetError("object id appears in more than one split")


def generate_objects(seed: int, counts: dict, proposal_fn=None,
                     unseen_category: int = STAR,
                     seen_categories=None) -> ObjectDataset:
    """Deterministic dataset with disjoint train / test-seen / test-unseen
    splits; the unseen split uses a family absent from the other two.

    proposal_fn(shape, rng) may veto a shape by raising; vetoed shapes are
    regenerated (bounded attempts).
    """
    for key in ("train", "test_seen", "test_unseen"):
        if counts[key] < 1:
            raise DatasetError(f"counts[{key!r}] must be >= 1")
    if seen_categories is None:
        seen_categories = [c for c in _BUILDERS if c != unseen_category]
    if not seen_categories:
        raise DatasetError("need at least 2 category families")

    def build(n, categories, id_start, stream):
        rng = rng_stream(seed, stream)
        out = []
        next_id = id_start
        while len(out) < n:
            cat = categories[len(out) % len(categories)]
            for _ in range(50):
                shape = make_shape(next_id, cat, rng)
                try:
                    if proposal_fn is not None:
                        proposal_fn(shape, rng)
                except Exception:
                    continue
                out.append(shape)
                break
            else:
                raise DatasetError(f"could not build a valid {cat} shape")
            next_id += 1
        return out, next_id

    train, nid = build(counts["train"], seen_categories, 0, stream=1)
    seen, nid = build(counts["test_seen"], seen_categories, nid, stream=2)
    unseen, _ = build(counts["test_unseen"], [unseen_category], nid, stream=3)
    ds = ObjectDataset(train=train, test_seen=seen, test_unseen=unseen)
    ds.check_split_hygiene()
    return ds


def _shape_record(shape: ObjectShape, split: str, extra: dict) -> dict:
    rec = {
        "id": shape.id,
        "split": split,
        "category": int(shape.category),
        "vertices": shape.vertices.tolist(),
        "code": shape.code.tolist(),
        "point_cloud": shape.point_cloud.tolist(),
    }
    rec.update(extra)
    return rec


def save_dataset(path, dataset: ObjectDataset, proposals=None) -> None:
    """One self-describing JSON record per line; proposals keyed by id."""
    proposals = proposals or {}
    with open(path, "w") as f:
        for split in ("train", "test_seen", "test_unseen"):
            for shape in getattr(dataset, split):
                extra = {}
                if shape.id in proposals:
                    extra["proposal"] = proposals[shape.id].to_record()
                f.write(json.dumps(_shape_record(shape, split, extra)) + "\n")


def load_dataset(path):
    """Returns (ObjectDataset, {id: proposal record or None})."""
    splits = {"train": [], "test_seen": [], "test_unseen": []}
    proposals = {}
    with open(path) as f:
        for line in f:
            rec = json.loads(line)
            shape = ObjectShape(
                id=rec["id"], category=rec["category"],
                vertices=np.array(rec["vertices"]),
                code=np.array(rec["code"]),
                point_cloud=np.array(rec["point_cloud"]))
            splits[rec["split"]].append(shape)
            proposals[shape.id] = rec.get("proposal")
    ds = ObjectDataset(**splits)
    ds.check_split_hygiene()
    return ds, proposals
