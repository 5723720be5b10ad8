"""Procedural categories and pose-annotated partial-view instances.

Each category is an analytic surface with outward normals, expressed in a
canonical object frame whose origin is the centre of the shape's bounding
box and whose maximum radius is 1. Instances are produced by jittering the
shape, placing it in front of a pinhole camera at the origin looking down +z,
culling back faces and adding depth noise.
"""

import functools
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .exceptions import DegenerateView, InvalidCount
from .ply import read_ply, write_ply

CATEGORIES = ("cyl", "bowl", "box", "mug")
ROTATIONAL = geo.SymmetrySpec("rotational", np.array([0.0, 1.0, 0.0]))
REFLECT_X = geo.SymmetrySpec("reflectional", np.array([1.0, 0.0, 0.0]))
SYMMETRY = {"cyl": ROTATIONAL, "bowl": ROTATIONAL, "box": REFLECT_X, "mug": REFLECT_X}

MANIFEST_VERSION = 1
_TEMPLATE_DENSE = 4096
_TEMPLATE_SEED = 20240601
_MIN_VISIBLE = 64


# -- analytic surfaces -----------------------------------------------------------
#
# Each part sampler takes (rng, n) and returns (points, normals) in the raw
# (pre-normalization) frame. Parts are mixed in proportion to surface area.


def _cylinder_side(radius, y0, y1, inward=False):
    def sample(rng, n):
        phi = rng.uniform(0, 2 * np.pi, n)
        y = rng.uniform(y0, y1, n)
        nrm = np.stack([np.cos(phi), np.zeros(n), np.sin(phi)], axis=1)
        pts = nrm * radius
        pts[:, 1] = y
        return pts, -nrm if inward else nrm

    return sample, 2 * np.pi * radius * (y1 - y0)


def _disk(radius, y, up, r_inner=0.0):
    def sample(rng, n):
        phi = rng.uniform(0, 2 * np.pi, n)
        rad = np.sqrt(rng.uniform(r_inner**2, radius**2, n))
        pts = np.stack([rad * np.cos(phi), np.full(n, y), rad * np.sin(phi)], axis=1)
        nrm = np.zeros((n, 3))
        nrm[:, 1] = 1.0 if up else -1.0
        return pts, nrm

    return sample, np.pi * (radius**2 - r_inner**2)


def _cone(r0, y0, r1, y1):
    slant = np.hypot(r0 - r1, y1 - y0)

    def sample(rng, n):
        phi = rng.uniform(0, 2 * np.pi, n)
        # Area-uniform along the slant: radius varies linearly with height.
        u = rng.uniform(0, 1, n)
        if r0 != r1:
            rad = np.sqrt(r0**2 + u * (r1**2 - r0**2))
            s = (rad - r0) / (r1 - r0)
        else:
            rad, s = np.full(n, r0), u
        y = y0 + s * (y1 - y0)
        radial = np.stack([np.cos(phi), np.zeros(n), np.sin(phi)], axis=1)
        pts = radial * rad[:, None]
        pts[:, 1] = y
        nrm = radial * (y1 - y0) / slant
        nrm[:, 1] = (r0 - r1) / slant
        return pts, nrm

    return sample, np.pi * (r0 + r1) * slant


def _hemisphere(radius, inward=False):
    """Lower half (y <= 0) of a sphere centred at the origin."""

    def sample(rng, n):
        v = rng.standard_normal((n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        v[:, 1] = -np.abs(v[:, 1])
        return v * radius, -v if inward else v

    return sample, 2 * np.pi * radius**2


def _cuboid(half, transform=None):
    """Closed cuboid with half extents ``half``; optional (R, t) placement."""
    half = np.asarray(half, dtype=np.float64)
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]]) * 8.0

    def sample(rng, n):
        axis = rng.choice(3, size=n, p=areas / areas.sum())
        sign = rng.choice((-1.0, 1.0), size=n)
        pts = rng.uniform(-1, 1, (n, 3)) * half
        pts[np.arange(n), axis] = sign * half[axis]
        nrm = np.zeros((n, 3))
        nrm[np.arange(n), axis] = sign
        if transform is not None:
            R, t = transform
            pts = pts @ R.T + t
            nrm = nrm @ R.T
        return pts, nrm

    return sample, areas.sum()


def _torus_arc(center, major, minor, phi0, phi1):
    """Tube of radius ``minor`` around an arc in the y-z plane (x = 0)."""
    center = np.asarray(center, dtype=np.float64)

    def sample(rng, n):
        phi = rng.uniform(phi0, phi1, n)
        theta = rng.uniform(0, 2 * np.pi, n)
        radial = np.stack([np.zeros(n), np.sin(phi), np.cos(phi)], axis=1)
        ring = center + major * radial
        nrm = np.cos(theta)[:, None] * radial
        nrm[:, 0] = np.sin(theta)
        return ring + minor * nrm, nrm

    # Area of the outer/inner parts differs; the mean-radius approximation is fine
    # for mixing proportions.
    return sample, 2 * np.pi * minor * major * (phi1 - phi0)


def _parts(category):
    if category == "cyl":
        # Bottle: flat bottom, straight body, conical shoulder, open neck.
        return [
            _disk(0.5, -1.0, up=False),
            _cylinder_side(0.5, -1.0, 0.4),
            _cone(0.5, 0.4, 0.2, 0.7),
            _cylinder_side(0.2, 0.7, 1.0),
        ]
    if category == "bowl":
        return [
            _hemisphere(1.0),
            _hemisphere(0.92, inward=True),
            _disk(1.0, 0.0, up=True, r_inner=0.92),
        ]
    if category == "box":
        # Laptop: thin base plus a screen hinged at the back edge, opened 110 deg.
        base_half = np.array([0.6, 0.03, 0.42])
        tilt = np.deg2rad(20.0)
        screen_half = np.array([0.6, 0.42, 0.02])
        R = geo.axis_angle_matrix([1.0, 0.0, 0.0], -tilt)
        hinge = np.array([0.0, 0.03, -0.42])
        t = hinge + R @ np.array([0.0, screen_half[1], screen_half[2]])
        return [_cuboid(base_half), _cuboid(screen_half, (R, t))]
    if category == "mug":
        return [
            _cylinder_side(0.5, -0.5, 0.5),
            _cylinder_side(0.46, -0.46, 0.5, inward=True),
            _disk(0.5, -0.5, up=False),
            _disk(0.46, -0.46, up=True),
            _disk(0.5, 0.5, up=True, r_inner=0.46),
            _torus_arc([0.0, 0.0, 0.5], 0.28, 0.05, -np.pi / 2, np.pi / 2),
        ]
    raise KeyError(f"unknown category {category!r}")


def _raw_bounds(category):
    """Analytic axis-aligned bounds of the raw (pre-normalization) shape."""
    if category == "cyl":
        return np.array([-0.5, -1.0, -0.5]), np.array([0.5, 1.0, 0.5])
    if category == "bowl":
        return np.array([-1.0, -1.0, -1.0]), np.array([1.0, 0.0, 1.0])
    if category == "mug":
        return np.array([-0.5, -0.5, -0.5]), np.array([0.5, 0.5, 0.5 + 0.28 + 0.05])
    if category == "box":
        corners = _extreme_points("box")
        return corners.min(axis=0), corners.max(axis=0)
    raise KeyError(f"unknown category {category!r}")


_RIMS = {
    "cyl": ((0.5, -1.0), (0.5, 0.4), (0.2, 0.7), (0.2, 1.0)),
    "bowl": ((1.0, 0.0), (0.92, 0.0)),
    "mug": ((0.5, -0.5), (0.5, 0.5), (0.46, -0.46), (0.46, 0.5)),
}


def _extreme_points(category):
    """Corners and densely traced rim circles (radius, height) of the raw shape."""
    if category == "box":
        tilt = np.deg2rad(20.0)
        R = geo.axis_angle_matrix([1.0, 0.0, 0.0], -tilt)
        half = np.array([0.6, 0.42, 0.02])
        t = np.array([0.0, 0.03, -0.42]) + R @ np.array([0.0, half[1], half[2]])
        return np.vstack([geo._CORNER_SIGNS * half @ R.T + t,
                          geo._CORNER_SIGNS * np.array([0.6, 0.03, 0.42])])
    phi = np.linspace(0.0, 2 * np.pi, 1 << 16, endpoint=False)
    return np.vstack([np.c_[r * np.cos(phi), np.full_like(phi, y), r * np.sin(phi)]
                      for r, y in _RIMS[category]])


def _sample_raw(category, rng, n):
    parts = _parts(category)
    areas = np.array([a for _, a in parts])
    counts = rng.multinomial(n, areas / areas.sum())
    pts, nrms = [], []
    for (sampler, _), k in zip(parts, counts):
        if k:
            p, q = sampler(rng, k)
            pts.append(p)
            nrms.append(q)
    return np.concatenate(pts), np.concatenate(nrms)


@dataclass(frozen=True)
class _Canonical:
    center: np.ndarray
    scale: float
    extents: np.ndarray


@functools.lru_cache(maxsize=None)
def _canonical(category):
    lo, hi = _raw_bounds(category)
    center = (lo + hi) / 2
    dense, _ = _sample_raw(category, np.random.default_rng(_TEMPLATE_SEED), _TEMPLATE_DENSE)
    # the farthest surface points lie on corners or rim circles, which area sampling misses
    candidates = np.vstack([dense, _extreme_points(category)])
    scale = float(np.linalg.norm(candidates - center, axis=1).max())
    return _Canonical(center, scale, (hi - lo) / scale)


def sample_surface(category, rng, n, axis_scale=(1.0, 1.0, 1.0)):
    """Area-weighted surface samples and unit normals in the canonical frame.

    ``axis_scale`` stretches the shape about its origin; normals follow the
    inverse-transpose of that stretch.
    """
    canon = _canonical(category)
    pts, nrm = _sample_raw(category, rng, n)
    s = np.asarray(axis_scale, dtype=np.float64)
    pts = (pts - canon.center) / canon.scale * s
    nrm = nrm / s
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return pts, nrm


def canonical_extents(category):
    """Bounding-box extents of the unit-normalized canonical shape."""
    return _canonical(category).extents.copy()


@dataclass(frozen=True)
class CategoryTemplate:
    category: str
    points: np.ndarray
    symmetry: geo.SymmetrySpec

    @property
    def n_points(self):
        return len(self.points)


@functools.lru_cache(maxsize=None)
def _template_points(category, n_points):
    dense, _ = sample_surface(category, np.random.default_rng(_TEMPLATE_SEED), _TEMPLATE_DENSE)
    # float32-representable so the template survives a PLY round trip unchanged
    pts = geo.fps_sample(dense, n_points)
    out = pts.astype(np.float32).astype(np.float64)
    over = np.linalg.norm(out, axis=1) > 1.0
    out[over] = (pts[over] * (1.0 - 1e-6)).astype(np.float32)
    return out


def make_template(category, n_points=36):
    """Category template: FPS subset of a fixed dense sample of the canonical shape."""
    if category not in SYMMETRY:
        raise KeyError(f"unknown category {category!r}")
    if not 1 <= n_points <= _TEMPLATE_DENSE:
        raise InvalidCount(f"n_points must be in [1, {_TEMPLATE_DENSE}], got {n_points}")
    pts = _template_points(category, n_points).copy()
    pts.setflags(write=False)
    return CategoryTemplate(category, pts, SYMMETRY[category])


# -- ground truth ------------------------------------------------------------------


@dataclass(frozen=True)
class GroundTruth:
    """Normalized-frame training targets derived from an observed cloud."""

    observed: np.ndarray        # P, (N_o, 3)
    record: geo.NormalizationRecord
    symmetric: np.ndarray       # P', (N_o, 3)
    deformed_template: np.ndarray  # K = R_o K_c, (N_k, 3)
    coarse_centroid: np.ndarray  # r
    offsets: np.ndarray         # V, (2 N_o, 3), centralized frame
    center: np.ndarray          # object centre in the normalized frame
    size: np.ndarray            # s_o / d_o


def compute_ground_truth(cloud, pose, size, template, symmetry):
    """Targets for one observed camera-frame cloud with known pose and size."""
    P, rec = geo.normalize_cloud(cloud)
    sym_cam = pose.apply(geo.make_symmetric_gt(pose.inverse_apply(cloud), symmetry))
    P_sym = (sym_cam - rec.centroid) / rec.scale
    G_prime = np.concatenate([P, P_sym])
    r = G_prime.mean(axis=0)
    center = (pose.t - rec.centroid) / rec.scale
    return GroundTruth(
        observed=P,
        record=rec,
        symmetric=P_sym,
        deformed_template=template @ pose.R.T,
        coarse_centroid=r,
        offsets=(center - r) - (G_prime - r),
        center=center,
        size=np.asarray(size, dtype=np.float64) / rec.scale,
    )


@dataclass
class InstanceSample:
    """One synthetic observation with its pose/size annotations.

    ``cloud`` is the observed camera-frame cloud P_o in meters; ``symmetric``
    is its ground-truth symmetric counterpart P' in the same frame.
    """

    category: str
    cloud: np.ndarray
    pose: geo.RigidTransform
    size: np.ndarray
    seed: int
    symmetric: np.ndarray = None
    deformed_template: np.ndarray = None
    offsets: np.ndarray = None
    sample_id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def symmetry(self):
        return SYMMETRY[self.category]

    @property
    def box(self):
        return geo.OrientedBox(self.pose, self.size)

    def ground_truth(self, template=None):
        tpl = make_template(self.category) if template is None else template
        pts = tpl.points if isinstance(tpl, CategoryTemplate) else np.asarray(tpl)
        return compute_ground_truth(self.cloud, self.pose, self.size, pts, self.symmetry)

    def gt_dict(self):
        return {
            "category": self.category,
            "R": self.pose.R.reshape(-1).tolist(),
            "t": self.pose.t.tolist(),
            "s": np.asarray(self.size).tolist(),
            "seed": int(self.seed),
        }


def _truncated_noise(rng, shape, sigma):
    """Isotropic Gaussian noise with vector norm capped at 3 sigma by rejection."""
    noise = rng.normal(0.0, sigma, shape)
    if sigma == 0:
        return noise
    while True:
        bad = np.linalg.norm(noise, axis=1) > 3 * sigma
        if not bad.any():
            return noise
        noise[bad] = rng.normal(0.0, sigma, (int(bad.sum()), 3))


def generate_instance(template, seed, sigma=0.002, jitter=0.2, n_points=1024,
                      n_dense=3072, dropout=0.1, max_attempts=20):
    """Render one partial-view instance of ``template.category``.

    The observed cloud is rounded to float32 precision so that it survives a
    PLY round trip bit-for-bit; every ground truth is derived from the rounded
    cloud.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    category = template.category if isinstance(template, CategoryTemplate) else str(template)
    tpl = template if isinstance(template, CategoryTemplate) else make_template(category)
    rng = np.random.default_rng(seed)
    extents = canonical_extents(category)

    for _ in range(max_attempts):
        stretch = rng.uniform(1 - jitter, 1 + jitter, 3)
        if SYMMETRY[category].kind is geo.SymmetryKind.ROTATIONAL:
            # equal extents perpendicular to the axis keep IoU spin-invariant
            stretch[2] = stretch[0]
        diameter = rng.uniform(0.1, 0.3)
        factor = diameter / np.linalg.norm(extents * stretch)
        axis_scale = stretch * factor
        size = extents * axis_scale

        R = geo.random_rotation(rng)
        t = np.array([rng.uniform(-0.25, 0.25), rng.uniform(-0.25, 0.25), rng.uniform(0.6, 1.2)])
        pose = geo.RigidTransform(R, t)

        pts, nrm = sample_surface(category, rng, n_dense, axis_scale)
        cam = pts @ R.T + t
        visible = np.einsum("ij,ij->i", nrm @ R.T, cam) < 0
        keep = visible & (rng.uniform(size=n_dense) >= dropout)
        if keep.sum() >= _MIN_VISIBLE:
            break
    else:
        raise DegenerateView(f"fewer than {_MIN_VISIBLE} visible points after {max_attempts} poses")

    observed = cam[keep]
    observed = observed + _truncated_noise(rng, observed.shape, sigma)
    observed = geo.resample_cloud(observed, n_points, rng)
    observed = observed.astype(np.float32).astype(np.float64)

    sample = InstanceSample(category, observed, pose, size, int(seed))
    gt = sample.ground_truth(tpl)
    sample.symmetric = gt.symmetric * gt.record.scale + gt.record.centroid
    sample.deformed_template = gt.deformed_template
    sample.offsets = gt.offsets
    sample.meta = {"sigma": sigma, "jitter": jitter, "diameter": float(diameter)}
    return sample


# -- datasets on disk ----------------------------------------------------------------

_SPLIT_IDS = {"train": 0, "test": 1, "val": 2}


def sample_seed(seed, split, category, index):
    """Per-sample seed; distinct (split, category, index) give distinct streams."""
    ss = np.random.SeedSequence([int(seed), _SPLIT_IDS[split], CATEGORIES.index(category), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass
class DatasetConfig:
    categories: tuple = CATEGORIES
    n_train: int = 100
    n_test: int = 0
    seed: int = 42
    sigma: float = 0.002
    jitter: float = 0.2
    n_points: int = 1024
    n_template_points: int = 36
    binary: bool = False

    def to_dict(self):
        d = dict(self.__dict__)
        d["categories"] = list(self.categories)
        return d


def _generate_one(args):
    category, n_tpl, seed, sigma, jitter, n_points = args
    return generate_instance(make_template(category, n_tpl), seed, sigma=sigma,
                             jitter=jitter, n_points=n_points)


def build_dataset(out_dir, cfg, workers=1):
    """Generate clouds, per-sample ground truth and a manifest under ``out_dir``.

    Returns the path of ``manifest.json``.
    """
    if cfg.n_train < 1 and cfg.n_test < 1:
        raise InvalidCount("at least one sample is required")
    for c in cfg.categories:
        if c not in SYMMETRY:
            raise KeyError(f"unknown category {c!r}")
    os.makedirs(os.path.join(out_dir, "templates"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "samples"), exist_ok=True)

    categories = []
    for c in cfg.categories:
        tpl = make_template(c, cfg.n_template_points)
        rel = f"templates/{c}.ply"
        write_ply(os.path.join(out_dir, rel), tpl.points, binary=cfg.binary)
        categories.append({"id": c, "template_ply": rel, "n_points": tpl.n_points,
                           "symmetry": tpl.symmetry.to_dict()})

    jobs = []
    for split, count in (("train", cfg.n_train), ("test", cfg.n_test)):
        for c in cfg.categories:
            for i in range(count):
                jobs.append((split, f"{split}_{c}_{i:05d}",
                             (c, cfg.n_template_points, sample_seed(cfg.seed, split, c, i),
                              cfg.sigma, cfg.jitter, cfg.n_points)))

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            generated = list(pool.map(_generate_one, [j[2] for j in jobs], chunksize=16))
    else:
        generated = [_generate_one(j[2]) for j in jobs]

    samples = []
    for (split, sid, _), sample in zip(jobs, generated):
        cloud_rel = f"samples/{sid}.ply"
        gt_rel = f"samples/{sid}.json"
        write_ply(os.path.join(out_dir, cloud_rel), sample.cloud, binary=cfg.binary)
        with open(os.path.join(out_dir, gt_rel), "w") as fh:
            json.dump(sample.gt_dict(), fh, sort_keys=True)
        samples.append({"id": sid, "category": sample.category, "cloud_ply": cloud_rel,
                        "gt_json": gt_rel, "split": split})

    manifest = {"version": MANIFEST_VERSION, "config": cfg.to_dict(),
                "categories": categories, "samples": samples}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path


def load_manifest(path):
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.get('version')}")
    return manifest


def load_templates(manifest_path, n_points=None):
    """Templates named in a manifest; regenerated if ``n_points`` differs."""
    manifest = load_manifest(manifest_path)
    root = os.path.dirname(os.path.abspath(manifest_path))
    out = {}
    for entry in manifest["categories"]:
        spec = geo.SymmetrySpec.from_dict(entry["symmetry"])
        if n_points is None or n_points == entry.get("n_points"):
            pts = read_ply(os.path.join(root, entry["template_ply"]))
            out[entry["id"]] = CategoryTemplate(entry["id"], pts, spec)
        else:
            tpl = make_template(entry["id"], n_points)
            out[entry["id"]] = CategoryTemplate(entry["id"], tpl.points, spec)
    return out


def load_samples(manifest_path, split=None):
    """Samples listed in a manifest as ``InstanceSample`` objects (no cached GT)."""
    manifest = load_manifest(manifest_path)
    root = os.path.dirname(os.path.abspath(manifest_path))
    out = []
    for entry in manifest["samples"]:
        if split is not None and entry["split"] != split:
            continue
        with open(os.path.join(root, entry["gt_json"])) as fh:
            gt = json.load(fh)
        cloud = read_ply(os.path.join(root, entry["cloud_ply"]))
        pose = geo.RigidTransform(np.reshape(gt["R"], (3, 3)), gt["t"])
        out.append(InstanceSample(entry["category"], cloud, pose, np.asarray(gt["s"]),
                                  gt["seed"], sample_id=entry["id"]))
    return out
