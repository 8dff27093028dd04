"""Procedural vehicle-like solids with exact analytic SDF oracles, plus surface and SDF sampling.

A shape is a body box, a cabin box on top and four wheel cylinders, all in
the canonical object frame (x forward, y up, z across). The primitives are
merged with an exponential smooth-min. Each primitive SDF is exact; the
smooth-min of 1-Lipschitz functions is again 1-Lipschitz and lies below the
hard union by at most ``log(n) / k`` (``n`` primitives), so the blended field
is a distance *bound* whose zero set is within that margin of the hard union.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

UNIT_BALL_MARGIN = 0.9


@dataclass
class FamilyConfig:
    """Parameter ranges (min, max) of the shape family, in raw units before normalization."""

    body_length: tuple = (0.8, 1.0)
    body_height: tuple = (0.14, 0.24)
    body_width: tuple = (0.34, 0.46)
    cabin_length: tuple = (0.3, 0.6)
    cabin_height: tuple = (0.1, 0.2)
    cabin_width_ratio: tuple = (0.75, 0.95)
    cabin_shift: tuple = (-0.25, 0.15)
    wheel_radius: tuple = (0.14, 0.22)
    wheel_halfwidth: tuple = (0.06, 0.1)
    wheelbase_ratio: tuple = (0.55, 0.75)
    corner_rounding: tuple = (0.02, 0.08)
    smooth_union_k: tuple = (50.0, 90.0)

    def __post_init__(self):
        for name, rng in asdict(self).items():
            lo, hi = rng
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                raise ValueError(f"invalid range for {name}: {rng}")
            setattr(self, name, (float(lo), float(hi)))
        if self.smooth_union_k[0] <= 0 or self.wheel_radius[0] < 0 or self.corner_rounding[0] < 0:
            raise ValueError("smooth_union_k must be > 0 and radii non-negative")

    def to_dict(self):
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) for k, v in d.items()})


@dataclass
class ProceduralShape:
    """Parameters of one solid in its canonical frame (fits in the unit ball)."""

    body_halfextents: np.ndarray
    cabin_halfextents: np.ndarray
    cabin_offset: np.ndarray
    wheel_radius: float
    wheel_positions: np.ndarray
    corner_rounding: float
    smooth_union_k: float
    wheel_halfwidth: float = 0.0
    seed: int = field(default=-1, compare=False)

    def __post_init__(self):
        self.body_halfextents = np.asarray(self.body_halfextents, dtype=np.float64).reshape(3)
        self.cabin_halfextents = np.asarray(self.cabin_halfextents, dtype=np.float64).reshape(3)
        self.cabin_offset = np.asarray(self.cabin_offset, dtype=np.float64).reshape(3)
        self.wheel_positions = np.asarray(self.wheel_positions, dtype=np.float64).reshape(-1, 3)
        self.wheel_radius = float(self.wheel_radius)
        self.wheel_halfwidth = float(self.wheel_halfwidth)
        self.corner_rounding = float(self.corner_rounding)
        self.smooth_union_k = float(self.smooth_union_k)
        if self.smooth_union_k <= 0:
            raise ValueError("smooth_union_k must be positive")
        if self.corner_rounding < 0:
            raise ValueError("corner_rounding must be non-negative")

    @classmethod
    def sphere(cls, radius=1.0):
        """Degenerate member: a rounded box with rounding equal to its half-extent is a ball."""
        r = float(radius)
        return cls(
            body_halfextents=[r, r, r],
            cabin_halfextents=[0.0, 0.0, 0.0],
            cabin_offset=[0.0, 0.0, 0.0],
            wheel_radius=0.0,
            wheel_positions=np.zeros((0, 3)),
            corner_rounding=r,
            smooth_union_k=1.0,
        )

    @property
    def has_cabin(self):
        return bool(np.all(self.cabin_halfextents > 0))

    @property
    def has_wheels(self):
        return self.wheel_radius > 0 and self.wheel_halfwidth > 0 and len(self.wheel_positions) > 0

    @property
    def n_primitives(self):
        return 1 + int(self.has_cabin) + (len(self.wheel_positions) if self.has_wheels else 0)

    @property
    def union_error_bound(self):
        """Largest gap between the smooth union and the hard union of the primitives."""
        n = self.n_primitives
        return 0.0 if n == 1 else float(np.log(n) / self.smooth_union_k)

    def bounding_radius(self):
        """Upper bound on the distance from the origin to any point of the solid."""
        radii = [np.linalg.norm(self.body_halfextents)]
        if self.has_cabin:
            radii.append(np.linalg.norm(np.abs(self.cabin_offset) + self.cabin_halfextents))
        if self.has_wheels:
            for c in self.wheel_positions:
                radii.append(np.hypot(np.hypot(abs(c[0]), abs(c[1])) + self.wheel_radius, abs(c[2]) + self.wheel_halfwidth))
        return float(max(radii) + self.union_error_bound)

    def scaled(self, factor):
        f = float(factor)
        return ProceduralShape(
            body_halfextents=self.body_halfextents * f,
            cabin_halfextents=self.cabin_halfextents * f,
            cabin_offset=self.cabin_offset * f,
            wheel_radius=self.wheel_radius * f,
            wheel_positions=self.wheel_positions * f,
            corner_rounding=self.corner_rounding * f,
            smooth_union_k=self.smooth_union_k / f,
            wheel_halfwidth=self.wheel_halfwidth * f,
            seed=self.seed,
        )

    def to_dict(self):
        return {
            "body_halfextents": self.body_halfextents.tolist(),
            "cabin_halfextents": self.cabin_halfextents.tolist(),
            "cabin_offset": self.cabin_offset.tolist(),
            "wheel_radius": self.wheel_radius,
            "wheel_positions": self.wheel_positions.tolist(),
            "corner_rounding": self.corner_rounding,
            "smooth_union_k": self.smooth_union_k,
            "wheel_halfwidth": self.wheel_halfwidth,
            "seed": self.seed,
        }

    def sdf(self, p):
        return oracle_sdf(self, p)

    def contains(self, p):
        return inside_primitives(self, p)


def make_shape(seed, family_config=None):
    """Deterministically draw one family member and normalize it into the unit ball."""
    cfg = family_config if family_config is not None else FamilyConfig()
    if isinstance(cfg, dict):
        cfg = FamilyConfig.from_dict(cfg)
    rng = np.random.default_rng(int(seed))

    def draw(name):
        lo, hi = getattr(cfg, name)
        return float(rng.uniform(lo, hi))

    bx, by, bz = draw("body_length"), draw("body_height"), draw("body_width")
    cx, cy = draw("cabin_length"), draw("cabin_height")
    cz = bz * draw("cabin_width_ratio")
    shift = draw("cabin_shift")
    wr, wh = draw("wheel_radius"), draw("wheel_halfwidth")
    wb = bx * draw("wheelbase_ratio")
    rounding = draw("corner_rounding")
    k = draw("smooth_union_k")

    # cabin sits on the body roof, slightly sunk in so the union is connected
    cabin_offset = np.array([shift * bx, by + 0.8 * cy, 0.0])
    wz = bz - 0.5 * wh
    wy = -by
    wheels = np.array([[wb, wy, wz], [wb, wy, -wz], [-wb, wy, wz], [-wb, wy, -wz]])
    rounding = min(rounding, 0.9 * min(by, cy, bz))

    shape = ProceduralShape(
        body_halfextents=[bx, by, bz],
        cabin_halfextents=[cx, cy, cz],
        cabin_offset=cabin_offset,
        wheel_radius=wr,
        wheel_positions=wheels,
        corner_rounding=rounding,
        smooth_union_k=k,
        wheel_halfwidth=wh,
        seed=int(seed),
    )
    return shape.scaled(UNIT_BALL_MARGIN / shape.bounding_radius())


def _rounded_box_sdf(p, half, r):
    q = np.abs(p) - (half - r)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside - r


def _cylinder_z_sdf(p, center, radius, halfwidth):
    d = p - center
    radial = np.hypot(d[:, 0], d[:, 1]) - radius
    axial = np.abs(d[:, 2]) - halfwidth
    dd = np.stack([radial, axial], axis=-1)
    return np.minimum(np.max(dd, axis=-1), 0.0) + np.linalg.norm(np.maximum(dd, 0.0), axis=-1)


def primitive_sdfs(shape, p):
    """Exact SDF of each primitive, shape (n_points, n_primitives)."""
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    cols = [_rounded_box_sdf(p, shape.body_halfextents, shape.corner_rounding)]
    if shape.has_cabin:
        r = min(shape.corner_rounding, float(np.min(shape.cabin_halfextents)))
        cols.append(_rounded_box_sdf(p - shape.cabin_offset, shape.cabin_halfextents, r))
    if shape.has_wheels:
        for c in shape.wheel_positions:
            cols.append(_cylinder_z_sdf(p, c, shape.wheel_radius, shape.wheel_halfwidth))
    return np.stack(cols, axis=-1)


def oracle_sdf(shape, p):
    """Signed distance bound of ``shape`` at points ``p`` (negative inside)."""
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    d = primitive_sdfs(shape, p.reshape(-1, 3))
    if d.shape[1] == 1:
        s = d[:, 0]
    else:
        k = shape.smooth_union_k
        s = -logsumexp(-k * d, axis=1) / k
    return float(s[0]) if single else s


def oracle_gradient(shape, p, h=1e-6):
    """Central-difference gradient of the oracle field, shape (n, 3)."""
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    g = np.empty_like(p)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        g[:, i] = (oracle_sdf(shape, p + e) - oracle_sdf(shape, p - e)) / (2 * h)
    return g


def inside_primitives(shape, p):
    """Membership in the hard union by direct geometric tests (independent of the SDF code)."""
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)

    def in_rounded_box(x, half, r):
        inner = half - r
        closest = np.clip(x, -inner, inner)
        return np.sum((x - closest) ** 2, axis=1) <= r * r

    inside = in_rounded_box(p, shape.body_halfextents, shape.corner_rounding)
    if shape.has_cabin:
        r = min(shape.corner_rounding, float(np.min(shape.cabin_halfextents)))
        inside |= in_rounded_box(p - shape.cabin_offset, shape.cabin_halfextents, r)
    if shape.has_wheels:
        for c in shape.wheel_positions:
            d = p - c
            inside |= (d[:, 0] ** 2 + d[:, 1] ** 2 <= shape.wheel_radius**2) & (np.abs(d[:, 2]) <= shape.wheel_halfwidth)
    return inside


def ray_parity_inside(shape, p, direction=(0.5773502691896258, 0.5773502691896258, 0.5773502691896258), n_steps=4000, length=3.0):
    """Inside test by counting membership transitions along a dense ray to the exterior.

    The ray leaves the bounding ball, so an odd transition count means the
    start point is inside. Membership comes from :func:`inside_primitives`.
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    ts = np.linspace(0.0, length, n_steps)
    crossings = np.zeros(len(p), dtype=np.int64)
    prev = inside_primitives(shape, p)
    for t in ts[1:]:
        cur = inside_primitives(shape, p + t * d)
        crossings += cur != prev
        prev = cur
    return crossings % 2 == 1


def project_to_surface(shape, p, max_iter=50, tol=1e-9):
    """Newton projection onto the zero level set; returns (points, converged mask)."""
    p = np.array(p, dtype=np.float64).reshape(-1, 3)
    done = np.zeros(len(p), dtype=bool)
    for _ in range(max_iter):
        active = ~done
        if not active.any():
            break
        q = p[active]
        s = oracle_sdf(shape, q)
        g = oracle_gradient(shape, q)
        gn2 = np.maximum(np.sum(g * g, axis=1), 1e-12)
        q = q - (s / gn2)[:, None] * g
        p[active] = q
        done[active] = np.abs(oracle_sdf(shape, q)) < tol
    return p, done


def sample_surface_points(shape, n, seed, band=0.02, max_rounds=100):
    """Approximately area-uniform surface samples: uniform rejection into a thin shell, then projection."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    R = max(shape.bounding_radius(), 1e-3) * 1.05
    out = []
    have = 0
    batch = 4096
    for _ in range(max_rounds):
        cand = rng.uniform(-R, R, size=(batch, 3))
        s = oracle_sdf(shape, cand)
        shell = cand[np.abs(s) < band]
        # size the next batch from the observed shell acceptance rate
        rate = max(len(shell), 1) / batch
        batch = int(min(max(1.3 * (n - have) / rate, 4096), 2_000_000))
        if len(shell) == 0:
            continue
        shell = shell[: int(1.2 * (n - have)) + 16]
        proj, ok = project_to_surface(shape, shell)
        proj = proj[ok]
        proj = proj[np.abs(oracle_sdf(shape, proj)) < 1e-6]
        out.append(proj)
        have += len(proj)
        if have >= n:
            break
    pts = np.concatenate(out, axis=0)
    if len(pts) < n:
        raise RuntimeError("surface sampling failed to collect enough points")
    return pts[:n]


def sample_sdf_training_pairs(shape, n, seed, near_fraction=0.8, near_sigma=0.02, cube_halfwidth=1.0):
    """DeepSDF-style training samples: perturbed surface points plus uniform cube points.

    Returns ``(points, labels)`` with labels taken from :func:`oracle_sdf`.
    """
    if not 0.0 <= near_fraction <= 1.0:
        raise ValueError("near_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n_near = int(round(n * near_fraction))
    n_far = n - n_near
    parts = []
    if n_near:
        surf = sample_surface_points(shape, n_near, int(rng.integers(2**62)))
        parts.append(surf + rng.normal(scale=near_sigma, size=surf.shape))
    if n_far:
        parts.append(rng.uniform(-cube_halfwidth, cube_halfwidth, size=(n_far, 3)))
    pts = np.concatenate(parts, axis=0) if parts else np.zeros((0, 3))
    return pts, oracle_sdf(shape, pts)


@dataclass
class CorpusManifest:
    """Seeds of the train and held-out splits; shapes are regenerated from these, never stored."""

    train_seeds: list
    heldout_seeds: list
    family: FamilyConfig = field(default_factory=FamilyConfig)
    version: int = 1

    def __post_init__(self):
        self.train_seeds = [int(s) for s in self.train_seeds]
        self.heldout_seeds = [int(s) for s in self.heldout_seeds]
        if set(self.train_seeds) & set(self.heldout_seeds):
            raise ValueError("train and held-out splits overlap")
        if isinstance(self.family, dict):
            self.family = FamilyConfig.from_dict(self.family)

    def train_shapes(self):
        return [make_shape(s, self.family) for s in self.train_seeds]

    def heldout_shapes(self):
        return [make_shape(s, self.family) for s in self.heldout_seeds]

    def to_json(self):
        doc = {
            "format": "flowsdf-corpus",
            "version": self.version,
            "family": self.family.to_dict(),
            "train_seeds": self.train_seeds,
            "heldout_seeds": self.heldout_seeds,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("format") != "flowsdf-corpus":
            raise ValueError("not a corpus manifest")
        return cls(doc["train_seeds"], doc["heldout_seeds"], FamilyConfig.from_dict(doc["family"]), doc["version"])

    @classmethod
    def from_master_seed(cls, master_seed, n_train, n_heldout, family=None):
        """Draw disjoint shape seeds from a master seed."""
        rng = np.random.default_rng(master_seed)
        seeds = rng.choice(2**31 - 1, size=n_train + n_heldout, replace=False)
        return cls(seeds[:n_train].tolist(), seeds[n_train:].tolist(), family or FamilyConfig())


def canonical_box(shape, n=20000, seed=0):
    """Axis-aligned extents (min, max) of the solid in its canonical frame, from dense surface samples."""
    pts = sample_surface_points(shape, n, seed)
    return pts.min(axis=0), pts.max(axis=0)


__all__ = [
    "FamilyConfig",
    "ProceduralShape",
    "make_shape",
    "oracle_sdf",
    "oracle_gradient",
    "inside_primitives",
    "ray_parity_inside",
    "project_to_surface",
    "sample_surface_points",
    "sample_sdf_training_pairs",
    "CorpusManifest",
]
