"""Equilibrium measures in reduced coordinates.

A :class:`MeasureSpec` describes a probability measure on R^p (the reduced
coordinates of the equilibrium set). :func:`discretize` turns it into a
weighted point cloud, :func:`embed_measure` lifts a cloud into state space and
:func:`rasterize` deposits a cloud onto a regular grid for display.

Sampling uses the counter-based Philox generator, keyed by the seed and a
digest of the spec, so identical (spec, n, mode, seed) give identical clouds
on every platform, while distinct specs draw from distinct streams.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import DimensionError, EmptySupportError
from .linsys import embed

DISKS = "uniform_disk_mixture"
GAUSSIANS = "gaussian_mixture"
GRID = "grid_density"
POINTS = "point_cloud"
KINDS = (DISKS, GAUSSIANS, GRID, POINTS)


def _box(domain, p=None):
    box = np.atleast_2d(np.asarray(domain, dtype=float))
    if box.ndim != 2 or box.shape[1] != 2 or (p is not None and box.shape[0] != p):
        raise DimensionError(f"domain must be a ({p or 'p'}, 2) array of [lo, hi] rows")
    if not np.all(box[:, 1] > box[:, 0]):
        raise DimensionError("domain box must have hi > lo on every axis")
    return box


@dataclass(frozen=True)
class Component:
    center: tuple
    weight: float
    radius: Optional[float] = None
    covariance: Optional[tuple] = None


@dataclass(frozen=True, eq=False)
class MeasureSpec:
    """Declarative probability measure on a p-dimensional domain box."""

    kind: str
    domain: np.ndarray
    components: tuple = ()
    values: Optional[np.ndarray] = None
    points: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown measure kind {self.kind!r}")
        box = _box(self.domain)
        object.__setattr__(self, "domain", box)
        p = box.shape[0]
        if self.kind in (DISKS, GAUSSIANS):
            if not self.components:
                raise ValueError("mixture needs at least one component")
            w = np.array([c.weight for c in self.components], dtype=float)
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ValueError("component weights must be nonnegative and sum to 1")
            for c in self.components:
                if len(c.center) != p:
                    raise DimensionError("component center does not match domain dimension")
                if self.kind == DISKS and not (c.radius and c.radius > 0):
                    raise ValueError("disk radius must be positive")
                if self.kind == GAUSSIANS:
                    cov = self._cov(c)
                    if np.linalg.eigvalsh(cov)[0] <= 0:
                        raise ValueError("covariance must be positive definite")
        elif self.kind == GRID:
            vals = np.asarray(self.values, dtype=float)
            if vals.ndim != p or np.any(vals < 0) or vals.sum() <= 0:
                raise ValueError("grid density needs a nonnegative p-dimensional array with mass")
            total = vals.sum()
            # normalize once; re-dividing a normalized array is not idempotent in floats
            object.__setattr__(self, "values", vals if abs(total - 1.0) <= 1e-12 else vals / total)
        else:
            pts = np.atleast_2d(np.asarray(self.points, dtype=float))
            n = pts.shape[0]
            wts = np.full(n, 1.0 / n) if self.weights is None else np.asarray(self.weights, dtype=float)
            if pts.shape[1] != p or wts.shape != (n,):
                raise DimensionError("point cloud does not match domain dimension")
            if np.any(wts < 0) or abs(wts.sum() - 1.0) > 1e-12:
                raise ValueError("point weights must be nonnegative and sum to 1")
            object.__setattr__(self, "points", pts)
            object.__setattr__(self, "weights", wts)

    @property
    def p(self):
        return self.domain.shape[0]

    def _cov(self, c):
        cov = np.atleast_2d(np.asarray(c.covariance, dtype=float))
        if cov.size == 1:
            cov = float(cov.ravel()[0]) * np.eye(self.p)
        return cov

    # constructors ---------------------------------------------------------

    @classmethod
    def disks(cls, centers, radius, weights=None, domain=None):
        centers = [tuple(float(v) for v in c) for c in centers]
        k = len(centers)
        radii = np.broadcast_to(np.asarray(radius, dtype=float), (k,))
        weights = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=float)
        comps = tuple(Component(c, float(w), radius=float(r)) for c, r, w in zip(centers, radii, weights))
        if domain is None:
            domain = [[0.0, 1.0]] * len(centers[0])
        return cls(DISKS, domain, comps)

    @classmethod
    def gaussians(cls, centers, covariances, weights=None, domain=None):
        centers = [tuple(float(v) for v in c) for c in centers]
        k = len(centers)
        weights = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=float)
        comps = tuple(
            Component(c, float(w), covariance=_freeze(cov))
            for c, cov, w in zip(centers, covariances, weights)
        )
        if domain is None:
            domain = [[0.0, 1.0]] * len(centers[0])
        return cls(GAUSSIANS, domain, comps)

    @classmethod
    def point_cloud(cls, points, weights=None, domain=None):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if domain is None:
            lo, hi = pts.min(axis=0), pts.max(axis=0)
            pad = np.where(hi > lo, 0.0, 0.5)
            domain = np.stack([lo - pad, hi + pad], axis=1)
        return cls(POINTS, domain, points=pts, weights=weights)

    @classmethod
    def grid_density(cls, values, domain):
        return cls(GRID, domain, values=values)

    # serialization --------------------------------------------------------

    def to_dict(self):
        out = {"kind": self.kind, "domain": self.domain.tolist()}
        if self.kind in (DISKS, GAUSSIANS):
            comps = []
            for c in self.components:
                item = {"center": list(c.center), "weight": c.weight}
                if self.kind == DISKS:
                    item["radius"] = c.radius
                else:
                    item["covariance"] = np.asarray(c.covariance, dtype=float).tolist()
                comps.append(item)
            out["components"] = comps
        elif self.kind == GRID:
            out["values"] = self.values.tolist()
        else:
            out["points"] = self.points.tolist()
            out["weights"] = self.weights.tolist()
        return out

    @classmethod
    def from_dict(cls, data):
        kind = data["kind"]
        domain = data["domain"]
        if kind == DISKS:
            comps = tuple(
                Component(tuple(map(float, c["center"])), float(c["weight"]), radius=float(c["radius"]))
                for c in data["components"]
            )
            return cls(kind, domain, comps)
        if kind == GAUSSIANS:
            comps = tuple(
                Component(
                    tuple(map(float, c["center"])),
                    float(c["weight"]),
                    covariance=_freeze(c["covariance"]),
                )
                for c in data["components"]
            )
            return cls(kind, domain, comps)
        if kind == GRID:
            return cls(kind, domain, values=np.asarray(data["values"], dtype=float))
        if kind == POINTS:
            return cls(kind, domain, points=data["points"], weights=data.get("weights"))
        raise ValueError(f"unknown measure kind {kind!r}")

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")

    # density evaluation ---------------------------------------------------

    def density(self, X):
        """Density (w.r.t. Lebesgue on R^p, untruncated) at rows of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        p = self.p
        out = np.zeros(X.shape[0])
        if self.kind == DISKS:
            for c in self.components:
                vol = math.pi ** (p / 2) / math.gamma(p / 2 + 1) * c.radius**p
                inside = np.sum((X - np.asarray(c.center)) ** 2, axis=1) <= c.radius**2
                out += inside * (c.weight / vol)
        elif self.kind == GAUSSIANS:
            for c in self.components:
                cov = self._cov(c)
                L = np.linalg.cholesky(cov)
                z = np.linalg.solve(L, (X - np.asarray(c.center)).T)
                norm = (2 * math.pi) ** (p / 2) * np.prod(np.diag(L))
                out += c.weight * np.exp(-0.5 * np.sum(z * z, axis=0)) / norm
        elif self.kind == GRID:
            res = np.array(self.values.shape)
            h = (self.domain[:, 1] - self.domain[:, 0]) / res
            idx = np.floor((X - self.domain[:, 0]) / h).astype(int)
            ok = np.all((idx >= 0) & (idx < res), axis=1)
            idx = np.clip(idx, 0, res - 1)
            out = np.where(ok, self.values[tuple(idx.T)] / np.prod(h), 0.0)
        else:
            raise ValueError("point clouds have no density")
        return out


def _freeze(cov):
    arr = np.asarray(cov, dtype=float)
    if arr.ndim == 0:
        return float(arr)
    return tuple(map(tuple, np.atleast_2d(arr).tolist()))


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Weighted point cloud in reduced coordinates."""

    points: np.ndarray
    weights: np.ndarray
    domain: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        n = pts.shape[0]
        w = np.asarray(self.weights, dtype=float)
        if n < 1 or w.shape != (n,):
            raise DimensionError("need n >= 1 points and one weight per point")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        if self.domain is not None:
            box = _box(self.domain, pts.shape[1])
            if np.any(pts < box[:, 0]) or np.any(pts > box[:, 1]):
                raise ValueError("points lie outside the declared domain box")
            object.__setattr__(self, "domain", box)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def p(self):
        return self.points.shape[1]

    @property
    def equal_weights(self):
        return bool(np.all(self.weights == self.weights[0]))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            write_cloud_csv(fh, self.weights, [self.points], ["x"])

    @classmethod
    def from_csv(cls, path, domain=None):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 1:], data[:, 0], domain)


def write_cloud_csv(fh, weights, blocks, prefixes):
    """Write ``w, <prefix>_1..`` columns; floats in round-trip precision."""
    header = ["w"]
    for blk, pre in zip(blocks, prefixes):
        sep = "" if len(pre) == 1 else "_"
        header += [f"{pre}{sep}{k + 1}" for k in range(blk.shape[1])]
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(header)
    rows = np.column_stack([weights] + list(blocks))
    for row in rows:
        writer.writerow([repr(float(v)) for v in row])


def _generator(spec, seed):
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, spec.digest() & 0xFFFFFFFF, spec.digest() >> 32])
    return np.random.Generator(np.random.Philox(ss))


def _inside(box, X):
    return np.all((X >= box[:, 0]) & (X <= box[:, 1]), axis=1)


def _rejection(draw, accept, count, max_empty=20):
    # draw(b) -> candidates, accept(X) -> mask; gives up after max_empty fruitless batches
    out, have, empty = [], 0, 0
    batch = max(16, count)
    while have < count:
        X = draw(batch)
        X = X[accept(X)]
        if X.shape[0] == 0:
            empty += 1
            if empty > max_empty:
                raise EmptySupportError("support does not intersect the domain box")
            batch = min(2 * batch, 1 << 16)
            continue
        empty = 0
        out.append(X)
        have += X.shape[0]
    return np.concatenate(out)[:count]


def _sample_montecarlo(spec, n, rng):
    box, p = spec.domain, spec.p
    if spec.kind in (DISKS, GAUSSIANS):
        w = np.array([c.weight for c in spec.components])
        counts = rng.multinomial(n, w / w.sum())
        parts = []
        for c, k in zip(spec.components, counts):
            if k == 0:
                continue
            center = np.asarray(c.center)
            if spec.kind == DISKS:
                r = c.radius

                def draw(b, center=center, r=r):
                    return center + r * rng.uniform(-1.0, 1.0, size=(b, p))

                def accept(X, center=center, r=r):
                    return (np.sum((X - center) ** 2, axis=1) <= r * r) & _inside(box, X)

            else:
                L = np.linalg.cholesky(spec._cov(c))

                def draw(b, center=center, L=L):
                    return center + rng.standard_normal((b, p)) @ L.T

                def accept(X):
                    return _inside(box, X)

            parts.append(_rejection(draw, accept, int(k)))
        return np.concatenate(parts)

    # grid density: pick cells by mass, then uniform within the cell
    res = np.array(spec.values.shape)
    h = (box[:, 1] - box[:, 0]) / res
    flat = spec.values.ravel()
    cells = rng.choice(flat.size, size=n, p=flat)
    idx = np.stack(np.unravel_index(cells, spec.values.shape), axis=1)
    return box[:, 0] + (idx + rng.uniform(size=(n, p))) * h


def grid_cell_masses(spec, resolution, sub=8):
    """Mass of each cell of a regular grid over the spec's domain (truncated, unnormalized).

    Cells are integrated with a ``sub``-point midpoint rule per axis.
    """
    box, p = spec.domain, spec.p
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (p,))
    h = (box[:, 1] - box[:, 0]) / res
    offs = (np.arange(sub) + 0.5) / sub
    fine = [box[a, 0] + (np.arange(res[a])[:, None] + offs[None, :]).ravel() * h[a] for a in range(p)]
    mesh = np.meshgrid(*fine, indexing="ij")
    dens = spec.density(np.stack([m.ravel() for m in mesh], axis=1)).reshape([res[a] * sub for a in range(p)])
    # fold sub-samples back onto cells
    shape = []
    for a in range(p):
        shape += [res[a], sub]
    dens = dens.reshape(shape).sum(axis=tuple(range(1, 2 * p, 2)))
    return dens * np.prod(h) / sub**p


def discretize(spec, n, mode="montecarlo", seed=0):
    """Discretize a measure spec into a :class:`DiscreteMeasure`.

    ``montecarlo`` draws ``n`` i.i.d. equal-weight samples. ``grid`` places
    points at the centers of roughly ``n`` cells covering the domain, keeping
    cells that carry mass, weighted by the mass they hold. Point clouds are
    returned unchanged in both modes.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if spec.kind == POINTS:
        return DiscreteMeasure(spec.points, spec.weights, spec.domain)
    if mode == "montecarlo":
        X = _sample_montecarlo(spec, int(n), _generator(spec, seed))
        return DiscreteMeasure(X, np.full(X.shape[0], 1.0 / X.shape[0]), spec.domain)
    if mode == "grid":
        p = spec.p
        k = max(1, int(round(n ** (1.0 / p))))
        masses = grid_cell_masses(spec, k)
        if masses.sum() <= 0:
            raise EmptySupportError("support does not intersect the domain box")
        box = spec.domain
        h = (box[:, 1] - box[:, 0]) / k
        idx = np.argwhere(masses > 0)
        pts = box[:, 0] + (idx + 0.5) * h
        w = masses[tuple(idx.T)]
        return DiscreteMeasure(pts, w / w.sum(), box)
    raise ValueError(f"unknown discretization mode {mode!r}")


def embed_measure(dm, es):
    """Lift reduced points to state space; rows lie in ker(A)."""
    return embed(es, dm.points)


@dataclass(frozen=True, eq=False)
class DensityGrid:
    """Cell masses on a regular grid; ``values[i, j]`` is the cell at x-index i, y-index j."""

    values: np.ndarray
    domain: np.ndarray
    clipped_mass: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def resolution(self):
        return self.values.shape

    @property
    def mass(self):
        return float(self.values.sum())

    def image(self):
        """Row-major image, top row = largest second coordinate."""
        v = self.values
        if v.ndim == 1:
            return v[None, :]
        return v.T[::-1]

    def to_pgm(self, path):
        img = self.image()
        peak = img.max()
        scaled = np.zeros(img.shape) if peak <= 0 else img / peak
        data = np.round(scaled * 65535).astype(">u2")
        h, w = data.shape
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
            fh.write(data.tobytes())

    def to_csv(self, path):
        np.savetxt(path, self.image(), delimiter=",", fmt="%.17g")


def read_pgm(path):
    """Read a 16-bit binary PGM written by :meth:`DensityGrid.to_pgm`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    maxval = int(parts[2])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(parts[3], dtype=dtype).reshape(h, w)


def _axis_weights(u, n):
    # linear interpolation weights onto cell centers 0..n-1, clamped at the edges
    if n == 1:
        z = np.zeros(u.shape, dtype=int)
        return z, z, np.ones_like(u), np.zeros_like(u)
    i0 = np.clip(np.floor(u), 0, n - 2).astype(int)
    f = np.clip(u - i0, 0.0, 1.0)
    return i0, i0 + 1, 1.0 - f, f


def rasterize(dm, resolution, bandwidth=0.0, domain=None):
    """Deposit a point cloud onto a grid (p <= 2) by bilinear splatting.

    Mass outside the domain box is dropped and reported as ``clipped_mass``.
    A positive ``bandwidth`` (in domain units) applies Gaussian smoothing with
    reflecting edges, which keeps the total mass.
    """
    box = _box(dm.domain if domain is None else domain, dm.p)
    p = dm.p
    if p > 2:
        raise DimensionError("rasterize supports p <= 2")
    res = tuple(int(r) for r in np.broadcast_to(np.asarray(resolution), (p,)))
    h = (box[:, 1] - box[:, 0]) / np.array(res)
    X, w = dm.points, dm.weights
    keep = _inside(box, X)
    clipped = float(w[~keep].sum())
    X, w = X[keep], w[keep]

    u = (X - box[:, 0]) / h - 0.5
    if p == 1:
        a0, a1, wa0, wa1 = _axis_weights(u[:, 0], res[0])
        idx = np.concatenate([a0, a1])
        mass = np.concatenate([w * wa0, w * wa1])
    else:
        a0, a1, wa0, wa1 = _axis_weights(u[:, 0], res[0])
        b0, b1, wb0, wb1 = _axis_weights(u[:, 1], res[1])
        idx = np.concatenate([a0 * res[1] + b0, a0 * res[1] + b1, a1 * res[1] + b0, a1 * res[1] + b1])
        mass = np.concatenate([w * wa0 * wb0, w * wa0 * wb1, w * wa1 * wb0, w * wa1 * wb1])
    values = np.bincount(idx, weights=mass, minlength=int(np.prod(res))).reshape(res)

    if bandwidth and bandwidth > 0:
        total = values.sum()
        values = ndimage.gaussian_filter(values, sigma=bandwidth / h, mode="reflect")
        s = values.sum()
        if s > 0:
            values *= total / s
    meta = {"bandwidth": float(bandwidth or 0.0), "n": int(dm.n)}
    return DensityGrid(values=values, domain=box, clipped_mass=clipped, meta=meta)
