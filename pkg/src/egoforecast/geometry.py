"""Camera geometry on the court: 2D projection of head poses, gaze-ray
triangulation, cylindrical stabilization and label-image rendering.

Conventions
-----------
Court coordinates are metric with the origin at a corner, ``x`` along the
court width and ``y`` along its length, ``z`` up. A camera looks along its
optical axis ``r``; ``r_x`` points to the image right and ``r_y`` down.

The cylindrical grid is indexed by ``(theta, h)``: ``theta`` is an azimuth
measured from the camera heading (the horizontal part of ``r``) and ``h`` is
the height on a unit-radius cylinder around the camera center, so the world
ray of a grid cell is ``(cos(psi + theta), sin(psi + theta), h)`` with
``psi`` the heading angle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DegenerateGaze, GridMismatch, ParallelGazes

TWO_PI = 2.0 * math.pi
FEET = 0.3048

DEFAULT_CAMERA_HEIGHT = 1.7
DEFAULT_CYLINDER_RADIUS = 0.4
DEFAULT_CYLINDER_HEIGHT = 1.9
LABEL_SATURATION = 0.9
LABEL_VALUE = 0.9
COURT_MARGIN = 3.0


def wrap_angle(a):
    """Wrap angles to ``[0, 2*pi)``."""
    out = np.mod(a, TWO_PI)
    # np.mod returns exactly 2*pi for tiny negative inputs
    out = np.where(out >= TWO_PI, 0.0, out)
    return float(out) if out.ndim == 0 else out


def circular_difference(a, b):
    """Absolute circular difference between angles, in ``[0, pi]``."""
    d = np.abs(np.mod(np.asarray(a, dtype=float) - np.asarray(b, dtype=float), TWO_PI))
    return np.minimum(d, TWO_PI - d)


def heading(v) -> float:
    v = np.asarray(v, dtype=float)
    return math.atan2(v[1], v[0])


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class Court:
    width: float = 50 * FEET
    length: float = 94 * FEET

    def contains(self, p, margin: float = 0.0) -> bool:
        x, y = float(p[0]), float(p[1])
        return -margin <= x <= self.width + margin and -margin <= y <= self.length + margin

    @property
    def center(self) -> np.ndarray:
        return np.array([self.width / 2.0, self.length / 2.0])


@dataclass(frozen=True, eq=False)
class PlayerState:
    position: np.ndarray
    gaze: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))
    player_id: int = 0

    def __post_init__(self):
        g = np.asarray(self.gaze, dtype=float).reshape(2)
        n = np.linalg.norm(g)
        if not abs(n - 1.0) <= 1e-6:
            raise ValueError(f"gaze must be a unit vector, got norm {n}")
        object.__setattr__(self, "gaze", g / n)
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(2))
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float).reshape(2))
        object.__setattr__(self, "player_id", int(self.player_id))
        if not np.all(np.isfinite(self.position)) or not Court().contains(self.position, COURT_MARGIN):
            raise ValueError(f"position {self.position} is off the court by more than {COURT_MARGIN} m")

    @property
    def gaze_angle(self) -> float:
        return heading(self.gaze)


@dataclass(frozen=True, eq=False)
class CameraPose:
    center: np.ndarray
    rx: np.ndarray
    ry: np.ndarray
    r: np.ndarray
    focal: float = 320.0
    cx: float = 319.5
    cy: float = 239.5
    width: int = 640
    height: int = 480

    def __post_init__(self):
        for name in ("center", "rx", "ry", "r"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))
        R = np.stack([self.rx, self.ry, self.r])
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
            raise ValueError("camera axes must be orthonormal")
        if self.focal <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("focal length and image size must be positive")

    @property
    def rotation(self) -> np.ndarray:
        """World-to-camera rotation (rows are the camera axes)."""
        return np.stack([self.rx, self.ry, self.r])

    @property
    def heading(self) -> float:
        return math.atan2(self.r[1], self.r[0])

    def project(self, directions):
        """Project world ray directions to pixel coordinates.

        Returns ``(u, v, in_front)``; ``u, v`` are meaningless where the ray
        points behind the camera.
        """
        d = np.asarray(directions, dtype=float)
        depth = d @ self.r
        in_front = depth > 0
        safe = np.where(in_front, depth, 1.0)
        u = self.cx + self.focal * (d @ self.rx) / safe
        v = self.cy + self.focal * (d @ self.ry) / safe
        return u, v, in_front

    def pixel_rays(self) -> np.ndarray:
        """World directions through every pixel center, shape (height, width, 3)."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(float)
        xn = (u - self.cx) / self.focal
        yn = (v - self.cy) / self.focal
        return xn[..., None] * self.rx + yn[..., None] * self.ry + self.r


def look_pose(center, forward, up=(0.0, 0.0, 1.0), **intrinsics) -> CameraPose:
    """Camera at ``center`` looking along ``forward`` with image-up near ``up``."""
    r = unit(forward)
    rx = np.cross(r, np.asarray(up, dtype=float))
    n = np.linalg.norm(rx)
    if n < 1e-12:
        raise ValueError("forward is parallel to up")
    rx /= n
    ry = np.cross(r, rx)
    return CameraPose(np.asarray(center, dtype=float), rx, ry, r, **intrinsics)


def pose_from_state(state: PlayerState, height: float = DEFAULT_CAMERA_HEIGHT, **intrinsics) -> CameraPose:
    """Lift a 2D player state to a level head camera at ``height``."""
    g = state.gaze
    return look_pose([state.position[0], state.position[1], height], [g[0], g[1], 0.0], **intrinsics)


def project_to_court(pose: CameraPose, previous=None, dt: float = 1.0, player_id: int = 0) -> PlayerState:
    r12 = pose.r[:2]
    n = float(np.linalg.norm(r12))
    if n <= 1e-6:
        raise DegenerateGaze("optical axis is (nearly) vertical")
    position = pose.center[:2].copy()
    if previous is None:
        velocity = np.zeros(2)
    else:
        velocity = (position - np.asarray(previous, dtype=float)) / dt
    return PlayerState(position, r12 / n, velocity, player_id)


class Triangulation(NamedTuple):
    point: np.ndarray
    behind: np.ndarray  # per input ray, True where the point lies behind its origin


def triangulate_attention(states: Sequence[PlayerState]) -> Triangulation:
    """Least-squares intersection of the players' gaze lines.

    Points behind a gaze origin are flagged, not rejected.
    """
    if len(states) < 2:
        raise ParallelGazes("need at least two gaze rays")
    P = np.array([s.position for s in states])
    G = np.array([s.gaze for s in states])
    proj = np.eye(2)[None] - G[:, :, None] * G[:, None, :]
    A = proj.sum(axis=0)
    b = np.einsum("nij,nj->i", proj, P)
    if np.linalg.eigvalsh(A)[0] <= 1e-10:
        raise ParallelGazes("gaze directions are parallel")
    point = np.linalg.solve(A, b)
    behind = np.einsum("ni,ni->n", point - P, G) < 0
    return Triangulation(point, behind)


@dataclass(frozen=True)
class Cylinder:
    center: tuple
    radius: float = DEFAULT_CYLINDER_RADIUS
    height: float = DEFAULT_CYLINDER_HEIGHT
    gaze: tuple = (1.0, 0.0)
    player_id: int = 0

    def __post_init__(self):
        if self.radius <= 0 or self.height <= 0:
            raise ValueError("cylinder radius and height must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "gaze", tuple(float(c) for c in self.gaze))


@dataclass(frozen=True)
class GridSpec:
    theta_min: float = -math.radians(60.0)
    theta_max: float = math.radians(60.0)
    n_cols: int = 256
    h_min: float = -1.5
    h_max: float = 1.0
    n_rows: int = 128

    @property
    def theta_step(self) -> float:
        return (self.theta_max - self.theta_min) / self.n_cols

    @property
    def h_step(self) -> float:
        return (self.h_max - self.h_min) / self.n_rows

    @property
    def shape(self) -> tuple:
        return (self.n_rows, self.n_cols)

    def thetas(self) -> np.ndarray:
        return self.theta_min + (np.arange(self.n_cols) + 0.5) * self.theta_step

    def heights(self) -> np.ndarray:
        # row 0 is the top of the cylinder
        return self.h_max - (np.arange(self.n_rows) + 0.5) * self.h_step

    def directions(self, psi: float) -> np.ndarray:
        """World directions of every cell for a camera heading ``psi``; (rows, cols, 3)."""
        th = psi + self.thetas()
        hh = self.heights()
        out = np.empty((self.n_rows, self.n_cols, 3))
        out[..., 0] = np.cos(th)[None, :]
        out[..., 1] = np.sin(th)[None, :]
        out[..., 2] = hh[:, None]
        return out

    def cell_of(self, theta: float, h: float):
        """Grid cell containing ``(theta, h)``, or None outside the grid."""
        j = math.floor((theta - self.theta_min) / self.theta_step)
        i = math.floor((self.h_max - h) / self.h_step)
        if 0 <= i < self.n_rows and 0 <= j < self.n_cols:
            return i, j
        return None


@dataclass(frozen=True, eq=False)
class StabilizedImage:
    grid: GridSpec
    pixels: np.ndarray  # (rows, cols, channels), NaN where empty

    @property
    def empty(self) -> np.ndarray:
        return np.isnan(self.pixels).any(axis=-1)


@dataclass(frozen=True, eq=False)
class LabelImage:
    """Per-cell HSV label; ``owner`` holds the visible player id or -1."""

    grid: GridSpec
    hsv: np.ndarray  # (rows, cols, 3)
    owner: np.ndarray  # (rows, cols) int

    @property
    def foreground(self) -> np.ndarray:
        return self.owner >= 0


def bilinear_sample(image: np.ndarray, u: np.ndarray, v: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Sample ``image`` (H, W, C) at float pixel coords; NaN where invalid or outside."""
    H, W = image.shape[:2]
    img = image if image.ndim == 3 else image[..., None]
    inside = valid & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    uu = np.where(inside, u, 0.0)
    vv = np.where(inside, v, 0.0)
    u0 = np.minimum(np.floor(uu).astype(int), W - 2) if W > 1 else np.zeros_like(uu, dtype=int)
    v0 = np.minimum(np.floor(vv).astype(int), H - 2) if H > 1 else np.zeros_like(vv, dtype=int)
    fu = (uu - u0)[..., None]
    fv = (vv - v0)[..., None]
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    out = (
        img[v0, u0] * (1 - fu) * (1 - fv)
        + img[v0, u1] * fu * (1 - fv)
        + img[v1, u0] * (1 - fu) * fv
        + img[v1, u1] * fu * fv
    )
    out[~inside] = np.nan
    return out


def cylindrical_warp(image: np.ndarray, pose: CameraPose, grid: GridSpec = GridSpec()) -> StabilizedImage:
    """Resample a pinhole image onto the camera-centered cylinder."""
    image = np.asarray(image, dtype=float)
    if image.shape[:2] != (pose.height, pose.width):
        raise ValueError("image size does not match camera intrinsics")
    z = grid.directions(pose.heading)
    u, v, in_front = pose.project(z)
    return StabilizedImage(grid, bilinear_sample(image, u, v, in_front))


def ray_cylinder_entry(origin, directions: np.ndarray, cyl: Cylinder) -> np.ndarray:
    """Smallest positive ray parameter entering the solid cylinder; inf on a miss.

    The cylinder stands on the court (``0 <= z <= height``).
    """
    o = np.asarray(origin, dtype=float)
    d = np.asarray(directions, dtype=float)
    ox, oy = o[0] - cyl.center[0], o[1] - cyl.center[1]
    dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]
    r2 = cyl.radius * cyl.radius

    a = dx * dx + dy * dy
    bq = ox * dx + oy * dy
    c = ox * ox + oy * oy - r2
    disc = bq * bq - a * c
    flat = a <= 1e-300
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(np.maximum(disc, 0.0))
        lo = np.where(flat, -np.inf if c < 0 else np.inf, (-bq - sq) / np.where(flat, 1.0, a))
        hi = np.where(flat, np.inf if c < 0 else -np.inf, (-bq + sq) / np.where(flat, 1.0, a))
    miss = (~flat & (disc <= 0)) | (flat & (c >= 0))

    # vertical slab 0 <= z <= height
    oz = o[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (0.0 - oz) / dz
        t1 = (cyl.height - oz) / dz
    zlo = np.where(dz == 0, -np.inf if 0 <= oz <= cyl.height else np.inf, np.minimum(t0, t1))
    zhi = np.where(dz == 0, np.inf if 0 <= oz <= cyl.height else -np.inf, np.maximum(t0, t1))

    enter = np.maximum(lo, zlo)
    leave = np.minimum(hi, zhi)
    hit = ~miss & (enter < leave) & (enter > 0)
    return np.where(hit, enter, np.inf)


def render_label_image(
    ego: CameraPose,
    others: Sequence[Cylinder],
    ego_gaze,
    grid: GridSpec = GridSpec(),
) -> LabelImage:
    """Render the social label image seen from ``ego`` on the cylindrical grid."""
    z = grid.directions(ego.heading)
    best = np.full(grid.shape, np.inf)
    owner = np.full(grid.shape, -1, dtype=int)
    hue = np.zeros(grid.shape)
    ego_angle = heading(ego_gaze)
    for cyl in others:
        lam = ray_cylinder_entry(ego.center, z, cyl)
        closer = lam < best
        best = np.where(closer, lam, best)
        owner = np.where(closer, cyl.player_id, owner)
        hue = np.where(closer, wrap_angle(heading(cyl.gaze) - ego_angle), hue)
    hsv = np.zeros(grid.shape + (3,))
    fg = owner >= 0
    hsv[..., 0] = np.where(fg, hue, 0.0)
    hsv[..., 1] = np.where(fg, LABEL_SATURATION, 0.0)
    hsv[..., 2] = np.where(fg, LABEL_VALUE, 0.0)
    return LabelImage(grid, hsv, owner)


def label_distance(a: LabelImage, b: LabelImage) -> float:
    """Frobenius distance between label images with circular hue difference."""
    if a.grid != b.grid or a.hsv.shape != b.hsv.shape:
        raise GridMismatch("label images use different grids")
    dh = circular_difference(a.hsv[..., 0], b.hsv[..., 0])
    ds = a.hsv[..., 1] - b.hsv[..., 1]
    dv = a.hsv[..., 2] - b.hsv[..., 2]
    return float(math.sqrt(float(np.sum(dh * dh) + np.sum(ds * ds) + np.sum(dv * dv))))


def cylinders_from_states(states: Sequence[PlayerState], radius=DEFAULT_CYLINDER_RADIUS, height=DEFAULT_CYLINDER_HEIGHT):
    return [Cylinder(tuple(s.position), radius, height, tuple(s.gaze), s.player_id) for s in states]


def rigid_transform_2d(points, angle: float, translation) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    R = np.array([[c, -s], [s, c]])
    return np.asarray(points, dtype=float) @ R.T + np.asarray(translation, dtype=float)
