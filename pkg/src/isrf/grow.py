"""Bilateral spatio-semantic region growing and the interactive stroke
session (positive/negative strokes, undo, replayable stroke logs).

One growing step scores every occupied voxel x against its 3x3x3
neighborhood Omega_x:

    score(x) = (1/W) * sum_{x_i in Omega_x} M(x_i)
               * exp(-|phi_i - phi_x|^2 / (2 sigma_phi^2))
               * exp(-|x_i - x|^2    / (2 sigma_s^2))

with W the same sum without the mask term and spatial distances in voxel
units.  Voxels scoring at least tau join the mask; the output is unioned
with the input so growth is monotone (the raw update alone can erase
isolated seed voxels).  Iterating to a fixed point grows a seed to the
object boundary, where the feature kernel collapses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .errors import EmptyHistoryError, GeometryMismatchError, InvalidInputError
from .field import VoxelField
from .grid import Bitmap3D, bitmap_subtract, bitmap_union
from .render import Camera
from .semantic import DEFAULT_K, collect_stroke_features, kmeans, nnfm_seed


@dataclass
class BilateralParams:
    sigma_phi: float = 5.0
    sigma_s: float = 5.0
    tau: float = 0.2
    max_iters: int = 10
    occupancy_alpha: float = 0.1
    k: int = DEFAULT_K
    seed_threshold: float | None = None  # None -> percentile rule
    kmeans_seed: int = 0

    def __post_init__(self):
        if self.sigma_phi <= 0 or self.sigma_s <= 0:
            raise InvalidInputError("bandwidths must be positive")
        if not 0 < self.tau < 1:
            raise InvalidInputError("tau must lie in (0, 1)")

    def to_json(self) -> dict:
        return {
            "sigma_phi": self.sigma_phi, "sigma_s": self.sigma_s, "tau": self.tau,
            "max_iters": self.max_iters, "occupancy_alpha": self.occupancy_alpha,
            "k": self.k, "seed_threshold": self.seed_threshold,
            "kmeans_seed": self.kmeans_seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "BilateralParams":
        return cls(**{k: obj[k] for k in cls.__dataclass_fields__ if k in obj})


_OFFSETS = [(dz, dy, dx) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


def bilateral_step(field: VoxelField, mask: Bitmap3D, params: BilateralParams) -> Bitmap3D:
    """One Jacobi growing iteration; reads only the input mask snapshot."""
    if mask.geometry != field.geometry:
        raise GeometryMismatchError("mask geometry does not match the field")
    nx, ny, nz = field.geometry.resolution
    feats = field.node_features().reshape(nz, ny, nx, -1)
    m = mask.bits.astype(np.float64)
    num = np.zeros((nz, ny, nx))
    den = np.zeros((nz, ny, nx))
    inv2sp = 1.0 / (2.0 * params.sigma_phi**2)
    inv2ss = 1.0 / (2.0 * params.sigma_s**2)
    for dz, dy, dx in _OFFSETS:
        # overlapping interior windows: dst gets contributions from src = dst + offset
        dst = (slice(max(0, -dz), nz - max(0, dz)),
               slice(max(0, -dy), ny - max(0, dy)),
               slice(max(0, -dx), nx - max(0, dx)))
        src = (slice(max(0, dz), nz - max(0, -dz)),
               slice(max(0, dy), ny - max(0, -dy)),
               slice(max(0, dx), nx - max(0, -dx)))
        diff = feats[src] - feats[dst]
        g_phi = np.exp(-np.sum(diff * diff, axis=-1) * inv2sp)
        g_s = np.exp(-float(dx * dx + dy * dy + dz * dz) * inv2ss)
        w = g_phi * g_s
        num[dst] += m[src] * w
        den[dst] += w
    score = np.zeros_like(num)
    np.divide(num, den, out=score, where=den > 0)
    occupied = field.occupancy(params.occupancy_alpha).reshape(nz, ny, nx)
    grown = occupied & (score >= params.tau)
    return Bitmap3D(field.geometry, mask.bits | grown)


def grow(field: VoxelField, mask: Bitmap3D, params: BilateralParams):
    """Iterate bilateral_step until no voxel changes or max_iters is hit.
    Returns (final mask, number of mask-changing iterations)."""
    current = mask
    for it in range(params.max_iters):
        nxt = bilateral_step(field, current, params)
        if nxt == current:
            return current, it
        current = nxt
    return current, params.max_iters


@dataclass
class Stroke:
    camera: Camera
    polyline: list  # [(u, v), ...] pixel coordinates
    radius: int = 4
    polarity: str = "positive"

    def __post_init__(self):
        if len(self.polyline) < 1:
            raise InvalidInputError("a stroke needs at least one point")
        if self.radius < 1:
            raise InvalidInputError("brush radius must be >= 1")
        if self.polarity not in ("positive", "negative"):
            raise InvalidInputError(f"polarity must be positive or negative, got {self.polarity!r}")

    def to_json(self, params: BilateralParams | None = None) -> dict:
        rec = {
            "camera": self.camera.to_json(),
            "polyline": [[float(u), float(v)] for u, v in self.polyline],
            "radius": self.radius,
            "polarity": self.polarity,
        }
        if params is not None:
            rec["params"] = params.to_json()
        return rec

    @classmethod
    def from_json(cls, obj: dict) -> "Stroke":
        return cls(
            camera=Camera.from_json(obj["camera"]),
            polyline=[tuple(p) for p in obj["polyline"]],
            radius=int(obj.get("radius", 4)),
            polarity=obj.get("polarity", "positive"),
        )


def rasterize_stroke(stroke: Stroke):
    """Deterministic pixel set of the stroke: an 8-connected walk along the
    polyline with a disk stamp at every step, deduplicated, clipped to the
    image, sorted row-major."""
    r = stroke.radius
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    disk = np.stack([dx[dx * dx + dy * dy <= r * r], dy[dx * dx + dy * dy <= r * r]], axis=1)
    pts = [np.asarray(p, dtype=np.float64) for p in stroke.polyline]
    centers = []
    for a, b in zip(pts, pts[1:] or [pts[0]]):
        steps = int(np.ceil(np.abs(b - a).max())) + 1
        for t in np.linspace(0.0, 1.0, steps):
            centers.append(np.rint(a + t * (b - a)).astype(np.int64))
    if not centers:
        centers = [np.rint(pts[0]).astype(np.int64)]
    centers = np.unique(np.stack(centers), axis=0)
    pix = (centers[:, None, :] + disk[None, :, :]).reshape(-1, 2)
    cam = stroke.camera
    keep = (pix[:, 0] >= 0) & (pix[:, 0] < cam.width) & (pix[:, 1] >= 0) & (pix[:, 1] < cam.height)
    pix = np.unique(pix[keep], axis=0)
    order = np.lexsort((pix[:, 0], pix[:, 1]))
    return pix[order]


@dataclass
class SessionEntry:
    stroke: Stroke
    params: BilateralParams
    grown: Bitmap3D
    result: Bitmap3D
    iterations: int


@dataclass
class SegmentationSession:
    """Ordered stroke history with mask snapshots supporting exact undo."""

    field: VoxelField
    decoder: "object | None" = None
    history: list = dc_field(default_factory=list)

    @property
    def current_mask(self) -> Bitmap3D:
        if self.history:
            return self.history[-1].result
        return Bitmap3D(self.field.geometry)

    def grow_stroke(self, stroke: Stroke, params: BilateralParams) -> tuple[Bitmap3D, int]:
        """Seed-and-grow for one stroke, independent of the current mask."""
        pixels = rasterize_stroke(stroke)
        feats = collect_stroke_features(self.field, stroke.camera, pixels, self.decoder)
        k = min(params.k, len(feats))
        exemplars = kmeans(feats, k=k, seed=params.kmeans_seed)
        seed = nnfm_seed(self.field, exemplars, threshold=params.seed_threshold,
                         occupancy_alpha=params.occupancy_alpha)
        return grow(self.field, seed, params)


def apply_stroke(session: SegmentationSession, stroke: Stroke,
                 params: BilateralParams | None = None) -> SegmentationSession:
    """Positive strokes union their grown region into the mask; negative
    strokes subtract theirs (b AND (b AND b_n)').  On error the session is
    unchanged."""
    params = params or BilateralParams()
    grown, iters = session.grow_stroke(stroke, params)
    current = session.current_mask
    if stroke.polarity == "positive":
        result = bitmap_union(current, grown)
    else:
        result = bitmap_subtract(current, grown)
    session.history.append(SessionEntry(stroke, params, grown, result, iters))
    return session


def continue_growth(session: SegmentationSession, extra_iters: int,
                    params: BilateralParams | None = None) -> tuple[Bitmap3D, int]:
    """Grow the current combined mask further; recorded as a history entry
    (a pseudo-stroke keeps undo uniform)."""
    params = params or BilateralParams()
    p = BilateralParams(**{**params.to_json(), "max_iters": extra_iters})
    grown, iters = grow(session.field, session.current_mask, p)
    if session.history:
        last = session.history[-1]
        entry = SessionEntry(last.stroke, p, grown, grown, iters)
    else:
        entry = SessionEntry(None, p, grown, grown, iters)
    session.history.append(entry)
    return grown, iters


def undo(session: SegmentationSession) -> SegmentationSession:
    if not session.history:
        raise EmptyHistoryError("nothing to undo")
    session.history.pop()
    return session


# ------------------------------------------------------------- replay files

REPLAY_VERSION = 1


def save_replay(path, strokes_with_params) -> None:
    """``strokes_with_params``: iterable of (Stroke, BilateralParams)."""
    records = [s.to_json(p) for s, p in strokes_with_params]
    Path(path).write_text(json.dumps({"version": REPLAY_VERSION, "strokes": records}, indent=1))


def load_replay(path):
    obj = json.loads(Path(path).read_text())
    if obj.get("version") != REPLAY_VERSION:
        raise InvalidInputError(f"unsupported replay version {obj.get('version')!r}")
    out = []
    for rec in obj["strokes"]:
        params = BilateralParams.from_json(rec["params"]) if rec.get("params") else None
        out.append((Stroke.from_json(rec), params))
    return out


def replay_session(field, decoder, strokes_with_params,
                   default_params: BilateralParams | None = None) -> SegmentationSession:
    """Headless reproduction of a recorded interactive session."""
    session = SegmentationSession(field, decoder)
    for stroke, params in strokes_with_params:
        apply_stroke(session, stroke, params or default_params)
    return session
