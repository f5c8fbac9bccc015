"""Pinhole cameras, ray generation, and volumetric compositing of color,
semantic features, depth, and alpha, with optional bitmap-masked variants.

Sampling is deterministic: uniform midpoints between the ray's bounding-box
entry and exit with step at most half the smallest voxel edge.  Per sample,
opacity is ``alpha_i = 1 - exp(-sigma_i * delta)`` and samples composite
front to back with transmittance ``T_i = prod_{j<i} (1 - alpha_j)``;
remaining transmittance blends with the background color.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .field import Decoder, VoxelField, activate_density, sigmoid
from .grid import Bitmap3D, nearest_node_index

BACKGROUND_WHITE = (1.0, 1.0, 1.0)

MODES = ("rgb", "feature", "depth", "alpha", "mask")


@dataclass(frozen=True)
class Camera:
    """Pinhole camera, +z forward / +x right / +y down, pixel centers at
    half-integer coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    camera_to_world: np.ndarray  # 4x4

    def __post_init__(self):
        c2w = np.asarray(self.camera_to_world, dtype=np.float64)
        if c2w.shape != (4, 4):
            raise InvalidInputError("camera_to_world must be 4x4")
        rot = c2w[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-5):
            raise InvalidInputError("camera rotation block must be orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")
        object.__setattr__(self, "camera_to_world", c2w)

    def to_json(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "camera_to_world": self.camera_to_world.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Camera":
        try:
            return cls(
                fx=float(obj["fx"]),
                fy=float(obj["fy"]),
                cx=float(obj["cx"]),
                cy=float(obj["cy"]),
                width=int(obj["width"]),
                height=int(obj["height"]),
                camera_to_world=np.asarray(obj["camera_to_world"], dtype=np.float64),
            )
        except KeyError as e:
            raise InvalidInputError(f"camera json missing key {e}") from e

    def scaled(self, width: int, height: int) -> "Camera":
        """Same view rendered at a different pixel resolution."""
        sx, sy = width / self.width, height / self.height
        return Camera(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy,
                      width, height, self.camera_to_world)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit
    t_near: float
    t_far: float


@dataclass
class RenderSample:
    """Per-ray outputs; fields not requested by the render mode are None."""

    color: np.ndarray | None = None
    feature: np.ndarray | None = None
    depth: float | None = None
    alpha: float | None = None


def pixel_directions(camera: Camera, uv: np.ndarray) -> np.ndarray:
    """World-space unit directions through pixel centers ``uv + 0.5``."""
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    x = (uv[:, 0] + 0.5 - camera.cx) / camera.fx
    y = (uv[:, 1] + 0.5 - camera.cy) / camera.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=1)
    d_world = d_cam @ camera.camera_to_world[:3, :3].T
    return d_world / np.linalg.norm(d_world, axis=1, keepdims=True)


def bbox_span(geometry, origins: np.ndarray, dirs: np.ndarray):
    """Slab test: (t_near, t_far, hit) arrays; t_near clamped to >= 0."""
    lo = np.asarray(geometry.bbox_min, dtype=np.float64)
    hi = np.asarray(geometry.bbox_max, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    # parallel-axis rays: inside -> (-inf, inf), outside -> no overlap
    par = dirs == 0.0
    if par.any():
        inside = (origins >= lo) & (origins <= hi)
        t0 = np.where(par, np.where(inside, -np.inf, np.inf), t0)
        t1 = np.where(par, np.where(inside, np.inf, -np.inf), t1)
    tmin = np.minimum(t0, t1).max(axis=1)
    tmax = np.maximum(t0, t1).min(axis=1)
    tmin = np.maximum(tmin, 0.0)
    hit = (tmax > tmin) & (tmax > 0)
    return tmin, tmax, hit


def generate_ray(camera: Camera, pixel, geometry) -> Ray | None:
    """Ray through the pixel center, clipped to the bounding box; None if the
    ray misses (the renderer emits background for misses)."""
    uv = np.asarray(pixel, dtype=np.float64)
    if not np.isfinite(uv).all():
        raise InvalidInputError("pixel coordinates must be finite")
    d = pixel_directions(camera, uv)[0]
    o = camera.camera_to_world[:3, 3]
    tn, tf, hit = bbox_span(geometry, o[None, :], d[None, :])
    if not hit[0]:
        return None
    return Ray(o, d, float(tn[0]), float(tf[0]))


class FieldSource:
    """Adapter that yields activated density, decoded color, and features at
    sample points.  Edit modifiers wrap this interface."""

    def __init__(self, field: VoxelField, decoder: Decoder | None = None):
        if decoder is None:
            decoder = Decoder("direct")
        if decoder.mode != "direct" and decoder.latent_dim != field.latent_dim:
            raise InvalidInputError("decoder latent_dim does not match the field")
        self.field = field
        self.decoder = decoder
        self.geometry = field.geometry
        self.feature_dim = field.feature_dim

    def query(self, points, direction, want_feature=False):
        sigma_raw, latents, feat = self.field.query_all(points, want_feature)
        sigma = activate_density(sigma_raw)
        dirs = np.broadcast_to(direction, (points.shape[0], 3))
        rgb = sigmoid(self.decoder.logits(latents, dirs))
        return sigma, rgb, feat


class MaskedSource:
    """Foreground keeps density where the bitmap is set; background keeps the
    complement.  Bitmap lookups are nearest-node."""

    def __init__(self, base, bitmap: Bitmap3D, region: str = "fg"):
        if region not in ("fg", "bg"):
            raise InvalidInputError(f"mask region must be fg or bg, got {region!r}")
        from .grid import _require_same_geometry

        _require_same_geometry(bitmap, base)
        self.base = base
        self.bitmap = bitmap
        self.region = region
        self.geometry = base.geometry
        self.feature_dim = base.feature_dim

    def query(self, points, direction, want_feature=False):
        sigma, rgb, feat = self.base.query(points, direction, want_feature)
        b = self.bitmap.bits.reshape(-1)[nearest_node_index(self.geometry, points)]
        keep = b if self.region == "fg" else ~b
        return np.where(keep, sigma, 0.0), rgb, feat


def composite_weights(sigma: np.ndarray, delta) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample opacities and compositing weights T_i * alpha_i."""
    sigma = np.asarray(sigma, dtype=np.float64)
    trans = np.exp(-sigma * delta)  # 1 - alpha_i
    alpha = 1.0 - trans
    t_acc = np.cumprod(trans, axis=-1)
    big_t = np.concatenate(
        [np.ones_like(t_acc[..., :1]), t_acc[..., :-1]], axis=-1
    )
    return alpha, big_t * alpha


def sample_count(t_near, t_far, step):
    return max(2, int(np.ceil((t_far - t_near) / step)))


def render_ray(field, decoder, ray, mode="rgb", mask=None, n_samples=None,
               background=BACKGROUND_WHITE, source=None) -> RenderSample:
    """Composite one ray.  ``mask`` is an optional (Bitmap3D, "fg"|"bg")
    pair; ``source`` overrides the field/decoder pair with a prebuilt sample
    source (used by edits)."""
    if mode not in MODES:
        raise InvalidInputError(f"unknown render mode {mode!r}")
    src = source if source is not None else FieldSource(field, decoder)
    if mask is not None:
        src = MaskedSource(src, mask[0], mask[1])
    if ray is None:
        m = src.feature_dim
        return RenderSample(
            color=np.asarray(background, dtype=np.float64),
            feature=np.zeros(m), depth=0.0, alpha=0.0,
        )
    want_feature = mode in ("feature",)
    step = 0.5 * src.geometry.min_voxel_edge
    n = n_samples if n_samples is not None else sample_count(ray.t_near, ray.t_far, step)
    delta = (ray.t_far - ray.t_near) / n
    ts = ray.t_near + (np.arange(n) + 0.5) * delta
    pts = ray.origin[None, :] + ts[:, None] * ray.direction[None, :]
    sigma, rgb, feat = src.query(pts, ray.direction, want_feature)
    _, w = composite_weights(sigma, delta)
    acc = float(w.sum())
    color = w @ rgb + (1.0 - acc) * np.asarray(background, dtype=np.float64)
    depth = float(w @ ts + (1.0 - acc) * ray.t_far)
    feature = w @ feat if want_feature else None
    return RenderSample(color=color, feature=feature, depth=depth, alpha=acc)


def _render_batch(src, camera, uv, mode, background, chunk=4096):
    """Vectorized per-pixel rendering; returns dict of stacked outputs."""
    n_rays = uv.shape[0]
    want_feature = mode == "feature"
    m = src.feature_dim
    out_color = np.empty((n_rays, 3))
    out_alpha = np.zeros(n_rays)
    out_depth = np.zeros(n_rays)
    out_feat = np.zeros((n_rays, m)) if want_feature else None
    bg = np.asarray(background, dtype=np.float64)
    step = 0.5 * src.geometry.min_voxel_edge
    origin = camera.camera_to_world[:3, 3]
    dirs = pixel_directions(camera, uv)
    tn, tf, hit = bbox_span(src.geometry, origin[None, :], dirs)
    out_color[:] = bg
    out_depth[:] = 0.0
    idx_hit = np.nonzero(hit)[0]
    if idx_hit.size == 0:
        return {"color": out_color, "alpha": out_alpha, "depth": out_depth, "feature": out_feat}
    # one sample count for the whole batch (largest needed) so that chunking
    # is purely a memory knob and never changes output values
    n_s = max(2, int(np.ceil((tf[idx_hit] - tn[idx_hit]).max() / step)))
    for start in range(0, idx_hit.size, chunk):
        sel = idx_hit[start : start + chunk]
        delta = (tf[sel] - tn[sel]) / n_s  # (B,)
        ts = tn[sel, None] + (np.arange(n_s)[None, :] + 0.5) * delta[:, None]
        pts = origin[None, None, :] + ts[..., None] * dirs[sel, None, :]
        flat = pts.reshape(-1, 3)
        dirrep = np.repeat(dirs[sel], n_s, axis=0)
        sigma, rgb, feat = src.query(flat, dirrep, want_feature)
        sigma = sigma.reshape(len(sel), n_s)
        rgb = rgb.reshape(len(sel), n_s, 3)
        _, w = composite_weights(sigma, delta[:, None])
        acc = w.sum(axis=1)
        out_alpha[sel] = acc
        out_color[sel] = np.einsum("bs,bsc->bc", w, rgb) + (1 - acc)[:, None] * bg
        out_depth[sel] = (w * ts).sum(axis=1) + (1 - acc) * tf[sel]
        if want_feature:
            feat = feat.reshape(len(sel), n_s, m)
            out_feat[sel] = np.einsum("bs,bsc->bc", w, feat)
    return {"color": out_color, "alpha": out_alpha, "depth": out_depth, "feature": out_feat}


def _image_uv(camera):
    u, v = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    return np.stack([u.reshape(-1), v.reshape(-1)], axis=1).astype(np.float64)


def render_image(field, decoder, camera, mode="rgb", mask=None,
                 background=BACKGROUND_WHITE, source=None) -> np.ndarray:
    """Full-frame render.

    rgb -> (H, W, 3) in [0, 1]; feature -> (H, W, m); depth/alpha -> (H, W);
    mask -> (H, W) bool, the foreground-restricted alpha thresholded at 0.1.
    """
    if mode not in MODES:
        raise InvalidInputError(f"unknown render mode {mode!r}")
    src = source if source is not None else FieldSource(field, decoder)
    if mode == "mask":
        if mask is None:
            raise InvalidInputError("mask mode requires a bitmap")
        alpha = render_image(field, decoder, camera, "alpha",
                             mask=(mask[0], "fg"), source=source, background=background)
        return alpha > 0.1
    if mask is not None:
        src = MaskedSource(src, mask[0], mask[1])
    res = _render_batch(src, camera, _image_uv(camera), mode, background)
    h, w = camera.height, camera.width
    if mode == "rgb":
        return res["color"].reshape(h, w, 3)
    if mode == "feature":
        return res["feature"].reshape(h, w, src.feature_dim)
    if mode == "depth":
        return res["depth"].reshape(h, w)
    return res["alpha"].reshape(h, w)


def render_feature_pca_preview(field, camera, basis: np.ndarray,
                               decoder=None, source=None) -> np.ndarray:
    """Project a rendered feature image onto 3 orthonormal basis rows and
    min-max normalize to an RGB preview (constant fields map to mid gray)."""
    basis = np.asarray(basis, dtype=np.float64)
    if basis.shape[0] != 3:
        raise InvalidInputError("preview basis must have 3 rows")
    if not np.allclose(basis @ basis.T, np.eye(3), atol=1e-5):
        raise InvalidInputError("preview basis rows must be orthonormal")
    feat = render_image(field, decoder, camera, "feature", source=source)
    proj = feat @ basis.T
    lo, hi = proj.min(), proj.max()
    if hi - lo < 1e-12:
        return np.full(proj.shape, 0.5)
    return (proj - lo) / (hi - lo)
