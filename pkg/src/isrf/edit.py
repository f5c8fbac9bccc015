"""Post-segmentation scene manipulation.  Edits are query-time modifiers
layered over a field's sample source, so stored grids are never mutated;
renders pick up the whole pending stack.  ``bake`` optionally materializes
the modified field values at the lattice nodes into a new field.

Semantics (b is the nearest-node bitmap value at the query point):
  remove    density becomes sigma * (1 - b)
  extract   density becomes sigma * b
  translate queries at x with shifted-mask bit 1 read the field at x + t, so
            the masked content displaces by -t; the source region empties
  recolor   decoded colors c inside the mask become clamp(A c + o, 0, 1)
  compose   joint compositing of two fields: alpha from sigma1 + sigma2 and
            per-sample color (sigma1 c1 + sigma2 c2) / (sigma1 + sigma2)
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GeometryMismatchError, InvalidInputError
from .field import Decoder, VoxelField
from .grid import Bitmap3D, DenseGrid, nearest_node_index
from .render import FieldSource, MaskedSource


@dataclass
class EditOp:
    kind: str  # remove | extract | translate | recolor | compose
    mask: Bitmap3D | None = None
    t: "np.ndarray | None" = None
    color_matrix: "np.ndarray | None" = None
    color_offset: "np.ndarray | None" = None
    other_field: VoxelField | None = None
    other_decoder: Decoder | None = None
    rigid: "np.ndarray | None" = None

    KINDS = ("remove", "extract", "translate", "recolor", "compose")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise InvalidInputError(f"unknown edit kind {self.kind!r}")


def remove(field_or_source, mask: Bitmap3D):
    """Background keep: subsequent renders see sigma * (1 - b)."""
    return MaskedSource(_as_source(field_or_source), mask, "bg")


def extract(field_or_source, mask: Bitmap3D):
    """Foreground keep: subsequent renders see sigma * b."""
    return MaskedSource(_as_source(field_or_source), mask, "fg")


def _as_source(obj):
    if isinstance(obj, VoxelField):
        return FieldSource(obj)
    return obj


class TranslateSource:
    """Reads under the destination bitmap (the mask shifted by -t) are taken
    at x + t; the original masked region contributes empty density."""

    def __init__(self, base, mask: Bitmap3D, t):
        if mask.geometry != base.geometry:
            raise GeometryMismatchError("translate mask does not match the field")
        t = np.asarray(t, dtype=np.float64)
        if t.shape != (3,) or not np.isfinite(t).all():
            raise InvalidInputError("translation must be a finite 3-vector")
        self.base = base
        self.mask = mask
        self.t = t
        self.geometry = base.geometry
        self.feature_dim = base.feature_dim
        # destination bitmap b': node set iff the node shifted by +t carries
        # a mask bit (nearest-voxel resampling of the mask by -t)
        pos = self.geometry.node_positions() + t
        inside = self.geometry.contains(pos)
        bits = np.zeros(self.geometry.node_count, dtype=bool)
        flat = mask.bits.reshape(-1)
        bits[inside] = flat[nearest_node_index(self.geometry, pos[inside])]
        nx, ny, nz = self.geometry.resolution
        self.dest = Bitmap3D(self.geometry, bits.reshape(nz, ny, nx))

    def query(self, points, direction, want_feature=False):
        sigma, rgb, feat = self.base.query(points, direction, want_feature)
        node = nearest_node_index(self.geometry, points)
        dest = self.dest.bits.reshape(-1)[node]
        src_bit = self.mask.bits.reshape(-1)[node]
        if dest.any():
            dirn = np.asarray(direction, dtype=np.float64)
            if dirn.ndim == 2:
                dirn = dirn[dest]
            moved = self.base.query(points[dest] + self.t, dirn, want_feature)
            sigma = sigma.copy()
            rgb = rgb.copy()
            sigma[dest] = moved[0]
            rgb[dest] = moved[1]
            if want_feature:
                feat = feat.copy()
                feat[dest] = moved[2]
        # vacated source region (not also a destination) renders empty
        gone = src_bit & ~dest
        sigma = np.where(gone, 0.0, sigma)
        return sigma, rgb, feat


def translate(field_or_source, mask: Bitmap3D, t):
    return TranslateSource(_as_source(field_or_source), mask, t)


class RecolorSource:
    def __init__(self, base, mask: Bitmap3D, matrix, offset=None):
        if mask.geometry != base.geometry:
            raise GeometryMismatchError("recolor mask does not match the field")
        self.base = base
        self.mask = mask
        self.matrix = np.asarray(matrix, dtype=np.float64).reshape(3, 3)
        self.offset = (np.zeros(3) if offset is None
                       else np.asarray(offset, dtype=np.float64).reshape(3))
        self.geometry = base.geometry
        self.feature_dim = base.feature_dim

    def query(self, points, direction, want_feature=False):
        sigma, rgb, feat = self.base.query(points, direction, want_feature)
        b = self.mask.bits.reshape(-1)[nearest_node_index(self.geometry, points)]
        if b.any():
            changed = np.clip(rgb[b] @ self.matrix.T + self.offset, 0.0, 1.0)
            rgb = rgb.copy()
            rgb[b] = changed
        return sigma, rgb, feat


def recolor(field_or_source, mask: Bitmap3D, matrix, offset=None):
    return RecolorSource(_as_source(field_or_source), mask, matrix, offset)


BGR_FLIP = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])


class ComposeSource:
    """Two-field joint compositing; field B is queried at rigid^-1 x."""

    def __init__(self, base, other, rigid=None):
        self.base = base
        self.other = other
        self.geometry = base.geometry
        self.feature_dim = base.feature_dim
        if rigid is None:
            rigid = np.eye(4)
        rigid = np.asarray(rigid, dtype=np.float64)
        if rigid.shape != (4, 4):
            raise InvalidInputError("rigid transform must be 4x4")
        det = np.linalg.det(rigid)
        if abs(det) < 1e-12:
            raise InvalidInputError("rigid transform is singular")
        self.rigid_inv = np.linalg.inv(rigid)

    def query(self, points, direction, want_feature=False):
        s1, c1, f1 = self.base.query(points, direction, want_feature)
        pts_b = points @ self.rigid_inv[:3, :3].T + self.rigid_inv[:3, 3]
        dir_b = np.asarray(direction, dtype=np.float64) @ self.rigid_inv[:3, :3].T
        nrm = np.linalg.norm(dir_b, axis=-1, keepdims=dir_b.ndim == 2)
        dir_b = dir_b / np.where(nrm > 0, nrm, 1.0)
        s2, c2, f2 = self.other.query(pts_b, dir_b, want_feature)
        sigma = s1 + s2
        # density-weighted color; exact passthrough when one side is empty so
        # composing with an empty field is bit-identical to the solo render
        with np.errstate(invalid="ignore", divide="ignore"):
            mixed = (s1[:, None] * c1 + s2[:, None] * c2) / sigma[:, None]
        rgb = np.where(s2[:, None] == 0.0, c1, np.where(s1[:, None] == 0.0, c2, mixed))
        feat = None
        if want_feature:
            with np.errstate(invalid="ignore", divide="ignore"):
                fmix = (s1[:, None] * f1 + s2[:, None] * f2) / sigma[:, None]
            feat = np.where(s2[:, None] == 0.0, f1, np.where(s1[:, None] == 0.0, f2, fmix))
        return sigma, rgb, feat


def compose(field_a, field_b, rigid=None, decoder_a=None, decoder_b=None):
    a = field_a if not isinstance(field_a, VoxelField) else FieldSource(field_a, decoder_a)
    b = field_b if not isinstance(field_b, VoxelField) else FieldSource(field_b, decoder_b)
    return ComposeSource(a, b, rigid)


def apply_edits(field: VoxelField, decoder, ops) -> "object":
    """Build the layered sample source for an ordered list of EditOps."""
    src = FieldSource(field, decoder)
    for op in ops:
        if op.kind == "remove":
            src = MaskedSource(src, op.mask, "bg")
        elif op.kind == "extract":
            src = MaskedSource(src, op.mask, "fg")
        elif op.kind == "translate":
            src = TranslateSource(src, op.mask, op.t)
        elif op.kind == "recolor":
            src = RecolorSource(src, op.mask, op.color_matrix, op.color_offset)
        elif op.kind == "compose":
            other = FieldSource(op.other_field, op.other_decoder)
            src = ComposeSource(src, other, op.rigid)
    return src


def bake(field: VoxelField, decoder, ops) -> VoxelField:
    """Materialize the edit stack at the lattice nodes into a new field.

    Density and features are sampled from the modified source; appearance is
    kept when no recolor/compose op is present (decoded colors cannot be
    folded back into mlp latents exactly)."""
    src = apply_edits(field, decoder, ops)
    pos = field.geometry.node_positions()
    sigma, rgb, feat = src.query(pos, np.array([0.0, 0.0, 1.0]), want_feature=True)
    nx, ny, nz = field.geometry.resolution
    raw = np.where(sigma > 1e-12, np.log(np.expm1(np.maximum(sigma, 1e-12))), -30.0)
    density = DenseGrid(field.geometry, raw.reshape(nz, ny, nx, 1))
    touched_color = any(op.kind in ("recolor", "compose") for op in ops)
    if touched_color:
        if getattr(decoder, "mode", "direct") != "direct":
            raise InvalidInputError("bake with color edits requires the direct decoder")
        p = np.clip(rgb, 1e-3, 1 - 1e-3)
        appearance = DenseGrid(field.geometry, np.log(p / (1 - p)).reshape(nz, ny, nx, 3))
    else:
        appearance = _resampled_appearance(field, ops)
    feature = DenseGrid(field.geometry, feat.reshape(nz, ny, nx, -1))
    return VoxelField(field.geometry, density, appearance, feature)


def _resampled_appearance(field, ops):
    """Latents follow the same spatial rearrangement as density."""
    pos = field.geometry.node_positions()
    latents = field.latents(pos)
    for op in ops:
        if op.kind == "translate":
            shifted = field.latents(pos + np.asarray(op.t, dtype=np.float64))
            ts = TranslateSource(FieldSource(field), op.mask, op.t)
            dest = ts.dest.bits.reshape(-1)
            latents[dest] = shifted[dest]
    nx, ny, nz = field.geometry.resolution
    return DenseGrid(field.geometry, latents.reshape(nz, ny, nx, -1))


# -------------------------------------------------------------- edit scripts

def load_edit_script(path, geometry, scene_dir=None):
    """Parse an ordered JSON edit script.  Mask paths resolve relative to the
    script; ``scene:`` prefixed masks come from the scene archive directory."""
    from .io import load_scene, read_bitmap

    path = Path(path)
    base = path.parent
    ops = []
    for rec in json.loads(path.read_text()):
        kind = rec["kind"]
        mask = None
        if rec.get("mask"):
            ref = rec["mask"]
            if ref.startswith("scene:") and scene_dir is not None:
                mask = read_bitmap(Path(scene_dir) / "masks" / (ref[6:] + ".bits"), geometry)
            else:
                mask = read_bitmap(base / ref, geometry)
        op = EditOp(
            kind=kind,
            mask=mask,
            t=np.asarray(rec["t"], dtype=np.float64) if rec.get("t") else None,
            color_matrix=np.asarray(rec["color_matrix"], dtype=np.float64)
            if rec.get("color_matrix") else None,
            color_offset=np.asarray(rec["color_offset"], dtype=np.float64)
            if rec.get("color_offset") else None,
            rigid=np.asarray(rec["rigid"], dtype=np.float64) if rec.get("rigid") else None,
        )
        if kind == "compose":
            other = load_scene(base / rec["other_scene"])
            op.other_field = other.field
            op.other_decoder = other.decoder
        ops.append(op)
    return ops
