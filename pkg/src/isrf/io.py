"""Persistence and dataset plumbing: scene archives (manifest + raw
little-endian float32 tensors + packed bitmaps), posed-dataset ingestion with
8x8-patch feature expansion and optional PCA reduction, and the synthetic
scene generator used as the ground-truth oracle in tests.

Archive layout: ``scene.manifest`` (JSON), tensors ``*.f32``, bitmaps
``masks/*.bits``.  Dataset layout: ``transforms.json``, images
``frames/NNN.png``, features ``features/NNN.f32``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    ArchiveMissingFileError,
    ArchiveShapeError,
    ArchiveVersionError,
    DatasetError,
    InvalidInputError,
)
from .field import Decoder, VoxelField, RAW_EMPTY
from .grid import Bitmap3D, DenseGrid, GridGeometry, VMGrid
from .render import Camera, render_image

SCENE_MANIFEST = "scene.manifest"
SCENE_VERSION = 1
DATASET_MANIFEST = "transforms.json"
PATCH = 8

_KNOWN_SCENE_KEYS = {
    "version", "geometry", "density", "appearance", "feature",
    "decoder", "pca_basis", "bitmaps",
}


# ---------------------------------------------------------------- raw files

def write_f32(path, array) -> None:
    np.ascontiguousarray(array, dtype="<f4").tofile(path)


def read_f32(path, shape):
    path = Path(path)
    if not path.exists():
        raise ArchiveMissingFileError(f"missing tensor file {path}")
    expect = int(np.prod(shape)) * 4
    actual = path.stat().st_size
    if actual != expect:
        raise ArchiveShapeError(f"{path} is {actual} bytes, manifest shape {shape} needs {expect}")
    return np.fromfile(path, dtype="<f4").reshape(shape)


def write_image(path, img) -> None:
    """Float [0,1] (H, W, 3) or (H, W) -> 8-bit PNG."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    if data.ndim == 2:
        data = np.repeat(data[:, :, None], 3, axis=2)
    Image.fromarray(data, "RGB").save(path, format="PNG")


def read_image(path):
    path = Path(path)
    if not path.exists():
        raise ArchiveMissingFileError(f"missing image {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_bitmap(path, bitmap: Bitmap3D) -> None:
    Path(path).write_bytes(bitmap.pack())


def read_bitmap(path, geometry: GridGeometry) -> Bitmap3D:
    path = Path(path)
    if not path.exists():
        raise ArchiveMissingFileError(f"missing bitmap {path}")
    return Bitmap3D.unpack(geometry, path.read_bytes())


def write_f32_with_sidecar(path, array) -> None:
    """Raw float output (depth/alpha exports) plus a JSON shape sidecar."""
    write_f32(path, array)
    Path(str(path) + ".json").write_text(
        json.dumps({"dtype": "<f4", "shape": list(np.asarray(array).shape)})
    )


# ------------------------------------------------------------ scene archive

@dataclass
class SceneArchive:
    path: Path
    field: VoxelField
    decoder: Decoder
    masks: dict = dc_field(default_factory=dict)
    pca_basis: "object | None" = None  # semantic.PcaBasis


def _grid_entry(name, grid, out: Path):
    if isinstance(grid, DenseGrid):
        fname = f"{name}.f32"
        write_f32(out / fname, grid.values)
        return {"kind": "dense", "channels": grid.channels, "file": fname,
                "shape": list(grid.values.shape)}
    if isinstance(grid, VMGrid):
        files = {}
        for i in range(3):
            for kind, arr in (("plane", grid.planes[i]), ("line", grid.lines[i])):
                fname = f"{name}_{kind}{i}.f32"
                write_f32(out / fname, arr)
                files[f"{kind}{i}"] = {"file": fname, "shape": list(arr.shape)}
        fname = f"{name}_mix.f32"
        write_f32(out / fname, grid.mix)
        files["mix"] = {"file": fname, "shape": list(grid.mix.shape)}
        return {"kind": "vm", "channels": grid.channels, "ranks": list(grid.ranks),
                "files": files}
    raise InvalidInputError(f"cannot persist grid type {type(grid).__name__}")


def _load_grid(entry, geometry, base: Path):
    if entry["kind"] == "dense":
        return DenseGrid(geometry, read_f32(base / entry["file"], entry["shape"]))
    if entry["kind"] == "vm":
        f = entry["files"]
        planes = [read_f32(base / f[f"plane{i}"]["file"], f[f"plane{i}"]["shape"]) for i in range(3)]
        lines = [read_f32(base / f[f"line{i}"]["file"], f[f"line{i}"]["shape"]) for i in range(3)]
        mix = read_f32(base / f["mix"]["file"], f["mix"]["shape"])
        return VMGrid(geometry, planes, lines, mix)
    raise ArchiveShapeError(f"unknown grid kind {entry['kind']!r}")


def save_scene(path, field: VoxelField, decoder: Decoder | None = None,
               masks: dict | None = None, pca_basis=None) -> Path:
    """Write a scene archive directory; returns its path."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    decoder = decoder or Decoder("direct")
    manifest = {
        "version": SCENE_VERSION,
        "geometry": {
            "resolution": list(field.geometry.resolution),
            "bbox_min": list(field.geometry.bbox_min),
            "bbox_max": list(field.geometry.bbox_max),
        },
        "density": _grid_entry("density", field.density, out),
        "appearance": _grid_entry("appearance", field.appearance, out),
        "feature": _grid_entry("feature", field.feature, out),
    }
    dec = {"mode": decoder.mode}
    if decoder.mode == "mlp":
        dec.update(hidden=decoder.hidden, bands=decoder.bands, latent_dim=decoder.latent_dim)
        files = {}
        for key, arr in decoder.weights.items():
            fname = f"decoder_{key}.f32"
            write_f32(out / fname, arr)
            files[key] = {"file": fname, "shape": list(arr.shape)}
        dec["files"] = files
    manifest["decoder"] = dec
    if pca_basis is not None:
        manifest["pca_basis"] = {
            "mean": pca_basis.mean.tolist(),
            "components": pca_basis.components.tolist(),
            "explained_variance": pca_basis.explained_variance.tolist(),
        }
    if masks:
        (out / "masks").mkdir(exist_ok=True)
        entries = {}
        for name, bm in masks.items():
            fname = f"masks/{name}.bits"
            write_bitmap(out / fname, bm)
            entries[name] = {"file": fname, "popcount": bm.popcount()}
        manifest["bitmaps"] = entries
    (out / SCENE_MANIFEST).write_text(json.dumps(manifest, indent=1))
    return out


def load_scene(path) -> SceneArchive:
    base = Path(path)
    mpath = base / SCENE_MANIFEST
    if not mpath.exists():
        raise ArchiveMissingFileError(f"no {SCENE_MANIFEST} in {base}")
    manifest = json.loads(mpath.read_text())
    version = manifest.get("version")
    if version != SCENE_VERSION:
        raise ArchiveVersionError(f"scene version {version!r}, expected {SCENE_VERSION}")
    unknown = set(manifest) - _KNOWN_SCENE_KEYS
    if unknown:
        warnings.warn(f"scene manifest has unknown keys {sorted(unknown)}; ignoring")
    g = manifest["geometry"]
    geometry = GridGeometry(tuple(g["resolution"]), tuple(g["bbox_min"]), tuple(g["bbox_max"]))
    field = VoxelField(
        geometry,
        _load_grid(manifest["density"], geometry, base),
        _load_grid(manifest["appearance"], geometry, base),
        _load_grid(manifest["feature"], geometry, base),
    )
    dec = manifest.get("decoder", {"mode": "direct"})
    if dec["mode"] == "direct":
        decoder = Decoder("direct")
    else:
        weights = {k: read_f32(base / v["file"], v["shape"]) for k, v in dec["files"].items()}
        decoder = Decoder("mlp", latent_dim=dec["latent_dim"], hidden=dec["hidden"],
                          bands=dec["bands"], weights=weights)
    masks = {}
    for name, entry in manifest.get("bitmaps", {}).items():
        masks[name] = read_bitmap(base / entry["file"], geometry)
    pca = None
    if manifest.get("pca_basis"):
        from .semantic import PcaBasis

        pb = manifest["pca_basis"]
        pca = PcaBasis(
            mean=np.asarray(pb["mean"], dtype=np.float64),
            components=np.asarray(pb["components"], dtype=np.float64),
            explained_variance=np.asarray(pb["explained_variance"], dtype=np.float64),
        )
    return SceneArchive(base, field, decoder, masks, pca)


# ------------------------------------------------------------ posed dataset

@dataclass
class PosedDataset:
    cameras: list
    images: list
    features: list | None
    scene_bbox: tuple
    splits: list
    pca_basis: "object | None" = None
    path: Path | None = None

    def split_indices(self, split):
        return [i for i, s in enumerate(self.splits) if s == split]


_OPENGL_FLIP = np.diag([1.0, -1.0, -1.0, 1.0])


def _camera_from_frame(frame, convention):
    c2w = np.asarray(frame["transform_matrix"], dtype=np.float64)
    if convention == "opengl":
        c2w = c2w @ _OPENGL_FLIP
    return Camera(
        fx=float(frame["fx"]), fy=float(frame["fy"]),
        cx=float(frame["cx"]), cy=float(frame["cy"]),
        width=int(frame["width"]), height=int(frame["height"]),
        camera_to_world=c2w,
    )


def expand_patch_features(feat, height, width):
    """Each pixel inherits the feature of the patch it falls in."""
    ph, pw = feat.shape[:2]
    if height % ph or width % pw or height // ph != width // pw:
        raise DatasetError(f"patch grid {feat.shape[:2]} does not tile image {height}x{width}")
    p = height // ph
    return np.repeat(np.repeat(feat, p, axis=0), p, axis=1)


def ingest_dataset(path, target_dim: int | None = 64) -> PosedDataset:
    """Load and validate a posed dataset.

    Patch-resolution feature files are expanded pixel-wise (8x8 patches);
    if the feature dimension exceeds ``target_dim`` a PCA basis is fit over
    all frames and every pixel feature is projected.
    """
    base = Path(path)
    mpath = base / DATASET_MANIFEST
    if not mpath.exists():
        raise DatasetError(f"no {DATASET_MANIFEST} in {base}")
    manifest = json.loads(mpath.read_text())
    convention = manifest.get("camera_convention", "opencv")
    if convention not in ("opencv", "opengl"):
        raise DatasetError(f"unknown camera convention {convention!r}")
    bbox = manifest.get("scene_bbox", [[-1, -1, -1], [1, 1, 1]])

    cameras, images, feats, splits = [], [], [], []
    any_features = False
    for i, frame in enumerate(manifest.get("frames", [])):
        name = frame.get("file_path", f"frame {i}")
        cam = _camera_from_frame(frame, convention)
        img = read_image(base / frame["file_path"])
        if img.shape[:2] != (cam.height, cam.width):
            raise DatasetError(
                f"{name}: image is {img.shape[1]}x{img.shape[0]} but camera says "
                f"{cam.width}x{cam.height}"
            )
        fmap = None
        if frame.get("feature_path"):
            shape = frame.get("feature_shape")
            if shape is None:
                raise DatasetError(f"{name}: feature_path without feature_shape")
            fmap = read_f32(base / frame["feature_path"], shape).astype(np.float32)
            if fmap.shape[:2] != (cam.height, cam.width):
                fmap = expand_patch_features(fmap, cam.height, cam.width)
            any_features = True
        cameras.append(cam)
        images.append(img)
        feats.append(fmap)
        splits.append(frame.get("split", "train"))

    pca = None
    if any_features:
        dims = {f.shape[-1] for f in feats if f is not None}
        if len(dims) != 1:
            raise DatasetError(f"inconsistent feature dimensions across frames: {sorted(dims)}")
        if any(f is None for f in feats):
            raise DatasetError("some frames have feature maps and some do not")
        d = dims.pop()
        if target_dim is not None and d > target_dim:
            from .semantic import FeatureSet, pca_fit, pca_project

            stacked = np.concatenate([f.reshape(-1, d) for f in feats], axis=0)
            # deterministic subsample to keep the covariance fit tractable
            stride = max(1, stacked.shape[0] // 200_000)
            pca = pca_fit(FeatureSet(stacked[::stride], "teacher"), target_dim)
            feats = [
                pca_project(pca, f.reshape(-1, d)).reshape(f.shape[0], f.shape[1], target_dim).astype(np.float32)
                for f in feats
            ]
    else:
        feats = None

    return PosedDataset(cameras, images, feats, (tuple(bbox[0]), tuple(bbox[1])),
                        splits, pca, base)


# -------------------------------------------------------- synthetic oracle

@dataclass
class Primitive:
    kind: str  # sphere | box
    center: tuple
    size: "float | tuple"  # radius, or full edge lengths
    albedo: tuple
    object_id: str
    feature_id: str | None = None  # defaults to object_id

    def inside(self, pts: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        if self.kind == "sphere":
            return np.linalg.norm(pts - c, axis=-1) < float(self.size)
        if self.kind == "box":
            half = np.asarray(self.size, dtype=np.float64) / 2.0
            return np.all(np.abs(pts - c) < half, axis=-1)
        raise InvalidInputError(f"unknown primitive kind {self.kind!r}")


@dataclass
class SynthSpec:
    seed: int = 0
    resolution: tuple = (32, 32, 32)
    bbox_min: tuple = (-1.0, -1.0, -1.0)
    bbox_max: tuple = (1.0, 1.0, 1.0)
    primitives: list = dc_field(default_factory=list)
    image_size: tuple = (128, 128)
    n_train: int = 24
    n_test: int = 4
    camera_radius: float = 2.6
    fov_deg: float = 50.0
    feature_dim: int = 8
    feature_scale: float = 12.0
    feature_noise: float = 0.5
    # teacher-like features vary smoothly in space; iid per-voxel noise would
    # make high-confidence regions salt-and-pepper instead of contiguous
    noise_smoothing: int = 2
    solid_sigma: float = 8.0

    def __post_init__(self):
        ids = [p.object_id for p in self.primitives]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("primitive object ids must be unique")

    @classmethod
    def from_json(cls, obj: dict) -> "SynthSpec":
        prims = [Primitive(
            kind=p["kind"], center=tuple(p["center"]), size=p["size"],
            albedo=tuple(p["albedo"]), object_id=p["object_id"],
            feature_id=p.get("feature_id"),
        ) for p in obj.get("primitives", [])]
        known = {f.name for f in cls.__dataclass_fields__.values()} - {"primitives"}
        kwargs = {k: (tuple(v) if isinstance(v, list) else v)
                  for k, v in obj.items() if k in known}
        return cls(primitives=prims, **kwargs)


def inverse_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


def logit(p) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-3, 1 - 1e-3)
    return np.log(p / (1 - p))


def look_at(eye, target=(0, 0, 0), up=(0, 1, 0)) -> np.ndarray:
    """4x4 camera-to-world for a +z-forward, +y-down pinhole at ``eye``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    if abs(fwd @ upv) > 0.999:
        upv = np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, upv)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, down, fwd, eye
    return c2w


def _fibonacci_directions(n, rng=None):
    """Deterministic, roughly uniform directions on the sphere."""
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5**0.5) * i
    return np.stack([np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta), np.cos(phi)], axis=1)


def _smooth_noise(rng, shape, std, passes):
    """Spatially correlated Gaussian noise, normalized to the target std."""
    noise = rng.standard_normal(shape)
    if std == 0:
        return np.zeros(shape)
    for _ in range(passes):
        for axis in (0, 1, 2):
            noise = (noise + np.roll(noise, 1, axis) + np.roll(noise, -1, axis)) / 3.0
    scale = noise.std()
    if scale > 0:
        noise *= std / scale
    return noise


@dataclass
class SynthResult:
    field: VoxelField
    decoder: Decoder
    object_masks: dict
    dataset: PosedDataset
    feature_vectors: dict  # feature_id -> the clean generator vector


def synth_generate(spec: SynthSpec, out_dir=None) -> SynthResult:
    """Build the ground-truth field, per-object bitmaps, and a rendered posed
    dataset (images + per-pixel feature maps).  Deterministic per seed."""
    geometry = GridGeometry(spec.resolution, spec.bbox_min, spec.bbox_max)
    rng = np.random.default_rng(spec.seed)
    pos = geometry.node_positions()
    nx, ny, nz = geometry.resolution

    feature_ids = []
    for p in spec.primitives:
        fid = p.feature_id or p.object_id
        if fid not in feature_ids:
            feature_ids.append(fid)
    fvecs = {}
    for fid in feature_ids:
        v = rng.standard_normal(spec.feature_dim)
        fvecs[fid] = spec.feature_scale * v / np.linalg.norm(v)

    raw_density = np.full(geometry.node_count, RAW_EMPTY)
    latents = np.zeros((geometry.node_count, 3))
    features = np.zeros((geometry.node_count, spec.feature_dim))
    noise_field = _smooth_noise(
        rng, (nz, ny, nx, spec.feature_dim), spec.feature_noise, spec.noise_smoothing
    ).reshape(geometry.node_count, spec.feature_dim)
    masks = {}
    raw_solid = inverse_softplus(spec.solid_sigma)
    for p in spec.primitives:
        inside = p.inside(pos)
        if not geometry.contains(np.asarray(p.center)).all():
            raise InvalidInputError(f"primitive {p.object_id} center outside bbox")
        raw_density[inside] = raw_solid
        latents[inside] = logit(p.albedo)
        fid = p.feature_id or p.object_id
        features[inside] = fvecs[fid] + noise_field[inside]
        masks[p.object_id] = Bitmap3D(geometry, inside.reshape(nz, ny, nx))

    field = VoxelField(
        geometry,
        DenseGrid(geometry, raw_density.reshape(nz, ny, nx, 1)),
        DenseGrid(geometry, latents.reshape(nz, ny, nx, 3)),
        DenseGrid(geometry, features.reshape(nz, ny, nx, spec.feature_dim)),
    )
    decoder = Decoder("direct")

    w, h = spec.image_size
    f_px = 0.5 * w / np.tan(np.radians(spec.fov_deg) / 2)
    dirs = _fibonacci_directions(spec.n_train + spec.n_test)
    cameras = [
        Camera(f_px, f_px, w / 2, h / 2, w, h, look_at(spec.camera_radius * d))
        for d in dirs
    ]
    # interleave test views deterministically
    splits = ["train"] * len(cameras)
    if spec.n_test > 0:
        step = len(cameras) // spec.n_test
        for k in range(spec.n_test):
            splits[k * step] = "test"

    images, feats = [], []
    for cam in cameras:
        # one feature-mode render carries the color channels too
        from .render import FieldSource, _image_uv, _render_batch

        res = _render_batch(FieldSource(field, decoder), cam, _image_uv(cam), "feature",
                            background=(1.0, 1.0, 1.0))
        rgb = res["color"].reshape(h, w, 3)
        fmap = res["feature"].reshape(h, w, spec.feature_dim)
        # images are 8-bit on disk; keep the in-memory copy identical
        images.append((np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8) / 255.0).astype(np.float32))
        feats.append(fmap.astype(np.float32))

    dataset = PosedDataset(cameras, images, feats, (spec.bbox_min, spec.bbox_max), splits)
    result = SynthResult(field, decoder, masks, dataset, fvecs)
    if out_dir is not None:
        _write_dataset(result, Path(out_dir))
        dataset.path = Path(out_dir)
    return result


def _write_dataset(result: SynthResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "frames").mkdir(exist_ok=True)
    (out / "features").mkdir(exist_ok=True)
    ds = result.dataset
    frames = []
    for i, cam in enumerate(ds.cameras):
        img_name = f"frames/{i:03d}.png"
        feat_name = f"features/{i:03d}.f32"
        write_image(out / img_name, ds.images[i])
        write_f32(out / feat_name, ds.features[i])
        frames.append({
            "file_path": img_name,
            "feature_path": feat_name,
            "feature_shape": list(ds.features[i].shape),
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
            "transform_matrix": cam.camera_to_world.tolist(),
            "split": ds.splits[i],
        })
    manifest = {
        "version": 1,
        "camera_convention": "opencv",
        "scene_bbox": [list(ds.scene_bbox[0]), list(ds.scene_bbox[1])],
        "frames": frames,
    }
    (out / DATASET_MANIFEST).write_text(json.dumps(manifest, indent=1))
    save_scene(out / "gt_scene", result.field, result.decoder, masks=result.object_masks)
