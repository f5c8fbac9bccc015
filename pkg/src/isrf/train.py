"""Two-phase field optimization: photometric pretraining of density and
appearance, then semantic-feature distillation under the weighted joint loss
``L = L_rgb + lambda * L_feature`` (both mean squared error).

Gradients are analytic and hand-derived.  For a ray with per-sample
transmittance ``T_i`` and opacity ``a_i = 1 - exp(-sigma_i d)`` the weight
``w_i = T_i a_i`` has ``dL/dsigma_k = d * (g_k T_k (1 - a_k) - sum_{i>k} g_i
w_i)`` where ``g_i = dL/dw_i``, which avoids dividing by vanishing
transmittance.  The feature loss is stop-gradiented at density: during
distillation only the semantic grid receives feature-term gradients, while
density and appearance see only the photometric term.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import DatasetError, InvalidInputError
from .field import (
    RAW_EMPTY,
    Decoder,
    VoxelField,
    sigmoid,
    sigmoid_grad_from_value,
    softplus,
)
from .grid import DenseGrid, GridGeometry, corner_indices_weights, gather_corners, scatter_corners
from .render import BACKGROUND_WHITE, bbox_span, pixel_directions, sample_count

log = logging.getLogger("isrf.train")


@dataclass
class TrainConfig:
    """Desk-scale defaults; the reference schedule (20k pretrain / 5k distill
    epochs) is shrunk proportionally for CPU-sized scenes."""

    resolution: tuple[int, int, int] = (32, 32, 32)
    pretrain_iters: int = 250
    distill_iters: int = 100
    lam: float = 0.001
    lr_grid: float = 0.1
    lr_decoder: float = 1e-3
    batch_rays: int = 4096
    seed: int = 0
    log_every: int = 100
    decoder_mode: str = "direct"
    background: tuple = BACKGROUND_WHITE

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidInputError("lambda must be non-negative")
        if self.pretrain_iters <= 0 and self.distill_iters <= 0:
            raise InvalidInputError("iteration counts must be positive")


class AdamState:
    """First/second moment accumulators with bias correction."""

    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self):
        self.m = {}
        self.v = {}
        self.step = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr) -> None:
    """In-place Adam update. ``lr`` is a scalar or a per-parameter dict."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise InvalidInputError(f"gradient shape mismatch for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        step_lr = lr[name] if isinstance(lr, dict) else lr
        p -= step_lr * mhat / (np.sqrt(vhat) + state.eps)


def photometric_loss(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return float(np.mean((pred - gt) ** 2))


def joint_loss(pred_rgb, gt_rgb, pred_feat, gt_feat, lam: float) -> float:
    if lam < 0:
        raise InvalidInputError("lambda must be non-negative")
    total = photometric_loss(pred_rgb, gt_rgb)
    if lam > 0:
        total += lam * photometric_loss(pred_feat, gt_feat)
    return total


@dataclass
class RayBatch:
    origins: np.ndarray  # (B, 3)
    dirs: np.ndarray  # (B, 3) unit
    t_near: np.ndarray  # (B,)
    t_far: np.ndarray  # (B,)

    def __len__(self):
        return self.origins.shape[0]


def _sample_points(batch: RayBatch, step: float):
    n_s = max(2, int(np.ceil((batch.t_far - batch.t_near).max() / step)))
    delta = (batch.t_far - batch.t_near) / n_s  # (B,)
    ts = batch.t_near[:, None] + (np.arange(n_s)[None, :] + 0.5) * delta[:, None]
    pts = batch.origins[:, None, :] + ts[..., None] * batch.dirs[:, None, :]
    return ts, delta, pts


def _grid_stack(field: VoxelField, want_feature: bool) -> np.ndarray:
    """All trainable node channels side by side: [raw density | latents |
    features?], so forward and backward run one fused gather/scatter."""
    parts = [
        field.density.flat_values().astype(np.float64, copy=False),
        field.appearance.flat_values().astype(np.float64, copy=False),
    ]
    if want_feature:
        parts.append(field.feature.flat_values().astype(np.float64, copy=False))
    return np.concatenate(parts, axis=1)


def forward(field: VoxelField, decoder: Decoder, batch: RayBatch,
            want_feature: bool, background=BACKGROUND_WHITE, cache: dict | None = None):
    """Batched ray forward pass; optionally fills ``cache`` for backward."""
    geom = field.geometry
    step = 0.5 * geom.min_voxel_edge
    ts, delta, pts = _sample_points(batch, step)
    b, s = ts.shape
    flat_pts = pts.reshape(-1, 3)
    inside = geom.contains(flat_pts)

    sigma_raw = np.full(b * s, RAW_EMPTY)
    latents = np.zeros((b * s, field.latent_dim))
    feats = np.zeros((b * s, field.feature_dim)) if want_feature else None
    idx = w8 = None
    if inside.any():
        idx, w8 = corner_indices_weights(geom, flat_pts[inside])
        vals = gather_corners(_grid_stack(field, want_feature), idx, w8)
        nl = field.latent_dim
        sigma_raw[inside] = vals[:, 0]
        latents[inside] = vals[:, 1 : 1 + nl]
        if want_feature:
            feats[inside] = vals[:, 1 + nl :]

    sigma = softplus(sigma_raw).reshape(b, s)
    trans = np.exp(-sigma * delta[:, None])
    alpha = 1.0 - trans
    t_run = np.cumprod(trans, axis=1)
    big_t = np.concatenate([np.ones((b, 1)), t_run[:, :-1]], axis=1)
    w = big_t * alpha

    dirs_rep = np.repeat(batch.dirs, s, axis=0)
    mlp_cache = {} if (cache is not None and decoder.mode == "mlp") else None
    logits = decoder.logits(latents, dirs_rep, mlp_cache)
    colors = sigmoid(logits).reshape(b, s, 3)

    acc = w.sum(axis=1)
    bg = np.asarray(background, dtype=np.float64)
    pred_rgb = np.einsum("bs,bsc->bc", w, colors) + (1 - acc)[:, None] * bg
    pred_feat = None
    if want_feature:
        pred_feat = np.einsum("bs,bsc->bc", w, feats.reshape(b, s, -1))

    if cache is not None:
        cache.update(
            ts=ts, delta=delta, inside=inside, idx=idx, w8=w8,
            sigma_raw=sigma_raw, trans=trans, alpha=alpha, big_t=big_t, w=w,
            colors=colors, feats=feats, acc=acc, shape=(b, s), mlp=mlp_cache,
        )
    return pred_rgb, pred_feat


def backward(field: VoxelField, decoder: Decoder, batch: RayBatch,
             gt_rgb: np.ndarray, gt_feat: np.ndarray | None = None,
             phase: str = "pretrain", lam: float = 0.0,
             background=BACKGROUND_WHITE):
    """Analytic gradients of the phase loss.  Returns (grads, stats).

    grads keys: "density", "appearance", "feature" (node-value arrays) and
    "decoder.*" for mlp decoders.  In the distill phase the feature loss
    flows only into the semantic grid.
    """
    if phase not in ("pretrain", "distill"):
        raise InvalidInputError(f"unknown phase {phase!r}")
    want_feature = phase == "distill" and lam > 0
    if want_feature and gt_feat is None:
        raise DatasetError("distill phase requires feature maps")
    cache: dict = {}
    pred_rgb, pred_feat = forward(field, decoder, batch, want_feature, background, cache)
    b, s = cache["shape"]
    geom = field.geometry
    w, big_t, trans, alpha = cache["w"], cache["big_t"], cache["trans"], cache["alpha"]
    colors = cache["colors"]
    inside, idx, w8 = cache["inside"], cache["idx"], cache["w8"]
    bg = np.asarray(background, dtype=np.float64)

    loss_rgb = photometric_loss(pred_rgb, gt_rgb)
    d_rgb = 2.0 * (pred_rgb - np.asarray(gt_rgb)) / pred_rgb.size  # (B, 3)

    grads = {}
    nl = field.latent_dim

    # color path: dL/dc_is = w_is * d_rgb_i, through the sigmoid
    d_colors = w[:, :, None] * d_rgb[:, None, :]
    d_logits = (d_colors * sigmoid_grad_from_value(colors)).reshape(b * s, 3)
    if decoder.mode == "direct":
        d_latents = d_logits
    else:
        dec_grads, d_latents = decoder.logits_backward(d_logits, cache["mlp"])
        for k, v in dec_grads.items():
            grads[f"decoder.{k}"] = v

    # weight path (photometric term only; feature term is stop-gradiented)
    g_w = np.einsum("bsc,bc->bs", colors - bg[None, None, :], d_rgb)
    gw_w = g_w * w
    suffix = np.flip(np.cumsum(np.flip(gw_w, axis=1), axis=1), axis=1) - gw_w  # sum_{i>k}
    d_sigma = cache["delta"][:, None] * (g_w * big_t * trans - suffix)
    d_raw = (d_sigma * sigmoid(cache["sigma_raw"]).reshape(b, s)).reshape(b * s)

    loss_feat = 0.0
    d_feats = None
    if want_feature:
        loss_feat = photometric_loss(pred_feat, gt_feat)
        d_feat = 2.0 * lam * (pred_feat - np.asarray(gt_feat)) / pred_feat.size
        d_feats = (w[:, :, None] * d_feat[:, None, :]).reshape(b * s, -1)

    nx, ny, nz = geom.resolution
    grads["density"] = np.zeros((nz, ny, nx, 1))
    grads["appearance"] = np.zeros((nz, ny, nx, nl))
    grads["feature"] = np.zeros((nz, ny, nx, field.feature_dim))
    if inside.any():
        upstream = [d_raw[inside, None], d_latents[inside]]
        if want_feature:
            upstream.append(d_feats[inside])
        node_grads = scatter_corners(geom.node_count, idx, w8, np.concatenate(upstream, axis=1))
        grads["density"] = node_grads[:, :1].reshape(nz, ny, nx, 1)
        grads["appearance"] = node_grads[:, 1 : 1 + nl].reshape(nz, ny, nx, nl)
        if want_feature:
            grads["feature"] = node_grads[:, 1 + nl :].reshape(nz, ny, nx, -1)

    stats = {
        "loss_rgb": loss_rgb,
        "loss_feat": loss_feat,
        "loss": loss_rgb + lam * loss_feat,
        "pred_rgb": pred_rgb,
        "pred_feat": pred_feat,
    }
    return grads, stats


def _ray_batch_from_pixels(cameras, frame_idx, us, vs, geometry):
    """Rays through the chosen pixels, dropping bounding-box misses."""
    origins = np.empty((len(frame_idx), 3))
    dirs = np.empty((len(frame_idx), 3))
    for f in np.unique(frame_idx):
        sel = frame_idx == f
        cam = cameras[f]
        uv = np.stack([us[sel], vs[sel]], axis=1).astype(np.float64)
        dirs[sel] = pixel_directions(cam, uv)
        origins[sel] = cam.camera_to_world[:3, 3]
    tn, tf, hit = bbox_span(geometry, origins, dirs)
    return RayBatch(origins[hit], dirs[hit], tn[hit], tf[hit]), hit


def train(dataset, config: TrainConfig, loss_history: list | None = None):
    """Optimize a fresh field against the dataset; deterministic per seed.

    ``dataset`` needs ``cameras`` (list of Camera), ``images`` (list of
    (H, W, 3) float arrays), optional ``features`` (list of (H, W, m)), and
    ``scene_bbox`` (min/max corner pair).  ``loss_history`` collects
    (phase, iter, loss) per iteration when given.
    """
    if len(dataset.cameras) < 2:
        raise DatasetError("training needs at least 2 views")
    has_features = getattr(dataset, "features", None) is not None
    if config.distill_iters > 0 and config.lam > 0 and not has_features:
        raise DatasetError("distill phase requires feature maps in the dataset")

    lo, hi = dataset.scene_bbox
    geometry = GridGeometry(tuple(config.resolution), tuple(lo), tuple(hi))
    feature_dim = dataset.features[0].shape[-1] if has_features else 1
    field = VoxelField.empty(geometry, latent_dim=3, feature_dim=feature_dim)
    decoder = Decoder(config.decoder_mode, latent_dim=3, rng=config.seed)

    params = {
        "density": field.density.values,
        "appearance": field.appearance.values,
        "feature": field.feature.values,
    }
    lr = {"density": config.lr_grid, "appearance": config.lr_grid, "feature": config.lr_grid}
    for k, v in decoder.weights.items():
        params[f"decoder.{k}"] = v
        lr[f"decoder.{k}"] = config.lr_decoder

    rng = np.random.default_rng(config.seed)
    cams = dataset.cameras
    n_frames = len(cams)
    # fancy-indexable ground-truth stacks (views may differ in size only in
    # pathological datasets; training requires one common size)
    sizes = {(c.height, c.width) for c in cams}
    if len(sizes) != 1:
        raise DatasetError("training requires equally sized views")
    images = np.stack(dataset.images).astype(np.float64)
    feats = np.stack(dataset.features).astype(np.float64) if has_features else None
    t0 = time.time()

    def run_phase(phase, iters, state):
        for it in range(1, iters + 1):
            fsel = rng.integers(0, n_frames, size=config.batch_rays)
            us = rng.integers(0, cams[0].width, size=config.batch_rays)
            vs = rng.integers(0, cams[0].height, size=config.batch_rays)
            batch, hit = _ray_batch_from_pixels(cams, fsel, us, vs, geometry)
            if len(batch) == 0:
                continue
            fh, uh, vh = fsel[hit], us[hit], vs[hit]
            gt_rgb = images[fh, vh, uh]
            gt_feat = None
            if phase == "distill" and has_features:
                gt_feat = feats[fh, vh, uh]
            grads, stats = backward(
                field, decoder, batch, gt_rgb, gt_feat,
                phase=phase, lam=config.lam if phase == "distill" else 0.0,
                background=config.background,
            )
            if phase == "pretrain":
                grads.pop("feature", None)
            adam_step(params, grads, state, lr)
            if loss_history is not None:
                loss_history.append((phase, it, stats["loss"]))
            if config.log_every and it % config.log_every == 0:
                psnr = 10.0 * np.log10(1.0 / max(stats["loss_rgb"], 1e-10))
                log.info(
                    "phase=%s iter=%d loss_rgb=%.6f loss_feat=%.6f psnr=%.2f elapsed=%.1fs",
                    phase, it, stats["loss_rgb"], stats["loss_feat"], psnr, time.time() - t0,
                )

    run_phase("pretrain", config.pretrain_iters, AdamState())
    if config.distill_iters > 0:
        run_phase("distill", config.distill_iters, AdamState())
    return field, decoder
