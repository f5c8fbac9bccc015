"""The scene state: density, appearance, and semantic feature grids over one
bounding box, plus the color decoder.

Density is stored raw and activated with softplus at query time; colors are
sigmoid-activated decoder outputs.  Queries outside the bounding box return
the empty value (activated density ~ 0, zero latents/features) so rays exit
the volume cleanly and shifted edit queries are well defined.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError
from .grid import DenseGrid, GridGeometry, VMGrid, densify, trilerp

# Raw density of engineered-empty space.  Queries at or below this raw value
# (outside-bbox fills, removed voxels, all-empty scenes) activate to exactly
# zero density, so empty renders have alpha exactly 0 and composing with an
# empty field is bit-identical to the solo render.
RAW_EMPTY = -30.0
_EMPTY_SNAP = 1e-6
# Raw init for trainable density grids: a near-empty start.
RAW_INIT = -5.0


def activate_density(sigma_raw):
    """Softplus with the engineered-empty values snapped to exact zero."""
    sigma = softplus(sigma_raw)
    return np.where(np.asarray(sigma_raw) <= RAW_EMPTY + _EMPTY_SNAP, 0.0, sigma)


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_grad(x):
    return sigmoid(x)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_grad_from_value(s):
    return s * (1.0 - s)


def positional_encoding(dirs: np.ndarray, bands: int) -> np.ndarray:
    """[d, sin(2^k d), cos(2^k d) for k < bands] per component."""
    dirs = np.atleast_2d(dirs)
    parts = [dirs]
    for k in range(bands):
        parts.append(np.sin((2.0**k) * dirs))
        parts.append(np.cos((2.0**k) * dirs))
    return np.concatenate(parts, axis=1)


class Decoder:
    """Maps appearance latents (+ view direction) to RGB logits.

    direct mode: the latent itself is the 3-channel logit vector, view
    independent.  mlp mode: a 2-layer perceptron on (latent, encoded
    direction) with ReLU hidden units.
    """

    def __init__(self, mode="direct", latent_dim=3, hidden=64, bands=4, weights=None, rng=None):
        if mode not in ("direct", "mlp"):
            raise InvalidInputError(f"unknown decoder mode {mode!r}")
        self.mode = mode
        self.latent_dim = int(latent_dim)
        self.hidden = int(hidden)
        self.bands = int(bands)
        if mode == "direct":
            if self.latent_dim != 3:
                raise InvalidInputError("direct decoder requires 3 appearance channels")
            self.weights = {}
        else:
            in_dim = self.latent_dim + 3 * (1 + 2 * self.bands)
            if weights is None:
                rng = np.random.default_rng(rng)
                s1 = np.sqrt(2.0 / in_dim)
                s2 = np.sqrt(2.0 / self.hidden)
                weights = {
                    "w1": rng.standard_normal((self.hidden, in_dim)) * s1,
                    "b1": np.zeros(self.hidden),
                    "w2": rng.standard_normal((3, self.hidden)) * s2,
                    "b2": np.zeros(3),
                }
            self.weights = {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()}

    def logits(self, latents: np.ndarray, dirs: np.ndarray, cache: dict | None = None) -> np.ndarray:
        """RGB logits for (N, latent_dim) latents and (N, 3) unit directions."""
        if self.mode == "direct":
            return np.asarray(latents, dtype=np.float64)
        x = np.concatenate([latents, positional_encoding(dirs, self.bands)], axis=1)
        h_pre = x @ self.weights["w1"].T + self.weights["b1"]
        h = np.maximum(h_pre, 0.0)
        out = h @ self.weights["w2"].T + self.weights["b2"]
        if cache is not None:
            cache.update(x=x, h_pre=h_pre, h=h)
        return out

    def decode(self, latents, dirs):
        """Colors in (0, 1)."""
        return sigmoid(self.logits(latents, dirs))

    def logits_backward(self, d_out: np.ndarray, cache: dict):
        """Gradients w.r.t. weights and latents given d loss / d logits."""
        x, h_pre, h = cache["x"], cache["h_pre"], cache["h"]
        g_w2 = d_out.T @ h
        g_b2 = d_out.sum(axis=0)
        d_h = d_out @ self.weights["w2"]
        d_h[h_pre <= 0] = 0.0
        g_w1 = d_h.T @ x
        g_b1 = d_h.sum(axis=0)
        d_latent = (d_h @ self.weights["w1"])[:, : self.latent_dim]
        return {"w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2}, d_latent


class VoxelField:
    """Density, appearance, and semantic feature grids sharing one geometry.

    Any grid may be dense or VM-factorized; training requires dense (use
    :meth:`densified`)."""

    def __init__(self, geometry: GridGeometry, density, appearance, feature):
        for g in (density, appearance, feature):
            if g.geometry != geometry:
                raise InvalidInputError("all field grids must share the field geometry")
        if density.channels != 1:
            raise InvalidInputError("density grid must have one channel")
        self.geometry = geometry
        self.density = density
        self.appearance = appearance
        self.feature = feature

    @property
    def feature_dim(self) -> int:
        return self.feature.channels

    @property
    def latent_dim(self) -> int:
        return self.appearance.channels

    @classmethod
    def empty(cls, geometry, latent_dim=3, feature_dim=8, dtype=np.float64):
        return cls(
            geometry,
            DenseGrid.full(geometry, 1, RAW_INIT, dtype=dtype),
            DenseGrid.zeros(geometry, latent_dim, dtype=dtype),
            DenseGrid.zeros(geometry, feature_dim, dtype=dtype),
        )

    def densified(self) -> "VoxelField":
        """A copy whose grids are all dense (VM grids reconstructed)."""

        def d(g):
            return densify(g) if isinstance(g, VMGrid) else g

        return VoxelField(self.geometry, d(self.density), d(self.appearance), d(self.feature))

    def _masked_query(self, grid, points, fill):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        inside = self.geometry.contains(pts)
        out = np.full((pts.shape[0], grid.channels), fill, dtype=np.float64)
        if inside.any():
            out[inside] = trilerp(grid, pts[inside])
        return out

    def query_all(self, points, want_feature=True):
        """(sigma_raw, latents, features) in one pass; dense grids share a
        single corner-weight computation."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = pts.shape[0]
        all_dense = all(
            isinstance(g, DenseGrid)
            for g in (self.density, self.appearance, self.feature)
        )
        if not all_dense:
            sigma_raw = self.sigma_raw(pts)
            latents = self.latents(pts)
            feats = self.features(pts) if want_feature else None
            return sigma_raw, latents, feats
        from .grid import corner_indices_weights, gather_corners

        inside = self.geometry.contains(pts)
        sigma_raw = np.full(n, RAW_EMPTY)
        latents = np.zeros((n, self.latent_dim))
        feats = np.zeros((n, self.feature_dim)) if want_feature else None
        if inside.any():
            idx, w = corner_indices_weights(self.geometry, pts[inside])
            sigma_raw[inside] = gather_corners(
                self.density.flat_values().astype(np.float64, copy=False), idx, w)[:, 0]
            latents[inside] = gather_corners(
                self.appearance.flat_values().astype(np.float64, copy=False), idx, w)
            if want_feature:
                feats[inside] = gather_corners(
                    self.feature.flat_values().astype(np.float64, copy=False), idx, w)
        return sigma_raw, latents, feats

    def sigma_raw(self, points) -> np.ndarray:
        """Raw (pre-softplus) density, (N,); RAW_EMPTY outside the bbox."""
        return self._masked_query(self.density, points, RAW_EMPTY)[:, 0]

    def sigma(self, points) -> np.ndarray:
        return activate_density(self.sigma_raw(points))

    def latents(self, points) -> np.ndarray:
        return self._masked_query(self.appearance, points, 0.0)

    def features(self, points) -> np.ndarray:
        return self._masked_query(self.feature, points, 0.0)

    def node_sigma(self) -> np.ndarray:
        """Activated density at every node, flat order."""
        dens = self.density
        if isinstance(dens, VMGrid):
            dens = densify(dens)
        return activate_density(dens.flat_values()[:, 0].astype(np.float64))

    def node_features(self) -> np.ndarray:
        feat = self.feature
        if isinstance(feat, VMGrid):
            feat = densify(feat)
        return feat.flat_values().astype(np.float64)

    def occupancy(self, alpha_threshold=0.1) -> np.ndarray:
        """Flat boolean per node: opacity over one voxel diagonal above the
        threshold (the alpha > 0.1 rule applied at voxel scale; the diagonal
        is the longest path a ray can spend near one node)."""
        delta = float(np.linalg.norm(self.geometry.voxel_size))
        alpha = 1.0 - np.exp(-self.node_sigma() * delta)
        return alpha > alpha_threshold
