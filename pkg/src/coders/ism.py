"""Implicit stereo matching: 2D patch features fused with world-space position embeddings.

Feature maps are channel-last, ``(..., H, W, C)``, one slice per view.
"""
import numpy as np

from . import numerics as nx
from .geometry import frustum_bounds, lift_views
from .layers import MLP, Linear, Module
from .numerics import ConfigurationError, Tensor

PE_MODES = ("stereo", "2d", "none")


def patchify(images, patch):
    """(..., H, W, Ci) -> (..., H/P, W/P, P*P*Ci) non-overlapping patches."""
    images = np.asarray(images, dtype=np.float64)
    *lead, H, W, Ci = images.shape
    if H % patch or W % patch:
        raise ConfigurationError(f"image {H}x{W} not divisible by patch size {patch}")
    h, w = H // patch, W // patch
    x = images.reshape(*lead, h, patch, w, patch, Ci)
    n = len(lead)
    x = np.moveaxis(x, n + 2, n + 1)  # (..., h, w, P, P, Ci)
    return x.reshape(*lead, h, w, patch * patch * Ci)


def patch_backbone(images, embed):
    """Linear patch embedding shared by both views: (B, 2, H, W, Ci) -> (B, 2, h, w, C)."""
    return embed(Tensor(patchify(images, embed.patch)))


class PatchEmbed(Linear):
    def __init__(self, patch, channels, dim, rng):
        super().__init__(patch * patch * channels, dim, rng)
        self.patch = patch


def stack_rays(normalized):
    """(D, H, W, 3) normalised coordinates -> (H, W, 3*D), depth-major per cell."""
    D, H, W, _ = normalized.shape
    return np.transpose(normalized, (1, 2, 0, 3)).reshape(H, W, 3 * D)


class CoordinateEncoder(MLP):
    """Maps the 3*D stacked ray coordinates of a cell to a C-dim embedding."""

    def __init__(self, depth_bins, dim, rng, hidden=None):
        hidden = hidden or 4 * dim
        super().__init__([3 * depth_bins, hidden, hidden, dim], rng)
        # variance-preserving init: with the default fan-in init the embedding
        # barely varies across cells and attention cannot localise anything
        for i, layer in enumerate(self.layers):
            n_in = layer.weight.shape[0]
            gain = 6.0 if i < len(self.layers) - 1 else 3.0
            layer.weight.data[...] = rng.uniform(-1.0, 1.0, layer.weight.shape) * np.sqrt(gain / n_in)
            layer.bias.data[...] = 0.0
        self.depth_bins = depth_bins


def encode_positions(rays, encoder):
    """Stacked rays (V, H, W, 3D) -> position embeddings (V, H, W, C)."""
    rays = np.asarray(rays)
    if rays.shape[-1] != 3 * encoder.depth_bins:
        raise ConfigurationError(
            f"ray stack has {rays.shape[-1]} inputs, encoder expects {3 * encoder.depth_bins}")
    return encoder(Tensor(2.0 * rays - 1.0))    # centre [0, 1] inputs


def fuse(features, positions, align):
    """F_3D = align(F_2D) + pos, elementwise per view."""
    aligned = align(features)
    if positions is None:
        return aligned
    if aligned.shape[-3:] != positions.shape[-3:]:
        raise ConfigurationError(f"feature dims {aligned.shape} vs embedding dims {positions.shape}")
    return nx.add(aligned, positions)


def position_inputs(rig, feat_dims, depth_bins, depth_range, stride, mode="stereo",
                    spacing="linear", bounds=None):
    """Encoder inputs for both views, shape (2, H, W, 3*D), or None for ``mode='none'``.

    ``"2d"`` drops depth and the stereo extrinsics: every depth slot carries
    the cell's normalised image coordinates, identical for both views.
    """
    if mode not in PE_MODES:
        raise ConfigurationError(f"unknown position-embedding mode {mode!r}")
    if mode == "none":
        return None
    H, W = feat_dims
    if mode == "2d":
        u = (np.arange(W) + 0.5) / W
        v = (np.arange(H) + 0.5) / H
        vv, uu = np.meshgrid(v, u, indexing="ij")
        cell = np.stack([uu, vv, np.zeros_like(uu)], axis=-1)
        rays = np.broadcast_to(cell[None], (depth_bins, H, W, 3))
        return np.stack([stack_rays(rays)] * 2)
    if bounds is None:
        bounds = frustum_bounds(rig, depth_range)
    grids = lift_views(rig, feat_dims, depth_bins, depth_range, stride, spacing, bounds)
    return np.stack([stack_rays(g.normalized) for g in grids])


class ImplicitStereoMatching(Module):
    """Backbone, per-view alignment, coordinate encoder and additive fusion."""

    def __init__(self, dim, patch, channels, depth_bins, rng, pe_mode="stereo", hidden=None):
        if pe_mode not in PE_MODES:
            raise ConfigurationError(f"unknown position-embedding mode {pe_mode!r}")
        self.backbone = PatchEmbed(patch, channels, dim, rng)
        self.align = Linear(dim, dim, rng)
        self.encoder = CoordinateEncoder(depth_bins, dim, rng, hidden)
        self.pe_mode = pe_mode

    def __call__(self, images, rays):
        """images (B, 2, H, W, Ci), rays (2, h, w, 3D) or None -> F_3D (B, 2, h, w, C)."""
        feats = patch_backbone(images, self.backbone)
        pos = None
        if self.pe_mode != "none":
            pos = encode_positions(rays, self.encoder)
        return fuse(feats, pos, self.align)
