"""U-shaped segmentation network with grouped parameters.

Five encoding stages (conv block + 2x max pool between), matching decoder
stages with skip concatenation, a channel-selection generator attached at the
deepest feature, and two per-pixel linear heads: a coarse head and a
calibrated head applied after the disagreement-gated feature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers
from .layers import ConvBlock, Conv2d, PerPixelLinear, max_pool2x2, upsample_nearest2x
from .pcs import PCSGenerator
from .tensor import Tensor, concat, sigmoid


@dataclass(frozen=True)
class ModelProfile:
    """Desk-scale defaults; the full-resolution setting is reachable by config."""

    image_size: int = 64
    in_channels: int = 1
    classes: int = 1
    channels: tuple = (8, 16, 32, 64, 128)

    def validate(self):
        depth = len(self.channels) - 1
        if self.image_size % (2 ** depth):
            raise ValueError(
                f"image size {self.image_size} not divisible by 2^{depth} for {len(self.channels)} stages")


class SegmentationModel:
    """Holds all parameter tensors for one site's model instance."""

    def __init__(self, profile: ModelProfile, n_sites: int,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        profile.validate()
        if rng is None:
            rng = np.random.default_rng(0)
        self.profile = profile
        self.n_sites = n_sites
        self.dtype = dtype
        ch = profile.channels

        self.encoders = []
        cin = profile.in_channels
        for c in ch:
            self.encoders.append(ConvBlock(cin, c, rng, layers.GROUP_BODY, dtype))
            cin = c

        # decoder mirrors the encoder: upsample, 1x1 projection, skip concat, conv block
        self.up_projs = []
        self.decoders = []
        for i in range(len(ch) - 2, -1, -1):
            self.up_projs.append(Conv2d(ch[i + 1], ch[i], 1, rng, layers.GROUP_BODY, dtype))
            self.decoders.append(ConvBlock(2 * ch[i], ch[i], rng, layers.GROUP_BODY, dtype))

        self.pcs_gen = PCSGenerator(n_sites, ch[-1], rng, dtype=dtype)
        self.coarse_head = PerPixelLinear(ch[0], profile.classes, rng, layers.GROUP_HEAD, dtype)
        self.calib_head = PerPixelLinear(ch[0], profile.classes, rng, layers.GROUP_HEAD, dtype)

        self._named = []
        for i, enc in enumerate(self.encoders):
            self._collect(f"enc{i}", enc)
        for i, (proj, dec) in enumerate(zip(self.up_projs, self.decoders)):
            self._collect(f"up{i}", proj)
            self._collect(f"dec{i}", dec)
        self._collect("pcsgen", self.pcs_gen)
        self._collect("head_coarse", self.coarse_head)
        self._collect("head_calib", self.calib_head)
        names = [n for n, _, _ in self._named]
        if len(names) != len(set(names)):
            raise ValueError("duplicate parameter names in model")

    def _collect(self, prefix: str, layer):
        for name, t in layer.parameters():
            self._named.append((f"{prefix}.{name}", t, layer.group))

    # -- parameter plumbing ---------------------------------------------------

    def named_parameters(self):
        """(name, tensor, group) triples in registration order."""
        return list(self._named)

    def parameters(self):
        return [t for _, t, _ in self._named]

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()

    def get_params(self, groups) -> dict:
        """Copy out {name: array} for parameters in the given groups."""
        return {n: t.data.copy() for n, t, g in self._named if g in groups}

    def load_params(self, values: dict):
        by_name = {n: t for n, t, _ in self._named}
        for name, arr in values.items():
            t = by_name[name]
            if t.data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {t.data.shape} vs {arr.shape}")
            np.copyto(t.data, arr)

    # -- forward pieces ---------------------------------------------------------

    def encode(self, x: Tensor):
        """Returns (skip features, deepest feature)."""
        skips = []
        f = x
        for i, enc in enumerate(self.encoders):
            f = enc(f)
            if i < len(self.encoders) - 1:
                skips.append(f)
                f = max_pool2x2(f)
        return skips, f

    def decode(self, f: Tensor, skips) -> Tensor:
        for proj, dec, skip in zip(self.up_projs, self.decoders, reversed(skips)):
            f = proj(upsample_nearest2x(f))
            f = dec(concat([skip, f], axis=1))
        return f

    def coarse_map(self, f_hat: Tensor) -> Tensor:
        return sigmoid(self.coarse_head(f_hat))

    def calibrated_map(self, f_star: Tensor) -> Tensor:
        return sigmoid(self.calib_head(f_star))
