"""Windowed-attention transformer backbone with a five-scale feature pyramid.

The backbone runs plain transformer blocks on patch tokens.  Most blocks
restrict self-attention to non-overlapping square windows and add a learned
relative-position bias per head; a few evenly spaced blocks attend globally
to let information cross windows.  The single-scale output map is turned
into five scales (2x, 1x, 1/2x, 1/4x, 1/8x of the base map) by nearest 2x
upsampling and repeated stride-2 average downsampling, with a per-level
linear projection and layer norm.

Everything is translation invariant: there is no absolute positional
embedding, so a constant image yields spatially constant features at every
pyramid level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .layers import LayerNorm, Linear, Module, TransformerBlock
from .tensor import Tensor

PYRAMID_LEVELS = ("P_hi", "P_base", "P_low1", "P_low2", "P_low3")
# spatial scale of each level relative to the base map
PYRAMID_SCALES = (2.0, 1.0, 0.5, 0.25, 0.125)


def evenly_spaced_indices(depth: int, count: int) -> tuple[int, ...]:
    """Block indices for `count` global blocks evenly spaced over `depth`."""
    if count < 1 or depth % count:
        raise ConfigError(f"cannot space {count} global blocks evenly over depth {depth}")
    step = depth // count
    return tuple(step * (i + 1) - 1 for i in range(count))


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    window: int = 4
    global_block_indices: tuple[int, ...] = (1, 3)

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        expected = evenly_spaced_indices(self.depth, len(self.global_block_indices))
        if tuple(self.global_block_indices) != expected:
            raise ConfigError(
                f"global blocks {self.global_block_indices} are not evenly spaced; "
                f"expected {expected} for depth {self.depth}"
            )
        if self.patch_size < 1 or self.window < 1:
            raise ConfigError("patch_size and window must be positive")

    def base_side(self, image_side: int) -> int:
        if image_side % self.patch_size:
            raise ContractError(
                f"image side {image_side} must be a multiple of patch_size {self.patch_size}"
            )
        return image_side // self.patch_size

    def validate_image(self, h: int, w: int) -> tuple[int, int]:
        hb, wb = self.base_side(h), self.base_side(w)
        for side in (hb, wb):
            if side % self.window:
                raise ContractError(
                    f"base map side {side} must be a multiple of window {self.window} "
                    f"(image side must be a multiple of {self.patch_size * self.window})"
                )
            if side % 8:
                raise ContractError(
                    f"base map side {side} must be a multiple of 8 for the 5-level pyramid "
                    f"(image side must be a multiple of {self.patch_size * 8})"
                )
        return hb, wb


@dataclass
class FeaturePyramid:
    """Five feature maps [C, H, W] whose sides halve level by level."""

    levels: dict[str, Tensor]
    strides: dict[str, float]

    def __post_init__(self):
        if tuple(self.levels) != PYRAMID_LEVELS:
            raise ContractError(f"pyramid levels must be {PYRAMID_LEVELS}, got {tuple(self.levels)}")
        feats = list(self.levels.values())
        c = feats[0].shape[0]
        for hi, lo in zip(feats, feats[1:]):
            if hi.shape[0] != c or lo.shape[0] != c:
                raise ContractError("pyramid levels disagree on channel count")
            if hi.shape[1] != 2 * lo.shape[1] or hi.shape[2] != 2 * lo.shape[2]:
                raise ContractError(
                    f"consecutive pyramid levels must differ by exactly 2x, "
                    f"got {hi.shape} then {lo.shape}"
                )

    @property
    def channels(self) -> int:
        return next(iter(self.levels.values())).shape[0]

    def level(self, name: str) -> Tensor:
        return self.levels[name]

    def stride(self, name: str) -> float:
        return self.strides[name]


def window_partition(feat: Tensor, window: int) -> list[Tensor]:
    """Split a [C, H, W] map into non-overlapping [C, window, window] tiles.

    Tiles come back in row-major window order; `window_merge` is the exact
    inverse.
    """
    c, h, w = feat.shape
    if h % window or w % window:
        raise ContractError(f"window_partition: {h}x{w} not divisible by window {window}")
    tiles = []
    for wy in range(h // window):
        for wx in range(w // window):
            tile = T.narrow(feat, 1, wy * window, window)
            tile = T.narrow(tile, 2, wx * window, window)
            tiles.append(tile)
    return tiles


def window_merge(tiles: list[Tensor], h: int, w: int) -> Tensor:
    window = tiles[0].shape[-1]
    rows = []
    per_row = w // window
    for wy in range(h // window):
        rows.append(T.concat(tiles[wy * per_row:(wy + 1) * per_row], axis=2))
    return T.concat(rows, axis=1)


def relative_bias_index(window: int) -> np.ndarray:
    """Flat (2w-1)^2 table index for every (query, key) pair in a window."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"), axis=-1)
    flat = coords.reshape(-1, 2)
    rel = flat[:, None, :] - flat[None, :, :] + (window - 1)
    return (rel[..., 0] * (2 * window - 1) + rel[..., 1]).astype(np.intp)


class EncoderBlock(Module):
    """One backbone block, windowed or global.

    Windowed mode partitions the token grid, attends within each window
    with a learned relative-position bias, and merges back; no information
    crosses windows.  Global mode attends across the full grid without a
    bias table.
    """

    def __init__(self, rng, dim: int, heads: int, mode: str, window: int | None = None):
        if mode not in ("windowed", "global"):
            raise ConfigError(f"unknown attention mode {mode!r}")
        if mode == "windowed" and not window:
            raise ConfigError("windowed block needs a window size")
        self.mode = mode
        self.window = window
        self.block = TransformerBlock(rng, dim, heads)
        if mode == "windowed":
            self.rel_bias = T.parameter(np.zeros(((2 * window - 1) ** 2, heads)))
            self._bias_index = relative_bias_index(window)
        else:
            self.rel_bias = None
            self._bias_index = None

    def _window_bias(self, heads: int) -> Tensor:
        n = self.window * self.window
        bias = T.embedding(self.rel_bias, self._bias_index.reshape(-1))
        bias = T.reshape(bias, (n, n, heads))
        return T.reshape(T.transpose(bias, (2, 0, 1)), (1, heads, n, n))

    def __call__(self, tokens: Tensor, grid_hw: tuple[int, int]) -> Tensor:
        h, w = grid_hw
        n, d = tokens.shape
        if n != h * w:
            raise ContractError(f"token count {n} does not match grid {h}x{w}")
        out = self.forward_batch(T.reshape(tokens, (1, n, d)), grid_hw)
        return T.reshape(out, (n, d))

    def forward_batch(self, tokens: Tensor, grid_hw: tuple[int, int]) -> Tensor:
        """Same block over a stack of token grids [B, H*W, D]."""
        h, w = grid_hw
        b, n, d = tokens.shape
        if n != h * w:
            raise ContractError(f"token count {n} does not match grid {h}x{w}")
        if self.mode == "global":
            return self.block(tokens)
        win = self.window
        if h % win or w % win:
            raise ContractError(f"grid {h}x{w} not divisible by window {win}")
        grid = T.reshape(tokens, (b, h // win, win, w // win, win, d))
        grid = T.transpose(grid, (0, 1, 3, 2, 4, 5))
        windows = T.reshape(grid, (b * (h // win) * (w // win), win * win, d))
        heads = self.block.attn.heads
        out = self.block(windows, self._window_bias(heads))
        out = T.reshape(out, (b, h // win, w // win, win, win, d))
        out = T.transpose(out, (0, 1, 3, 2, 4, 5))
        return T.reshape(out, (b, n, d))


class VisualEncoder(Module):
    """Patch embedding, windowed/global blocks, five-scale pyramid."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        p = cfg.patch_size
        self.patch_proj = Linear(rng, 3 * p * p, cfg.embed_dim)
        self.blocks = [
            EncoderBlock(
                rng,
                cfg.embed_dim,
                cfg.heads,
                "global" if i in cfg.global_block_indices else "windowed",
                cfg.window,
            )
            for i in range(cfg.depth)
        ]
        self.final_ln = LayerNorm(cfg.embed_dim)
        self.level_projs = [Linear(rng, cfg.embed_dim, cfg.embed_dim) for _ in PYRAMID_LEVELS]
        self.level_norms = [LayerNorm(cfg.embed_dim) for _ in PYRAMID_LEVELS]

    def patchify(self, image: Tensor) -> tuple[Tensor, int, int]:
        """[3, H, W] image to row-major patch tokens [Hp*Wp, D]."""
        c, h, w = image.shape
        if c != 3:
            raise ContractError(f"patchify: expected 3 channels, got {c}")
        p = self.cfg.patch_size
        hb, wb = self.cfg.base_side(h), self.cfg.base_side(w)
        x = T.reshape(image, (3, hb, p, wb, p))
        x = T.transpose(x, (1, 3, 0, 2, 4))  # [Hp, Wp, 3, p, p]
        x = T.reshape(x, (hb * wb, 3 * p * p))
        return self.patch_proj(x), hb, wb

    def backbone_tokens(self, image: Tensor) -> tuple[Tensor, int, int]:
        hb, wb = self.cfg.validate_image(image.shape[1], image.shape[2])
        tokens, _, _ = self.patchify(image)
        for block in self.blocks:
            tokens = block(tokens, (hb, wb))
        return self.final_ln(tokens), hb, wb

    def backbone_tokens_batch(self, images: list[Tensor]) -> tuple[Tensor, int, int]:
        """Run the backbone once over same-sized images; returns [B, N, D]."""
        shapes = {img.shape for img in images}
        if len(shapes) != 1:
            raise ContractError(f"batched encode requires equal image shapes, got {shapes}")
        hb, wb = self.cfg.validate_image(images[0].shape[1], images[0].shape[2])
        per_image = [self.patchify(img)[0] for img in images]
        n, d = per_image[0].shape
        tokens = T.concat([T.reshape(t, (1, n, d)) for t in per_image], axis=0)
        for block in self.blocks:
            tokens = block.forward_batch(tokens, (hb, wb))
        return self.final_ln(tokens), hb, wb

    def _project_level_batch(self, grid: Tensor, level_idx: int) -> Tensor:
        b, c, h, w = grid.shape
        tokens = T.reshape(T.transpose(grid, (0, 2, 3, 1)), (b * h * w, c))
        tokens = self.level_norms[level_idx](self.level_projs[level_idx](tokens))
        return T.transpose(T.reshape(tokens, (b, h, w, c)), (0, 3, 1, 2))

    def strides(self) -> dict[str, float]:
        base_stride = float(self.cfg.patch_size)
        return {name: base_stride / scale for name, scale in zip(PYRAMID_LEVELS, PYRAMID_SCALES)}

    def pyramid_batch(self, tokens: Tensor, hb: int, wb: int) -> dict[str, Tensor]:
        """Five batched levels [B, C, H_s, W_s] from backbone tokens [B, N, D]."""
        b = tokens.shape[0]
        base = T.transpose(T.reshape(tokens, (b, hb, wb, self.cfg.embed_dim)), (0, 3, 1, 2))
        raw = {"P_hi": T.upsample2(base), "P_base": base}
        down = T.avg_pool2(base)
        raw["P_low1"] = down
        down = T.avg_pool2(down)
        raw["P_low2"] = down
        raw["P_low3"] = T.avg_pool2(down)
        return {
            name: self._project_level_batch(grid, i) for i, (name, grid) in enumerate(raw.items())
        }

    def encode_batch(self, images: list[Tensor]) -> dict[str, Tensor]:
        tokens, hb, wb = self.backbone_tokens_batch(images)
        return self.pyramid_batch(tokens, hb, wb)

    def encode(self, image: Tensor) -> FeaturePyramid:
        """Full forward pass: image to five-scale feature pyramid."""
        batched = self.encode_batch([image])
        levels = {}
        for name, grid in batched.items():
            _, c, h, w = grid.shape
            levels[name] = T.reshape(grid, (c, h, w))
        return FeaturePyramid(levels=levels, strides=self.strides())
