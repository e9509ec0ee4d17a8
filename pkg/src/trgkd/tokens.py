"""Patch tokenization and the shared random token sampling plan.

Layout convention: patches are enumerated in raster order (top-left to
bottom-right) and each patch is flattened row-major over (row, col, channel).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, UsageError
from .tensor import Tensor, as_tensor, permute, reshape, take_rows


def patchify(x, patch: int) -> Tensor:
    """Split a B x C x H x W tensor into B x M x (P*P*C) patch tokens."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"patchify expects B x C x H x W, got {x.shape}")
    b, c, h, w = x.shape
    if patch < 1 or h % patch or w % patch:
        raise ConfigError(f"patch size {patch} must divide both H={h} and W={w}")
    gh, gw = h // patch, w // patch
    t = reshape(x, (b, c, gh, patch, gw, patch))
    t = permute(t, (0, 2, 4, 3, 5, 1))
    return reshape(t, (b, gh * gw, patch * patch * c))


def unpatchify(tokens, patch: int, channels: int, height: int, width: int) -> np.ndarray:
    """Inverse of ``patchify`` on plain arrays (B x M x D -> B x C x H x W)."""
    arr = np.asarray(tokens.data if isinstance(tokens, Tensor) else tokens)
    b = arr.shape[0]
    gh, gw = height // patch, width // patch
    t = arr.reshape(b, gh, gw, patch, patch, channels)
    return t.transpose(0, 5, 1, 3, 2, 4).reshape(b, channels, height, width)


def patch_image(image, patch: int) -> Tensor:
    """Tokens of a single C x H x W image: M = HW/P^2 rows of D = P^2 C values."""
    image = as_tensor(image)
    if image.ndim != 3:
        raise DimensionError(f"patch_image expects C x H x W, got {image.shape}")
    tokens = patchify(reshape(image, (1,) + image.shape), patch)
    return reshape(tokens, tokens.shape[1:])


def feasible_patch_counts(height: int, width: int) -> dict[int, int]:
    """Map each attainable token count to the patch size producing it."""
    out = {}
    for p in range(1, min(height, width) + 1):
        if height % p == 0 and width % p == 0:
            out[(height // p) * (width // p)] = p
    return out


def patch_size_for(height: int, width: int, target_m: int) -> int:
    options = feasible_patch_counts(height, width)
    if target_m not in options:
        raise ConfigError(
            f"no patch size turns a {height}x{width} map into {target_m} tokens; "
            f"feasible counts: {sorted(options)}"
        )
    return options[target_m]


def patch_feature_map(fmap, target_m: int) -> Tensor:
    """Tokenize a C x H x W (or batched B x C x H x W) feature map into ``target_m`` patches."""
    fmap = as_tensor(fmap)
    if fmap.ndim == 3:
        p = patch_size_for(fmap.shape[1], fmap.shape[2], target_m)
        return patch_image(fmap, p)
    if fmap.ndim == 4:
        p = patch_size_for(fmap.shape[2], fmap.shape[3], target_m)
        return patchify(fmap, p)
    raise DimensionError(f"patch_feature_map expects a 3-D or 4-D map, got {fmap.shape}")


@dataclass(frozen=True)
class SamplingPlan:
    """Per-instance sorted patch indices shared by teacher and student."""

    indices: tuple[np.ndarray, ...]
    batch_size: int
    num_patches: int
    total: int
    seed: int

    @property
    def counts(self) -> list[int]:
        return [len(ix) for ix in self.indices]

    def pairs(self) -> list[tuple[int, int]]:
        return [(b, int(m)) for b, ix in enumerate(self.indices) for m in ix]

    def flat_index(self) -> np.ndarray:
        """Row indices into a (B*M) x D view of the tokens."""
        parts = [b * self.num_patches + ix for b, ix in enumerate(self.indices)]
        return np.concatenate(parts).astype(np.int64) if parts else np.zeros(0, np.int64)

    def instance_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.batch_size), self.counts)


def make_sampling_plan(batch_size: int, num_patches: int, total: int, seed: int) -> SamplingPlan:
    """Spread ``total`` token picks evenly over the batch; the first S mod B instances get one extra."""
    if batch_size < 1 or num_patches < 1 or total < 1:
        raise ConfigError("batch size, patch count and token budget must be positive")
    if total > batch_size * num_patches:
        raise ConfigError(
            f"token budget {total} exceeds the {batch_size}x{num_patches} available tokens"
        )
    base, extra = divmod(total, batch_size)
    rng = np.random.default_rng(seed)
    indices = []
    for b in range(batch_size):
        n = base + (1 if b < extra else 0)
        picked = rng.choice(num_patches, size=n, replace=False) if n else np.zeros(0, np.int64)
        ix = np.sort(picked).astype(np.int64)
        ix.flags.writeable = False
        indices.append(ix)
    return SamplingPlan(tuple(indices), batch_size, num_patches, total, seed)


@dataclass
class TokenBatch:
    tokens: Tensor
    instance_index: np.ndarray
    source: str

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


def apply_plan(all_tokens, plan: SamplingPlan, source: str = "student") -> TokenBatch:
    all_tokens = as_tensor(all_tokens)
    if all_tokens.ndim != 3:
        raise UsageError(f"apply_plan expects B x M x D tokens, got {all_tokens.shape}")
    b, m, d = all_tokens.shape
    if (b, m) != (plan.batch_size, plan.num_patches):
        raise UsageError(
            f"plan was made for B={plan.batch_size}, M={plan.num_patches} but tokens have B={b}, M={m}"
        )
    if source not in ("teacher", "student"):
        raise UsageError(f"source must be 'teacher' or 'student', got {source!r}")
    picked = take_rows(reshape(all_tokens, (b * m, d)), plan.flat_index())
    return TokenBatch(picked, plan.instance_index(), source)
