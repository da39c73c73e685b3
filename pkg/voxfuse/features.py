"""
Image feature pyramid and the bilinear grid sampler.

Cell (i, j) of a level with stride s is centered at image pixel
((j + 0.5) * s, (i + 0.5) * s). I_0 holds per-pixel channels
[R, G, B, gray, |d gray/du|, |d gray/dv|], all scaled to [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from voxfuse.errors import ContractError, KittiFormatError

NUM_LEVELS = 5
CHANNELS = ("r", "g", "b", "gray", "grad_u", "grad_v")
_GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])
_SOBEL_MAX = 4.0  # largest |Sobel| response for inputs in [0, 1]
_HEADER_DTYPE = np.dtype("<u4")


@dataclass(frozen=True)
class FeatureMap:
    data: np.ndarray  # (H, W, C)
    stride: int = 1

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ContractError(f"feature map must be HxWxC, got shape {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def level(self) -> int:
        return int(self.stride).bit_length() - 1


@dataclass(frozen=True)
class FeaturePyramid:
    levels: Tuple[FeatureMap, ...]

    def __post_init__(self):
        levels = tuple(self.levels)
        if not levels:
            raise ContractError("feature pyramid needs at least one level")
        for k, fmap in enumerate(levels):
            if fmap.stride != 2 ** k:
                raise ContractError(f"level {k} has stride {fmap.stride}, expected {2 ** k}")
            if fmap.channels != levels[0].channels:
                raise ContractError("all pyramid levels must share the channel count")
            if k > 0:
                prev = levels[k - 1]
                expected = (-(-prev.height // 2), -(-prev.width // 2))
                if (fmap.height, fmap.width) != expected:
                    raise ContractError(f"level {k} is {fmap.height}x{fmap.width}, expected {expected}")
        object.__setattr__(self, "levels", levels)

    def __getitem__(self, k: int) -> FeatureMap:
        return self.levels[k]

    def __len__(self):
        return len(self.levels)

    @property
    def image_size(self) -> Tuple[int, int]:
        """(width, height) of the finest level"""
        return (self.levels[0].width, self.levels[0].height)


def image_features(image: np.ndarray) -> np.ndarray:
    """Per-pixel I_0 channels of an (H, W, 3) uint8 raster"""
    rgb = np.asarray(image, dtype=np.float64) / 255.0
    gray = rgb @ _GRAY_WEIGHTS
    p = np.pad(gray, 1, mode="edge")
    grad_u = (p[:-2, 2:] + 2.0 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2.0 * p[1:-1, :-2] + p[2:, :-2])
    grad_v = (p[2:, :-2] + 2.0 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2.0 * p[:-2, 1:-1] + p[:-2, 2:])
    return np.concatenate(
        [
            rgb,
            gray[..., None],
            np.abs(grad_u)[..., None] / _SOBEL_MAX,
            np.abs(grad_v)[..., None] / _SOBEL_MAX,
        ],
        axis=2,
    )


def avg_pool2(data: np.ndarray) -> np.ndarray:
    """2x2 average pooling with ceiling output size; edge cells average what exists"""
    h, w, c = data.shape
    h2, w2 = -(-h // 2), -(-w // 2)
    padded = np.zeros((2 * h2, 2 * w2, c))
    counts = np.zeros((2 * h2, 2 * w2, 1))
    padded[:h, :w] = data
    counts[:h, :w] = 1.0
    sums = padded.reshape(h2, 2, w2, 2, c).sum(axis=(1, 3))
    n = counts.reshape(h2, 2, w2, 2, 1).sum(axis=(1, 3))
    return sums / n


def build_pyramid(image: np.ndarray, num_levels: int = NUM_LEVELS) -> FeaturePyramid:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ContractError(f"image must be HxWx3, got shape {image.shape}")
    if image.shape[0] < 2 or image.shape[1] < 2:
        raise ContractError("image must be at least 2x2")
    data = image_features(image)
    levels = [FeatureMap(data, stride=1)]
    for k in range(1, num_levels):
        data = avg_pool2(data)
        levels.append(FeatureMap(data, stride=2 ** k))
    return FeaturePyramid(tuple(levels))


def bilinear_sample(fmap: FeatureMap, p: Sequence[float]) -> np.ndarray:
    """C-vector at image position p = (u, v); positions outside the map are clamped"""
    return bilinear_sample_many(fmap, np.asarray(p, dtype=np.float64).reshape(1, 2))[0]


def bilinear_sample_many(fmap: FeatureMap, uv: np.ndarray) -> np.ndarray:
    """(N, C) samples for an (N, 2) array of image positions"""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    if not np.isfinite(uv).all():
        raise ContractError("sample positions must be finite")
    x = np.clip(uv[:, 0] / fmap.stride - 0.5, 0.0, fmap.width - 1)
    y = np.clip(uv[:, 1] / fmap.stride - 0.5, 0.0, fmap.height - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, fmap.width - 1)
    y1 = np.minimum(y0 + 1, fmap.height - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    d = fmap.data
    top = (1.0 - fx) * d[y0, x0] + fx * d[y0, x1]
    bottom = (1.0 - fx) * d[y1, x0] + fx * d[y1, x1]
    return (1.0 - fy) * top + fy * bottom


def read_feature_map(blob: bytes) -> FeatureMap:
    """
    Feature tensor file: 16-byte header of little-endian uint32 (H, W, C, level)
    followed by H*W*C little-endian float32 values in row-major order.
    """
    if len(blob) < 16:
        raise KittiFormatError("feature tensor shorter than its 16-byte header")
    height, width, channels, level = (int(v) for v in np.frombuffer(blob[:16], dtype=_HEADER_DTYPE))
    expected = height * width * channels * 4
    if len(blob) - 16 != expected:
        raise KittiFormatError(f"feature tensor has {len(blob) - 16} data bytes, expected {expected}")
    data = np.frombuffer(blob[16:], dtype="<f4").reshape(height, width, channels)
    return FeatureMap(data.astype(np.float64), stride=2 ** level)


def write_feature_map(fmap: FeatureMap) -> bytes:
    header = np.array([fmap.height, fmap.width, fmap.channels, fmap.level], dtype=_HEADER_DTYPE)
    return header.tobytes() + np.ascontiguousarray(fmap.data, dtype="<f4").tobytes()


def pyramid_from_maps(maps: List[FeatureMap]) -> FeaturePyramid:
    """Assemble externally computed feature maps, finest first"""
    return FeaturePyramid(tuple(sorted(maps, key=lambda m: m.stride)))
