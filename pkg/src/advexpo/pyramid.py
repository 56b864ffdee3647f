"""Laplacian pyramid decomposition, exact inverse, and adjoint.

The decomposition uses the separable 5-tap binomial kernel [1,4,6,4,1]/16
with mirrored borders (edge pixel not repeated). Downsampling keeps every
other sample, so a level of size n reduces to ceil(n/2); upsampling
zero-inserts to the recorded finer size and blurs with the kernel scaled
by 2 per axis. Reconstruction adds back exactly what decomposition
subtracted, so decompose/reconstruct invert each other to float64
round-off for any image size.

reconstruct is linear in the bands; reconstruct_adjoint applies the exact
transpose of that linear map, which is what gradient-based callers need to
push a loss gradient from the reconstructed image back onto the bands.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage as ndi

from .image import DimensionError

BLUR_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
_PAD = 2  # kernel half width


def _reflect_indices(n: int) -> np.ndarray:
    """Source index for each position of a mirror-padded length-n axis."""
    return np.pad(np.arange(n), _PAD, mode="reflect")


def _blur_axis(x: np.ndarray, axis: int) -> np.ndarray:
    """5-tap binomial blur along one axis with mirrored borders."""
    idx = _reflect_indices(x.shape[axis])
    padded = np.take(x, idx, axis=axis)
    out = ndi.convolve1d(padded, BLUR_KERNEL, axis=axis, mode="constant")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(_PAD, _PAD + x.shape[axis])
    return out[tuple(sl)]


def _blur_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    """Exact transpose of _blur_axis along one axis.

    The blur is crop . convolve . mirror-pad; its transpose zero-embeds,
    convolves (the kernel is symmetric) and folds the pad positions back
    onto their mirror sources.
    """
    n = g.shape[axis]
    pad = [(0, 0)] * g.ndim
    pad[axis] = (_PAD, _PAD)
    embedded = np.pad(g, pad, mode="constant")
    full = ndi.convolve1d(embedded, BLUR_KERNEL, axis=axis, mode="constant")
    idx = _reflect_indices(n)
    moved = np.moveaxis(full, axis, 0)
    out = np.zeros_like(g)
    out_moved = np.moveaxis(out, axis, 0)
    out_moved += moved[_PAD : _PAD + n]
    np.add.at(out_moved, idx[:_PAD], moved[:_PAD])
    np.add.at(out_moved, idx[_PAD + n :], moved[_PAD + n :])
    return out


def _blur(img: np.ndarray) -> np.ndarray:
    return _blur_axis(_blur_axis(img, 0), 1)


def _reduce(img: np.ndarray) -> np.ndarray:
    """Blur then keep every other row/column; n maps to ceil(n/2)."""
    return _blur(img)[::2, ::2]


def _expand(coarse: np.ndarray, target_hw) -> np.ndarray:
    """Zero-insert to the target size, then blur with a 2x-per-axis gain."""
    th, tw = target_hw
    if coarse.shape[0] != -(-th // 2) or coarse.shape[1] != -(-tw // 2):
        raise DimensionError(
            f"cannot expand {coarse.shape[:2]} to {target_hw}: size mismatch"
        )
    z = np.zeros((th, tw) + coarse.shape[2:], dtype=np.float64)
    z[::2, ::2] = coarse
    return 4.0 * _blur(z)


def _expand_adjoint(g: np.ndarray) -> np.ndarray:
    """Transpose of _expand: adjoint blur (same gain) then even-sample take."""
    return 4.0 * _blur_axis_adjoint(_blur_axis_adjoint(g, 0), 1)[::2, ::2]


def level_shapes(height: int, width: int, levels: int) -> list[tuple[int, int]]:
    """Spatial size of each pyramid level, finest first."""
    shapes = [(height, width)]
    for _ in range(levels - 1):
        h, w = shapes[-1]
        shapes.append((-(-h // 2), -(-w // 2)))
    return shapes


def _check_levels(height: int, width: int, levels: int) -> None:
    if levels < 1:
        raise DimensionError(f"level count must be >= 1, got {levels}")
    if min(height, width) < 2 ** (levels - 1):
        raise DimensionError(
            f"{levels} levels need min dim >= {2 ** (levels - 1)}, "
            f"got {height}x{width}"
        )


def decompose(img: np.ndarray, levels: int) -> list[np.ndarray]:
    """Split an image into detail bands plus a low-pass residual.

    Returns `levels` arrays, finest band first; the last entry is the
    blurred-and-decimated residual. With levels=1 the single band is the
    image itself.
    """
    img = np.asarray(img, dtype=np.float64)
    _check_levels(img.shape[0], img.shape[1], levels)
    bands = []
    current = img
    for _ in range(levels - 1):
        smaller = _reduce(current)
        bands.append(current - _expand(smaller, current.shape[:2]))
        current = smaller
    bands.append(current)
    return bands


def reconstruct(bands) -> np.ndarray:
    """Invert decompose: residual is repeatedly expanded and detail added.

    Output is not clamped; fused bands can leave [0, 1] and callers decide
    how to repair the range.
    """
    if not bands:
        raise DimensionError("empty pyramid")
    shapes = [b.shape for b in bands]
    expect = level_shapes(shapes[0][0], shapes[0][1], len(bands))
    for band, (h, w) in zip(bands, expect):
        if band.shape[:2] != (h, w) or band.shape[2:] != shapes[0][2:]:
            raise DimensionError(f"inconsistent level shapes {shapes}")
    current = np.asarray(bands[-1], dtype=np.float64)
    for band in reversed(bands[:-1]):
        current = band + _expand(current, band.shape[:2])
    return current


def reconstruct_adjoint(grad_out: np.ndarray, levels: int) -> list[np.ndarray]:
    """Transpose of reconstruct as a linear map over the bands.

    Given a gradient with respect to the reconstructed image, returns the
    gradient with respect to each band, in decompose order. Satisfies
    <reconstruct(P), g> == <P, reconstruct_adjoint(g, len(P))> exactly up
    to round-off.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    _check_levels(grad_out.shape[0], grad_out.shape[1], levels)
    grads = []
    current = grad_out
    for _ in range(levels - 1):
        grads.append(current)
        current = _expand_adjoint(current)
    grads.append(current)
    return grads
