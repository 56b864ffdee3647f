"""Bracketed exposure sequence generation and fusion forward models.

A bracket is the input image re-exposed by e stops, X * 2**e, clamped to
[0, 1] to model sensor saturation. Two fusion models combine the brackets
in pyramid space:

* weight-map fusion (BEF): each band of each bracket is multiplied by its
  own per-pixel weight map and the weighted bands are summed per level;
* convolutional fusion (CBEF): the per-pixel scalar weight is replaced by
  a per-pixel KxK kernel applied to the band neighborhood (mirrored
  borders), giving spatially varying filtering per bracket and level.

Both parameter families carry a sum-to-one constraint per output position
(across brackets, and across kernel taps for the convolutional case);
project_constraints renormalizes onto that constraint set. Parameters may
be signed; only the sum is constrained.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .image import DimensionError, clamp01
from . import pyramid

_RESET_TOL = 1e-6  # positions whose sum is this close to 0 reset to identity


@dataclass(frozen=True)
class BracketSpec:
    """Exposure bracket plan: shift values in stops, bounded by max_shift."""

    shifts: tuple
    max_shift: float = 1.0

    def __post_init__(self):
        if len(self.shifts) < 1:
            raise ValueError("need at least one exposure shift")
        if self.max_shift <= 0:
            raise ValueError("max_shift must be positive")
        if list(self.shifts) != sorted(self.shifts):
            raise ValueError("shifts must be ascending")
        if any(abs(e) > self.max_shift + 1e-12 for e in self.shifts):
            raise ValueError(f"shifts exceed +-{self.max_shift}")

    @property
    def count(self) -> int:
        return len(self.shifts)

    @classmethod
    def symmetric(cls, count: int = 5, max_shift: float = 1.0) -> "BracketSpec":
        """Evenly spaced shifts over [-max_shift, max_shift]; count=1 gives {0}."""
        if count == 1:
            return cls((0.0,), max_shift)
        shifts = tuple(np.linspace(-max_shift, max_shift, count))
        return cls(shifts, max_shift)


def generate_brackets(img: np.ndarray, spec: BracketSpec) -> list[np.ndarray]:
    """Re-expose the image at each shift: clamp01(img * 2**e), in shift order."""
    img = np.asarray(img, dtype=np.float64)
    return [clamp01(img * 2.0**e) for e in spec.shifts]


def decompose_brackets(brackets, levels: int) -> list[list[np.ndarray]]:
    """Pyramid of every bracket; [exposure][level] indexing."""
    return [pyramid.decompose(b, levels) for b in brackets]


@dataclass
class WeightMaps:
    """Per-level, per-exposure scalar weight maps, one value per band entry.

    levels[l] has shape (N, H_l, W_l, C) matching band l of the brackets.
    """

    levels: list = field(default_factory=list)

    @classmethod
    def identity(cls, band_shapes, n_exposures: int) -> "WeightMaps":
        """Uniform 1/N everywhere; the projected no-op initialization."""
        return cls(
            [
                np.full((n_exposures,) + tuple(shape), 1.0 / n_exposures)
                for shape in band_shapes
            ]
        )

    @property
    def n_exposures(self) -> int:
        return self.levels[0].shape[0]

    def copy(self) -> "WeightMaps":
        return WeightMaps([lvl.copy() for lvl in self.levels])


@dataclass
class KernelField:
    """Per-level, per-exposure, per-position KxK kernels.

    levels[l] has shape (N, H_l, W_l, C, K, K); entry (i, p, q) weights the
    band value of exposure i at the neighbor offset q of position p.
    """

    kernel_size: int
    levels: list = field(default_factory=list)

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd and >= 1, got {self.kernel_size}")

    @classmethod
    def identity(cls, band_shapes, n_exposures: int, kernel_size: int) -> "KernelField":
        """Center tap 1/N, all other taps zero: fusing yields the bracket mean."""
        k = kernel_size
        levels = []
        for shape in band_shapes:
            arr = np.zeros((n_exposures,) + tuple(shape) + (k, k))
            arr[..., k // 2, k // 2] = 1.0 / n_exposures
            levels.append(arr)
        return cls(kernel_size, levels)

    @property
    def n_exposures(self) -> int:
        return self.levels[0].shape[0]

    def copy(self) -> "KernelField":
        return KernelField(self.kernel_size, [lvl.copy() for lvl in self.levels])


def band_shapes_for(img_shape, levels: int):
    """Band shapes (H_l, W_l, C) a decomposition of img_shape would produce."""
    h, w, c = img_shape
    return [(lh, lw, c) for lh, lw in pyramid.level_shapes(h, w, levels)]


def _identity_like(params):
    if isinstance(params, WeightMaps):
        shapes = [lvl.shape[1:] for lvl in params.levels]
        return WeightMaps.identity(shapes, params.n_exposures)
    shapes = [lvl.shape[1:4] for lvl in params.levels]
    return KernelField.identity(shapes, params.n_exposures, params.kernel_size)


def _position_sums(level_arr, is_kernels: bool) -> np.ndarray:
    axes = (0, 4, 5) if is_kernels else (0,)
    return level_arr.sum(axis=axes)


def project_constraints(params):
    """Renormalize so entries at every position sum to one.

    Positions whose sum is within 1e-6 of zero cannot be rescaled and are
    reset to the identity initialization instead. Idempotent. Returns a new
    object of the same type.
    """
    out = params.copy()
    ident = _identity_like(params)
    is_kernels = isinstance(params, KernelField)
    for lvl, id_lvl in zip(out.levels, ident.levels):
        sums = _position_sums(lvl, is_kernels)
        degenerate = np.abs(sums) < _RESET_TOL
        safe = np.where(degenerate, 1.0, sums)
        if is_kernels:
            lvl /= safe[None, :, :, :, None, None]
            if degenerate.any():
                mask = np.broadcast_to(
                    degenerate[None, :, :, :, None, None], lvl.shape
                )
                lvl[mask] = id_lvl[mask]
        else:
            lvl /= safe[None, :, :, :]
            if degenerate.any():
                mask = np.broadcast_to(degenerate[None, :, :, :], lvl.shape)
                lvl[mask] = id_lvl[mask]
    return out


def constraint_violation(params) -> float:
    """Largest absolute deviation of any position sum from one."""
    is_kernels = isinstance(params, KernelField)
    worst = 0.0
    for lvl in params.levels:
        sums = _position_sums(lvl, is_kernels)
        worst = max(worst, float(np.abs(sums - 1.0).max()))
    return worst


def _band_windows(band: np.ndarray, kernel_size: int) -> np.ndarray:
    """Sliding KxK neighborhoods of a band, mirrored at the borders.

    Output shape (H, W, C, K, K); [..., dy, dx] is the band value at
    spatial offset (dy - K//2, dx - K//2).
    """
    r = kernel_size // 2
    if r == 0:
        return band[:, :, :, None, None]
    padded = np.pad(band, ((r, r), (r, r), (0, 0)), mode="reflect")
    return np.lib.stride_tricks.sliding_window_view(
        padded, (kernel_size, kernel_size), axis=(0, 1)
    )


def _check_params(bracket_pyrs, params):
    n = len(bracket_pyrs)
    if len(params.levels) != len(bracket_pyrs[0]):
        raise DimensionError(
            f"parameter levels {len(params.levels)} != pyramid levels "
            f"{len(bracket_pyrs[0])}"
        )
    for l, lvl in enumerate(params.levels):
        if lvl.shape[0] != n or lvl.shape[1:4] != bracket_pyrs[0][l].shape:
            raise DimensionError(
                f"level {l}: parameter shape {lvl.shape} does not match band "
                f"shape {bracket_pyrs[0][l].shape} with {n} exposures"
            )


def fused_bands(bracket_pyrs, params) -> list[np.ndarray]:
    """Per-level combination of bracket bands under the given parameters."""
    _check_params(bracket_pyrs, params)
    out = []
    if isinstance(params, WeightMaps):
        for l, lvl in enumerate(params.levels):
            bands = np.stack([bp[l] for bp in bracket_pyrs])
            out.append((lvl * bands).sum(axis=0))
    else:
        k = params.kernel_size
        for l, lvl in enumerate(params.levels):
            acc = np.zeros(bracket_pyrs[0][l].shape)
            for i in range(lvl.shape[0]):
                windows = _band_windows(bracket_pyrs[i][l], k)
                acc += (lvl[i] * windows).sum(axis=(-2, -1))
            out.append(acc)
    return out


def fuse_from_pyramids(bracket_pyrs, params) -> np.ndarray:
    """Fused image before range repair (may leave [0, 1])."""
    return pyramid.reconstruct(fused_bands(bracket_pyrs, params))


def fuse_bef(brackets, weights: WeightMaps, levels: int) -> np.ndarray:
    """Weight-map fusion of exposure brackets; output clamped to [0, 1]."""
    pyrs = decompose_brackets(brackets, levels)
    return clamp01(fuse_from_pyramids(pyrs, weights))


def fuse_cbef(brackets, kernels: KernelField, levels: int) -> np.ndarray:
    """Convolutional fusion of exposure brackets; output clamped to [0, 1]."""
    pyrs = decompose_brackets(brackets, levels)
    return clamp01(fuse_from_pyramids(pyrs, kernels))


def param_gradient_from_pyramids(bracket_pyrs, params, grad_wrt_output):
    """Gradient of <clamp01(fused), grad_wrt_output> w.r.t. the parameters.

    The clamp contributes a hard gate: positions whose pre-clamp value left
    [0, 1] pass no gradient. The rest is the transpose of reconstruction
    followed by the per-level contraction with the bracket bands (weights)
    or band neighborhoods (kernels).
    """
    grad_wrt_output = np.asarray(grad_wrt_output, dtype=np.float64)
    pre = fuse_from_pyramids(bracket_pyrs, params)
    if pre.shape != grad_wrt_output.shape:
        raise DimensionError(
            f"gradient shape {grad_wrt_output.shape} != fused shape {pre.shape}"
        )
    gated = np.where((pre >= 0.0) & (pre <= 1.0), grad_wrt_output, 0.0)
    band_grads = pyramid.reconstruct_adjoint(gated, len(params.levels))
    if isinstance(params, WeightMaps):
        grads = []
        for l, g in enumerate(band_grads):
            bands = np.stack([bp[l] for bp in bracket_pyrs])
            grads.append(g[None] * bands)
        return WeightMaps(grads)
    k = params.kernel_size
    grads = []
    for l, g in enumerate(band_grads):
        lvl = np.empty_like(params.levels[l])
        for i in range(params.levels[l].shape[0]):
            windows = _band_windows(bracket_pyrs[i][l], k)
            lvl[i] = g[:, :, :, None, None] * windows
        grads.append(lvl)
    return KernelField(k, grads)


def fusion_param_gradient(brackets, params, levels: int, grad_wrt_output):
    """As param_gradient_from_pyramids but starting from raw brackets."""
    pyrs = decompose_brackets(brackets, levels)
    return param_gradient_from_pyramids(pyrs, params, grad_wrt_output)


# Parameter dump format: little-endian header then float32 level blobs.
#   magic   4s   b"AXPF"
#   version u32  1
#   kind    u32  0 = weight maps, 1 = kernel field
#   levels  u32  L
#   expos   u32  N
#   ksize   u32  K (1 for weight maps)
#   chans   u32  C
#   then L pairs (H_l u32, W_l u32), then the level tensors in order,
#   each flattened C-order float32.
_MAGIC = b"AXPF"
_VERSION = 1


def save_params(params, path) -> None:
    """Write fusion parameters in the documented binary layout."""
    is_kernels = isinstance(params, KernelField)
    k = params.kernel_size if is_kernels else 1
    n = params.n_exposures
    c = params.levels[0].shape[3]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(
            struct.pack(
                "<IIIIII", _VERSION, 1 if is_kernels else 0, len(params.levels), n, k, c
            )
        )
        for lvl in params.levels:
            fh.write(struct.pack("<II", lvl.shape[1], lvl.shape[2]))
        for lvl in params.levels:
            fh.write(np.ascontiguousarray(lvl, dtype="<f4").tobytes())


def load_params(path):
    """Read a parameter dump written by save_params."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: bad magic")
    version, kind, n_levels, n, k, c = struct.unpack_from("<IIIIII", blob, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    offset = 28
    dims = []
    for _ in range(n_levels):
        h, w = struct.unpack_from("<II", blob, offset)
        dims.append((h, w))
        offset += 8
    levels = []
    for h, w in dims:
        shape = (n, h, w, c) if kind == 0 else (n, h, w, c, k, k)
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        levels.append(arr.reshape(shape).astype(np.float64))
    if kind == 0:
        return WeightMaps(levels)
    return KernelField(k, levels)
