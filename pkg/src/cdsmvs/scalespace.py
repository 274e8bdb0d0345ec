"""Gaussian derivative filters and the two reference normal-curvature operators.

Kernels here follow convolution semantics (``scipy.ndimage.convolve``), so
``convolve(I, G_x)`` is the smoothed ``dI/dx``.  The second-derivative kernels
are symmetric under a 180 degree flip, so they give identical results under
the learnable layers' cross-correlation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import EpipolarField

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class GaussianBank:
    sigma: float
    G: np.ndarray
    G_x: np.ndarray
    G_y: np.ndarray
    G_xx: np.ndarray
    G_xy: np.ndarray
    G_yy: np.ndarray

    @property
    def size(self) -> int:
        return self.G.shape[0]

    def scaled(self, s: float) -> "GaussianBank":
        """Same bank with every derivative kernel multiplied by ``s``."""
        return GaussianBank(self.sigma, self.G, s * self.G_x, s * self.G_y,
                            s * self.G_xx, s * self.G_xy, s * self.G_yy)


def default_size(sigma: float) -> int:
    return 2 * int(np.ceil(3 * sigma)) + 1


def gaussian_bank(sigma: float, size: int | None = None) -> GaussianBank:
    """Sampled Gaussian and its first/second derivatives on a ``size x size`` grid.

    The 2D kernels are outer products of sampled 1D profiles.  Each 1D
    profile is corrected so it reproduces polynomials up to degree two
    exactly: the smoothing tap sums to 1, the first-derivative tap returns 1
    on a unit ramp and the second-derivative tap sums to 0 and returns 1 on
    ``x^2 / 2``.  This keeps the zero-sum invariants exact and removes the
    truncation bias of the raw samples.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    size = default_size(sigma) if size is None else int(size)
    if size < 3 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 3, got {size}")
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    g0 = g / g.sum()
    # convolution: (I * k)(p) = sum_q k(q) I(p - q), so a ramp picks up -sum k(q) q
    g1 = -x / sigma ** 2 * g
    g1 = g1 / -(g1 * x).sum()
    g2 = (x ** 2 / sigma ** 4 - 1 / sigma ** 2) * g
    g2 = g2 - g2.mean()
    g2 = g2 / (g2 * x ** 2 / 2).sum()
    G = np.outer(g0, g0)  # rows are y, columns are x
    return GaussianBank(
        sigma=float(sigma),
        G=G,
        G_x=np.outer(g0, g1),
        G_y=np.outer(g1, g0),
        G_xx=np.outer(g0, g2),
        G_xy=np.outer(g1, g1),
        G_yy=np.outer(g2, g0),
    )


@dataclass
class CurvatureMap:
    values: np.ndarray  # [H, W]
    sigma: float | str


def to_luminance(image: np.ndarray) -> np.ndarray:
    """``[3, H, W]`` RGB to ``[H, W]`` luminance; 2D input is returned as is."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[0] == 1:
        return image[0]
    if image.ndim == 3 and image.shape[0] == 3:
        return np.tensordot(LUMA, image, axes=1)
    raise ValueError(f"expected [H, W], [1, H, W] or [3, H, W], got {image.shape}")


def _omega_components(omega, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(omega, EpipolarField):
        return omega.u, omega.v
    om = np.asarray(omega, dtype=np.float64)
    if om.shape == (2,):
        return np.full(shape, om[0]), np.full(shape, om[1])
    if om.shape == (2,) + tuple(shape):
        return om[0], om[1]
    raise ValueError(f"omega must be [2] or [2, H, W], got {om.shape}")


def filter_image(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size convolution with whole-sample reflection at the border."""
    return ndimage.convolve(image, kernel, mode="mirror")


def derivatives(image: np.ndarray, bank: GaussianBank) -> dict[str, np.ndarray]:
    img = to_luminance(image)
    return {name: filter_image(img, getattr(bank, "G_" + name)) for name in ("x", "y", "xx", "xy", "yy")}


def quadratic_form(u, v, ixx, ixy, iyy):
    return u * u * ixx + 2 * u * v * ixy + v * v * iyy


def normal_curvature_exact(image: np.ndarray, omega, sigma: float, size: int | None = None) -> CurvatureMap:
    """Normal curvature of the smoothed intensity surface along ``omega``.

    Uses the full first-fundamental-form denominator.  RGB input is reduced
    to luminance first.
    """
    d = derivatives(image, gaussian_bank(sigma, size))
    u, v = _omega_components(omega, d["x"].shape)
    num = quadratic_form(u, v, d["xx"], d["xy"], d["yy"])
    den = np.sqrt(1 + d["x"] ** 2 + d["y"] ** 2) * (1 + (u * d["x"] + v * d["y"]) ** 2)
    return CurvatureMap(num / den, sigma)


def normal_curvature_approx(image: np.ndarray, omega, sigma: float, kernel_scale: float = 0.01,
                            size: int | None = None) -> CurvatureMap:
    """Denominator-free curvature ``u^2 I_xx + 2uv I_xy + v^2 I_yy``.

    Derivative kernels are multiplied by ``kernel_scale`` so responses stay
    far below 1; divide by ``kernel_scale`` to compare against the exact form.
    """
    bank = gaussian_bank(sigma, size).scaled(kernel_scale)
    img = to_luminance(image)
    u, v = _omega_components(omega, img.shape)
    ixx = filter_image(img, bank.G_xx)
    ixy = filter_image(img, bank.G_xy)
    iyy = filter_image(img, bank.G_yy)
    return CurvatureMap(quadratic_form(u, v, ixx, ixy, iyy), sigma)
