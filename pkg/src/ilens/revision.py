"""Smooth, edge-preserving hue / saturation / brightness / sharpness revision.

Each revision centre c owns a cone-shaped template G clipped by an edge mask
M^(c) (pixels reachable from c without crossing an edge). Per-operator
coefficients k^(c,op) scale those windows; at every pixel the summed
contributions pass through tanh to give a heatmap Delta^(op) in [-1, 1],
which then drives the operator itself.

The whole pipeline is written on :mod:`ilens.autodiff` tensors so the
revision is differentiable with respect to the coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, sparse

from . import autodiff as ad
from .errors import BadInputError
from .scorer import GridImage

OPS = ("hue", "sat", "bright", "blursharp")
DEFAULT_BETAS = {"hue": 0.35, "sat": 3.0, "bright": 1.5}
LOGIT_EPS = 1e-4
STAGE_ORDERS = {"blur-first": ("blursharp", "hsv"), "blur-last": ("hsv", "blursharp")}


# colour space ------------------------------------------------------------------


def _rgb_to_hsv_t(rgb):
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = ad.maximum(ad.maximum(r, g), b)
    mn = ad.minimum(ad.minimum(r, g), b)
    c = v - mn
    vd, cd = v.data, c.data
    s = ad.where(vd > 0, c / ad.where(vd > 0, v, 1.0), 0.0)
    safe_c = ad.where(cd > 0, c, 1.0)
    is_r = vd == r.data
    is_g = ~is_r & (vd == g.data)
    h_r = ad.mod((g - b) / safe_c, 6.0)
    h_g = (b - r) / safe_c + 2.0
    h_b = (r - g) / safe_c + 4.0
    h6 = ad.where(is_r, h_r, ad.where(is_g, h_g, h_b))
    # achromatic pixels get hue 0
    h = ad.where(cd > 0, ad.wrap01(h6 * (1.0 / 6.0)), 0.0)
    return h, s, v


def _hsv_to_rgb_t(h, s, v):
    h6 = h * 6.0
    sector_f = np.floor(h6.data)
    sector = np.mod(sector_f, 6).astype(int)
    f = h6 - sector_f
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))

    def pick(choices):
        out = choices[5]
        for k in range(4, -1, -1):
            out = ad.where(sector == k, choices[k], out)
        return out

    r = pick([v, q, p, p, t, v])
    g = pick([t, v, v, q, p, p])
    b = pick([p, p, t, v, v, q])
    return ad.stack([r, g, b], axis=-1)


def rgb_to_hsv(rgb) -> np.ndarray:
    """Hexcone RGB -> HSV for arrays of shape (..., 3) in [0, 1]; hue in [0, 1)."""
    h, s, v = _rgb_to_hsv_t(ad.Tensor(rgb))
    return np.stack([h.data, s.data, v.data], axis=-1)


def hsv_to_rgb(hsv) -> np.ndarray:
    hsv = ad.Tensor(hsv)
    return _hsv_to_rgb_t(hsv[..., 0], hsv[..., 1], hsv[..., 2]).data


# templates, edges, masks --------------------------------------------------------


def cone_template(size: int, lam: float = 1.0) -> np.ndarray:
    """G_ij = max(1 - lam * dist / half_width, 0) on a size x size window."""
    if size < 1 or size % 2 == 0:
        raise BadInputError(f"template size must be odd and positive, got {size}")
    if lam <= 0:
        raise BadInputError("lambda must be positive")
    half = (size - 1) // 2
    if half == 0:
        return np.ones((1, 1))
    off = np.arange(size) - half
    dist = np.hypot(off[:, None], off[None, :]) / half
    return np.maximum(1.0 - lam * dist, 0.0)


def default_template_size(image: GridImage) -> int:
    ch = image.cell_size[0]
    return 2 * ch * 3 + 1


SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 4.0


def gradient_magnitude(pixels) -> np.ndarray:
    """Sobel gradient magnitude of the luminance, scaled so a unit step reads 1."""
    px = np.asarray(pixels, dtype=np.float64)
    lum = px @ np.array([0.299, 0.587, 0.114])
    gx = ndimage.correlate(lum, SOBEL_X, mode="reflect")
    gy = ndimage.correlate(lum, SOBEL_X.T, mode="reflect")
    return np.hypot(gx, gy)


def edge_pixels(pixels, low: float = 0.1, high: float = 0.2) -> np.ndarray:
    """Hysteresis-thresholded Sobel edges at pixel resolution."""
    if low > high:
        raise BadInputError("low threshold exceeds high threshold")
    mag = gradient_magnitude(pixels)
    weak = mag > low
    strong = mag > high
    labels, count = ndimage.label(weak, structure=np.ones((3, 3)))
    keep = np.zeros(count + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return keep[labels]


def edge_map(image: GridImage, low: float = 0.1, high: float = 0.2) -> np.ndarray:
    """Boolean (rows, cols) grid of cells that contain an edge pixel."""
    edges = edge_pixels(image.pixels, low, high)
    rows, cols = image.grid
    ch, cw = image.cell_size
    return edges.reshape(rows, ch, cols, cw).any(axis=(1, 3))


def cells_to_pixels(edge_cells, cell_size) -> np.ndarray:
    ch, cw = cell_size
    return np.repeat(np.repeat(np.asarray(edge_cells, dtype=bool), ch, axis=0), cw, axis=1)


_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def edge_mask(blocked, center, size: int) -> np.ndarray:
    """Binary size x size mask of window pixels 4-connected to ``center``.

    ``blocked`` is a pixel-resolution boolean map (True = edge). Blocked
    pixels and pixels outside the image are 0. A centre that is itself
    blocked keeps only its own pixel.
    """
    blocked = np.asarray(blocked, dtype=bool)
    H, W = blocked.shape
    cy, cx = int(center[0]), int(center[1])
    half = size // 2
    free = np.zeros((size, size), dtype=bool)
    y0, x0 = cy - half, cx - half
    ys, xs = max(y0, 0), max(x0, 0)
    ye, xe = min(y0 + size, H), min(x0 + size, W)
    free[ys - y0:ye - y0, xs - x0:xe - x0] = ~blocked[ys:ye, xs:xe]
    mask = np.zeros((size, size), dtype=bool)
    if blocked[cy, cx]:
        mask[half, half] = True
        return mask
    labels, _ = ndimage.label(free, structure=_CROSS)
    return labels == labels[half, half]


def grid_centers(image: GridImage, stride: int = 1) -> np.ndarray:
    """Centre pixel of every ``stride``-th grid cell, as (row, col) pairs."""
    rows, cols = image.grid
    ch, cw = image.cell_size
    rr, cc = np.meshgrid(np.arange(0, rows, stride), np.arange(0, cols, stride), indexing="ij")
    return np.stack([rr.ravel() * ch + ch // 2, cc.ravel() * cw + cw // 2], axis=1)


def revision_basis(centers, size, lam, blocked, shape) -> sparse.csr_matrix:
    """Sparse (C, H*W) matrix whose row c is G * M^(c) placed around centre c."""
    H, W = shape
    G = cone_template(size, lam)
    half = size // 2
    rows, cols, vals = [], [], []
    for idx, (cy, cx) in enumerate(np.asarray(centers)):
        w = G * edge_mask(blocked, (cy, cx), size)
        yy, xx = np.nonzero(w)
        py, px = yy + cy - half, xx + cx - half
        ok = (py >= 0) & (py < H) & (px >= 0) & (px < W)
        rows.append(np.full(ok.sum(), idx))
        cols.append(py[ok] * W + px[ok])
        vals.append(w[yy[ok], xx[ok]])
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(centers), H * W),
    )


# field --------------------------------------------------------------------------


@dataclass
class RevisionField:
    """Learnable per-centre, per-operator coefficients plus template geometry.

    ``coeffs`` has shape (4, C) with rows ordered as :data:`OPS`.
    """

    centers: np.ndarray
    coeffs: np.ndarray
    template_size: int
    lam: float = 1.0
    betas: dict = field(default_factory=lambda: dict(DEFAULT_BETAS))

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.int64).reshape(-1, 2)
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.shape != (len(OPS), len(self.centers)):
            raise BadInputError(f"coeffs must have shape (4, {len(self.centers)})")
        if not np.all(np.isfinite(self.coeffs)):
            raise BadInputError("coefficients must be finite")
        if self.template_size < 1 or self.template_size % 2 == 0:
            raise BadInputError("template size must be odd")

    @classmethod
    def zeros(cls, image: GridImage, template_size=None, stride=1, lam=1.0, betas=None):
        centers = grid_centers(image, stride)
        size = template_size or default_template_size(image)
        return cls(centers, np.zeros((len(OPS), len(centers))), size, lam,
                   dict(betas or DEFAULT_BETAS))

    def with_coeffs(self, coeffs) -> RevisionField:
        return RevisionField(self.centers, coeffs, self.template_size, self.lam, dict(self.betas))

    def coefficient(self, op: str, c: int) -> float:
        return float(self.coeffs[OPS.index(op), c])


@dataclass
class RevisionResult:
    revised: GridImage
    heatmaps: dict


# operators ------------------------------------------------------------------------


def gaussian_kernel1d(kernel_size: int = 5, sigma: float | None = None) -> np.ndarray:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise BadInputError("kernel size must be odd")
    if sigma is None:
        sigma = 0.3 * ((kernel_size - 1) * 0.5 - 1) + 0.8
    x = np.arange(kernel_size) - kernel_size // 2
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def blur_matrix(n: int, kernel_size: int = 5, sigma: float | None = None) -> np.ndarray:
    """(n, n) matrix applying the 1-D Gaussian with reflect padding."""
    k = gaussian_kernel1d(kernel_size, sigma)
    r = kernel_size // 2
    if r >= n:
        raise BadInputError(f"kernel size {kernel_size} too large for length {n}")
    padded = np.pad(np.eye(n), ((r, r), (0, 0)), mode="reflect")
    return sum(k[t] * padded[t:t + n] for t in range(kernel_size))


def gaussian_blur(pixels, kernel_size: int = 5, sigma: float | None = None) -> np.ndarray:
    """Separable Gaussian blur per channel; sigma defaults to the usual size-based rule."""
    px = np.asarray(pixels, dtype=np.float64)
    Mh = blur_matrix(px.shape[0], kernel_size, sigma)
    Mw = blur_matrix(px.shape[1], kernel_size, sigma)
    return np.einsum("ij,jkc,lk->ilc", Mh, px, Mw)


def apply_hue(hue, delta, beta: float = DEFAULT_BETAS["hue"]) -> np.ndarray:
    """(hue + beta * delta) wrapped into [0, 1)."""
    return ad.wrap01(np.asarray(hue, dtype=np.float64) + beta * np.asarray(delta)).data


def _logit(x):
    return np.log(x) - np.log1p(-x)


def apply_sat(sat, delta, beta: float = DEFAULT_BETAS["sat"], eps: float = LOGIT_EPS):
    """sigmoid(beta * delta + logit(sat)); sat is pre-clamped to [eps, 1 - eps]."""
    s = np.clip(np.asarray(sat, dtype=np.float64), eps, 1.0 - eps)
    return ad.sigmoid(beta * np.asarray(delta) + _logit(s))


def apply_bright(value, delta, beta: float = DEFAULT_BETAS["bright"], eps: float = LOGIT_EPS):
    return apply_sat(value, delta, beta, eps)


def apply_blursharp(pixels, delta, kernel_size: int = 5, sigma: float | None = None):
    """delta * (blurred - x) + x per channel, clamped to [0, 1]."""
    px = np.asarray(pixels, dtype=np.float64)
    blurred = gaussian_blur(px, kernel_size, sigma)
    return np.clip(px + np.asarray(delta)[..., None] * (blurred - px), 0.0, 1.0)


def _logit_shift(x, delta, beta, eps=LOGIT_EPS):
    """Saturation/brightness update that is an exact identity where delta == 0.

    Elsewhere it equals sigmoid(beta * delta + logit(clip(x))). The gradient
    is that expression's derivative everywhere, including at delta == 0 where
    the two agree up to the clamp.
    """
    x, delta = ad.as_tensor(x), ad.as_tensor(delta)
    xc = np.clip(x.data, eps, 1.0 - eps)
    out_branch = ad.sigmoid(beta * delta.data + _logit(xc))
    out = np.where(delta.data == 0.0, x.data, out_branch)
    slope = out_branch * (1.0 - out_branch)
    inside = (x.data > eps) & (x.data < 1.0 - eps)

    def back(g):
        return g * slope * inside / (xc * (1.0 - xc)), g * slope * beta

    return ad.Tensor._make(out, (x, delta), back)


class Reviser:
    """Revision operators bound to one image, its edges and a field geometry.

    Templates, masks and the blurred image are computed once here; the
    coefficients are the only free input afterwards.
    """

    def __init__(
        self,
        image: GridImage,
        field: RevisionField,
        edges=None,
        blur_kernel: int = 5,
        blur_sigma: float | None = None,
        order: str = "blur-first",
    ):
        if order not in STAGE_ORDERS:
            raise BadInputError(f"order must be one of {sorted(STAGE_ORDERS)}")
        self.image = image
        self.field = field
        self.order = STAGE_ORDERS[order]
        H, W, _ = image.shape
        if edges is None:
            edges = image.edge_cells if image.edge_cells is not None else edge_map(image)
        self.edge_cells = np.asarray(edges, dtype=bool)
        self.blocked = cells_to_pixels(self.edge_cells, image.cell_size)
        self.basis = revision_basis(field.centers, field.template_size, field.lam,
                                    self.blocked, (H, W))
        self.Mh = blur_matrix(H, blur_kernel, blur_sigma)
        self.Mw = blur_matrix(W, blur_kernel, blur_sigma)
        self.pixels = image.pixels
        self.blurred = np.einsum("ij,jkc,lk->ilc", self.Mh, self.pixels, self.Mw)

    @property
    def n_centers(self) -> int:
        return len(self.field.centers)

    def deltas(self, coeffs):
        """Heatmap tensor of shape (4, H, W) from a (4, C) coefficient tensor."""
        H, W, _ = self.image.shape
        z = ad.sparse_rows_matmul(coeffs, self.basis)
        return z.tanh().reshape(len(OPS), H, W)

    def _blur_t(self, x):
        chw = x.transpose(2, 0, 1)
        out = ad.as_tensor(self.Mh) @ chw @ ad.as_tensor(self.Mw.T)
        return out.transpose(1, 2, 0)

    def graph(self, coeffs):
        """Revised RGB tensor and the (4, H, W) heatmap tensor."""
        coeffs = ad.as_tensor(coeffs)
        d = self.deltas(coeffs)
        betas = self.field.betas
        x = ad.Tensor(self.pixels)
        for stage in self.order:
            if stage == "blursharp":
                blurred = self.blurred if x.data is self.pixels else self._blur_t(x)
                step = d[3].reshape(*d.shape[1:], 1) * (blurred - x)
                x = ad.clip(x + step, 0.0, 1.0)
            else:
                h, s, v = _rgb_to_hsv_t(x)
                h2 = ad.wrap01(h + d[0] * betas["hue"])
                s2 = _logit_shift(s, d[1], betas["sat"])
                v2 = _logit_shift(v, d[2], betas["bright"])
                # residual form keeps untouched pixels bit-identical
                new = _hsv_to_rgb_t(h2, s2, v2)
                old = _hsv_to_rgb_t(h, s, v)
                x = ad.clip(x + (new - old), 0.0, 1.0, straight_through=True)
        return x, d

    def revise(self, coeffs=None) -> RevisionResult:
        coeffs = self.field.coeffs if coeffs is None else coeffs
        out, d = self.graph(ad.Tensor(coeffs))
        heat = {op: d.data[k].copy() for k, op in enumerate(OPS)}
        return RevisionResult(self.image.with_pixels(out.data), heat)

    def vjp(self, coeffs, grad_pixels) -> np.ndarray:
        """Gradient of <revised pixels, grad_pixels> with respect to coeffs."""
        k = ad.Tensor(np.array(coeffs, dtype=np.float64), requires_grad=True)
        out, _ = self.graph(k)
        out.backward(grad_pixels)
        return k.grad if k.grad is not None else np.zeros_like(k.data)


def field_delta(field: RevisionField, op: str, edges, shape, cell_size=(1, 1)) -> np.ndarray:
    """Delta^(op) over an image of ``shape`` (H, W).

    ``edges`` is a boolean cell grid with cells of ``cell_size`` pixels.
    """
    if op not in OPS:
        raise BadInputError(f"unknown operator {op!r}")
    blocked = cells_to_pixels(edges, cell_size)
    if blocked.shape != tuple(shape):
        raise BadInputError("edge grid does not cover the image")
    basis = revision_basis(field.centers, field.template_size, field.lam, blocked, shape)
    z = basis.T @ field.coeffs[OPS.index(op)]
    return np.tanh(np.asarray(z)).reshape(shape)


def compose_revision(image: GridImage, field: RevisionField, edges=None, **kwargs) -> RevisionResult:
    """Blur/sharpen in RGB, then hue, saturation and brightness in HSV."""
    return Reviser(image, field, edges, **kwargs).revise()
