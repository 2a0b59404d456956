"""Distributions of marginal-utility norms and the comparisons built on them."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from .errors import BadInputError
from .game_core import CoalitionGame
from .revision import gaussian_blur
from .saliency import CoalitionSample, SaliencyConfig, delta_vectors, sample_coalitions
from .scorer import ScorerModel, game_from_image

DEFAULT_BINS = 50


@dataclass
class DeltaHistogram:
    """Normalized histogram of ||Delta f||_2 over uniform bins on [0, upper]."""

    r: int
    edges: np.ndarray
    masses: np.ndarray
    count: int

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        self.masses = np.asarray(self.masses, dtype=np.float64)
        if len(self.edges) != len(self.masses) + 1:
            raise BadInputError("need one more edge than bins")
        if self.count and (np.any(self.masses < 0) or abs(self.masses.sum() - 1.0) > 1e-9):
            raise BadInputError("histogram masses must be non-negative and sum to 1")

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])


def bin_edges(upper: float, bins: int = DEFAULT_BINS) -> np.ndarray:
    # an all-zero sample still needs a non-degenerate range
    upper = float(upper) if upper > 0 else 1.0
    return np.linspace(0.0, upper, bins + 1)


def histogram(norms, r: int, upper: float | None = None, bins: int = DEFAULT_BINS) -> DeltaHistogram:
    """Bin norms uniformly over [0, upper]; upper defaults to their max."""
    norms = np.asarray(norms, dtype=np.float64).ravel()
    if norms.size == 0:
        raise BadInputError("cannot build a histogram from no samples")
    if np.any(norms < 0) or not np.all(np.isfinite(norms)):
        raise BadInputError("norms must be finite and non-negative")
    edges = bin_edges(norms.max() if upper is None else upper, bins)
    if norms.max() > edges[-1]:
        raise BadInputError(f"norm {norms.max()} exceeds the histogram range {edges[-1]}")
    counts, _ = np.histogram(norms, bins=edges)
    return DeltaHistogram(r, edges, counts / norms.size, int(norms.size))


def game_delta_norms(game: CoalitionGame, r: int, samples: int, seed=0) -> np.ndarray:
    config = SaliencyConfig(r_set=(r,), samples_per_r=samples, allow_large_r=True)
    drawn = sample_coalitions(game.n, config, rng_seed=seed)
    return np.linalg.norm(delta_vectors(game, drawn), axis=1)


def enumerate_delta_norms(game: CoalitionGame, r: int) -> np.ndarray:
    """||Delta f(i, L)||_2 for every i and every |L| = r not containing i."""
    n = game.n
    pairs = [
        CoalitionSample(0, i, L, r)
        for L in range(1 << n) if bin(L).count("1") == r
        for i in range(n) if not L >> i & 1
    ]
    return np.linalg.norm(delta_vectors(game, pairs), axis=1)


def corpus_delta_norms(corpus, model: ScorerModel, r: int, samples_per_image: int = 100,
                       seed: int = 0, batch_size: int = 64, jobs: int = 1) -> np.ndarray:
    """Pooled ||Delta f||_2 over coalitions sampled independently per image."""
    corpus = list(corpus)
    if not corpus:
        raise BadInputError("corpus is empty")
    out = []
    for idx, image in enumerate(corpus):
        game = game_from_image(model, image, batch_size=batch_size, jobs=jobs)
        out.append(game_delta_norms(game, r, samples_per_image, seed=[seed, idx]))
    return np.concatenate(out)


def delta_distribution(corpus, model: ScorerModel, r: int, samples_per_image: int = 100,
                       seed: int = 0, upper: float | None = None, bins: int = DEFAULT_BINS,
                       **kwargs) -> DeltaHistogram:
    norms = corpus_delta_norms(corpus, model, r, samples_per_image, seed, **kwargs)
    return histogram(norms, r, upper, bins)


def shared_histograms(norms_a, norms_b, r: int, bins: int = DEFAULT_BINS):
    """Histograms of two norm samples over a common range [0, max of both]."""
    upper = max(np.max(norms_a), np.max(norms_b))
    return histogram(norms_a, r, upper, bins), histogram(norms_b, r, upper, bins)


def tau_metric(hist_a: DeltaHistogram, hist_b: DeltaHistogram) -> np.ndarray:
    """Per-bin mass difference a - b; both must share their bin edges."""
    if hist_a.edges.shape != hist_b.edges.shape or not np.array_equal(hist_a.edges, hist_b.edges):
        raise BadInputError("histograms have different bin edges")
    return hist_a.masses - hist_b.masses


def denoise_corpus(corpus, kernel_size: int = 5, sigma: float | None = None):
    return [image.with_pixels(gaussian_blur(image.pixels, kernel_size, sigma)) for image in corpus]


def compare_corpora(corpus_a, corpus_b, model, r, samples_per_image=100, seed=0,
                    bins=DEFAULT_BINS, **kwargs):
    """(hist_a, hist_b, tau) with shared binning."""
    na = corpus_delta_norms(corpus_a, model, r, samples_per_image, seed, **kwargs)
    nb = corpus_delta_norms(corpus_b, model, r, samples_per_image, seed, **kwargs)
    ha, hb = shared_histograms(na, nb, r, bins)
    return ha, hb, tau_metric(ha, hb)


def kappa_metric(corpus, model, r, samples_per_image=100, seed=0, kernel_size=5,
                 sigma=None, bins=DEFAULT_BINS, **kwargs):
    """(denoised hist, original hist, kappa = denoised - original)."""
    return compare_corpora(denoise_corpus(corpus, kernel_size, sigma), corpus, model, r,
                           samples_per_image, seed, bins, **kwargs)


# foreground posterior ---------------------------------------------------------


def bayes_posterior(lik_f, lik_b, prior_f: float) -> np.ndarray:
    """P(F | bin) from per-bin likelihoods; NaN where both likelihoods vanish."""
    lik_f = np.asarray(lik_f, dtype=np.float64)
    lik_b = np.asarray(lik_b, dtype=np.float64)
    if not 0.0 < prior_f < 1.0:
        raise BadInputError("foreground prior must lie strictly between 0 and 1")
    num = lik_f * prior_f
    den = num + lik_b * (1.0 - prior_f)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)


@dataclass
class PosteriorCurve:
    edges: np.ndarray
    posterior: np.ndarray
    lik_f: np.ndarray
    lik_b: np.ndarray
    prior_f: float


def foreground_posterior(heatmaps, masks, bins=DEFAULT_BINS, value_range=(-1.0, 1.0)) -> PosteriorCurve:
    """P(F | Delta) per bin from heatmaps and aligned boolean foreground masks."""
    heatmaps = [np.asarray(h, dtype=np.float64) for h in heatmaps]
    masks = [np.asarray(m, dtype=bool) for m in masks]
    if not heatmaps or len(heatmaps) != len(masks):
        raise BadInputError("need one foreground mask per heatmap")
    for h, m in zip(heatmaps, masks):
        if h.shape != m.shape:
            raise BadInputError(f"heatmap shape {h.shape} != mask shape {m.shape}")
    fg = np.concatenate([h[m] for h, m in zip(heatmaps, masks)])
    bg = np.concatenate([h[~m] for h, m in zip(heatmaps, masks)])
    if fg.size == 0 or bg.size == 0:
        raise BadInputError("foreground and background must both be non-empty")
    edges = np.asarray(bins, dtype=np.float64) if np.ndim(bins) else np.linspace(*value_range, bins + 1)
    lik_f = np.histogram(np.clip(fg, edges[0], edges[-1]), bins=edges)[0] / fg.size
    lik_b = np.histogram(np.clip(bg, edges[0], edges[-1]), bins=edges)[0] / bg.size
    prior = fg.size / (fg.size + bg.size)
    return PosteriorCurve(edges, bayes_posterior(lik_f, lik_b, prior), lik_f, lik_b, prior)


def read_boxes(path) -> list[tuple[int, int, int, int]]:
    """One ``x0 y0 x1 y1`` box per line; blank lines and # comments skipped."""
    boxes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                x0, y0, x1, y1 = (int(v) for v in line.replace(",", " ").split())
            except ValueError:
                raise BadInputError(f"{path}:{lineno}: expected four integers") from None
            if x1 <= x0 or y1 <= y0:
                raise BadInputError(f"{path}:{lineno}: empty box")
            boxes.append((x0, y0, x1, y1))
    return boxes


def write_boxes(path, boxes):
    with open(path, "w") as fh:
        for box in boxes:
            fh.write(" ".join(str(int(v)) for v in box) + "\n")


def box_mask(box, shape) -> np.ndarray:
    """Pixels with x0 <= x < x1 and y0 <= y < y1."""
    x0, y0, x1, y1 = box
    mask = np.zeros(shape, dtype=bool)
    mask[max(y0, 0):max(y1, 0), max(x0, 0):max(x1, 0)] = True
    return mask


# output ---------------------------------------------------------------------


def write_histograms_csv(path, hists: dict):
    """Columns bin_lo, bin_hi, then one mass column per named histogram."""
    names = list(hists)
    first = hists[names[0]]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", *names])
        for b in range(len(first.masses)):
            w.writerow([repr(float(first.edges[b])), repr(float(first.edges[b + 1])),
                        *(repr(float(hists[k].masses[b])) for k in names)])


def write_curve_csv(path, edges, columns: dict):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", *columns])
        for b in range(len(edges) - 1):
            row = [repr(float(edges[b])), repr(float(edges[b + 1]))]
            row += ["nan" if np.isnan(v[b]) else repr(float(v[b])) for v in columns.values()]
            w.writerow(row)


def read_grid_csv(path) -> np.ndarray:
    try:
        return np.loadtxt(path, delimiter=",", ndmin=2)
    except (OSError, ValueError) as exc:
        raise BadInputError(f"cannot read {path}: {exc}") from None


def write_grid_csv(path, values):
    np.savetxt(path, np.asarray(values, dtype=np.float64), delimiter=",", fmt="%.17g")


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def line_plot_svg(x, series: dict, title: str = "", width: int = 480, height: int = 320) -> str:
    """Minimal SVG line plot; NaN points break the line."""
    x = np.asarray(x, dtype=np.float64)
    ys = {k: np.asarray(v, dtype=np.float64) for k, v in series.items()}
    finite = np.concatenate([v[np.isfinite(v)] for v in ys.values()] + [np.zeros(1)])
    lo, hi = finite.min(), finite.max()
    if hi == lo:
        hi = lo + 1.0
    pad = 40
    sx = lambda v: pad + (v - x.min()) / max(x.max() - x.min(), 1e-12) * (width - 2 * pad)  # noqa: E731
    sy = lambda v: height - pad - (v - lo) / (hi - lo) * (height - 2 * pad)  # noqa: E731
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{pad}" y1="{sy(0):.2f}" x2="{width - pad}" y2="{sy(0):.2f}" stroke="#999"/>',
        f'<text x="4" y="{sy(hi):.2f}" font-size="10">{hi:.3g}</text>',
        f'<text x="4" y="{sy(lo):.2f}" font-size="10">{lo:.3g}</text>',
    ]
    for k, (name, y) in enumerate(ys.items()):
        color = _COLORS[k % len(_COLORS)]
        runs, cur = [], []
        for xv, yv in zip(x, y):
            if np.isfinite(yv):
                cur.append(f"{sx(xv):.2f},{sy(yv):.2f}")
            elif cur:
                runs.append(cur)
                cur = []
        if cur:
            runs.append(cur)
        for run in runs:
            parts.append(f'<polyline fill="none" stroke="{color}" points="{" ".join(run)}"/>')
        parts.append(f'<text x="{width - pad}" y="{34 + 12 * k}" font-size="10" fill="{color}" '
                     f'text-anchor="end">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
