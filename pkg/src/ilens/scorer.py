"""The differentiable scorer: masked grid images in, feature vectors out.

A deliberately small numpy CNN (conv / relu / 2x2 average pool blocks and a
dense head) stands in for a pretrained classifier. Weights are stored as
float32 and promoted to float64 for every computation so that finite
difference checks stay meaningful.
"""

from __future__ import annotations

import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import BadInputError, NumericError
from .game_core import CoalitionGame

MAGIC = b"ILENS1"
TAGS = {"conv": b"CONV", "relu": b"RELU", "pool": b"POOL", "dense": b"DENS"}
KINDS = {v: k for k, v in TAGS.items()}


def default_grid(height: int, width: int) -> tuple[int, int]:
    if height % 28 == 0 and width % 28 == 0:
        return (28, 28)
    if height % 8 == 0 and width % 8 == 0:
        return (8, 8)
    raise BadInputError(f"no default grid divides a {height}x{width} image; pass grid=")


@dataclass
class GridImage:
    """An RGB image in [0, 1] partitioned into a rows x cols grid of cells.

    Grid cells are the players of the coalition game built from the image.
    ``baseline`` defaults to the mean colour of ``pixels``.
    """

    pixels: np.ndarray
    grid: tuple[int, int] | None = None
    baseline: np.ndarray | None = None
    edge_cells: np.ndarray | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise BadInputError(f"expected an HxWx3 image, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise BadInputError("pixel values must lie in [0, 1]")
        self.pixels = px
        H, W, _ = px.shape
        if self.grid is None:
            self.grid = default_grid(H, W)
        rows, cols = self.grid = (int(self.grid[0]), int(self.grid[1]))
        if rows < 1 or cols < 1 or H % rows or W % cols:
            raise BadInputError(f"grid {rows}x{cols} does not divide a {H}x{W} image")
        if self.baseline is None:
            self.baseline = px.reshape(-1, 3).mean(axis=0)
        self.baseline = np.asarray(self.baseline, dtype=np.float64).reshape(3)
        if self.edge_cells is not None:
            self.edge_cells = np.asarray(self.edge_cells, dtype=bool)
            if self.edge_cells.shape != (rows, cols):
                raise BadInputError("edge_cells must have the grid's shape")

    @property
    def shape(self):
        return self.pixels.shape

    @property
    def n_cells(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def cell_size(self) -> tuple[int, int]:
        H, W, _ = self.pixels.shape
        return H // self.grid[0], W // self.grid[1]

    def with_pixels(self, pixels) -> GridImage:
        """Same grid, baseline and edges around new pixel values."""
        return GridImage(pixels, self.grid, self.baseline.copy(), self.edge_cells)

    def pixel_mask(self, memberships) -> np.ndarray:
        """(B, n) cell memberships to (B, H, W) pixel visibility."""
        memberships = np.asarray(memberships, dtype=bool)
        if memberships.ndim == 1:
            memberships = memberships[None]
        if memberships.shape[1] != self.n_cells:
            raise BadInputError(f"membership has {memberships.shape[1]} cells, grid has {self.n_cells}")
        ch, cw = self.cell_size
        cells = memberships.reshape(-1, *self.grid)
        return np.repeat(np.repeat(cells, ch, axis=1), cw, axis=2)


def masked_batch(pixels, image: GridImage, memberships) -> np.ndarray:
    """Masked copies of ``pixels`` (H, W, 3) using ``image``'s grid and baseline."""
    vis = image.pixel_mask(memberships)[..., None]
    return np.where(vis, pixels[None], image.baseline)


def masked_input(image: GridImage, S) -> np.ndarray:
    """Copy of the image with every cell outside ``S`` set to the baseline."""
    from .game_core import as_mask, mask_to_bool

    member = mask_to_bool(as_mask(S, image.n_cells), image.n_cells)
    return masked_batch(image.pixels, image, member[None])[0]


# model ----------------------------------------------------------------------


@dataclass
class Layer:
    kind: str
    params: tuple = ()


@dataclass
class ScorerModel:
    """Layer stack with float32 weights.

    ``feature_tap`` is the index of the layer whose (flattened) input is the
    feature vector f; by default it is the dense head.
    """

    input_shape: tuple[int, int, int]
    layers: list[Layer]
    feature_tap: int = -1

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if self.feature_tap < 0:
            self.feature_tap += len(self.layers)
        if not 0 <= self.feature_tap <= len(self.layers):
            raise BadInputError(f"feature_tap {self.feature_tap} out of range")
        self.layers = [
            Layer(l.kind, tuple(np.asarray(p, dtype=np.float32) for p in l.params))
            for l in self.layers
        ]
        for layer in self.layers:
            for p in layer.params:
                p.setflags(write=False)

    @property
    def feature_dim(self) -> int:
        return int(np.prod(self._shape_before(self.feature_tap)))

    def _shape_before(self, index):
        H, W, C = self.input_shape
        shape = (C, H, W)
        for layer in self.layers[:index]:
            if layer.kind == "conv":
                shape = (layer.params[0].shape[0], shape[1], shape[2])
            elif layer.kind == "pool":
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif layer.kind == "dense":
                shape = (layer.params[0].shape[0],)
        return shape

    def params64(self):
        return [[ad.Tensor(p.astype(np.float64)) for p in l.params] for l in self.layers]


def _run_layers(layers, params, x, start, stop):
    for layer, ps in zip(layers[start:stop], params[start:stop]):
        if layer.kind == "conv":
            x = ad.conv2d(x, ps[0], ps[1])
        elif layer.kind == "relu":
            x = x.relu()
        elif layer.kind == "pool":
            x = ad.avgpool2(x)
        elif layer.kind == "dense":
            if x.ndim > 2:
                x = x.reshape(x.shape[0], -1)
            x = x @ ps[0].transpose(1, 0) + ps[1]
        else:
            raise BadInputError(f"unknown layer kind {layer.kind!r}")
    return x


def _as_batch(model: ScorerModel, images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != model.input_shape:
        raise BadInputError(
            f"input shape {x.shape[1:] if x.ndim == 4 else x.shape} does not match "
            f"model input {model.input_shape}"
        )
    return x


def _features_graph(model, x, params):
    t = ad.as_tensor(x).transpose(0, 3, 1, 2)
    t = _run_layers(model.layers, params, t, 0, model.feature_tap)
    return t.reshape(t.shape[0], -1)


def forward_features(model: ScorerModel, images, batch_size: int = 128) -> np.ndarray:
    """Feature vectors at the model's tap, shape (B, d) (or (d,) for one image)."""
    single = np.ndim(images) == 3
    x = _as_batch(model, images)
    params = model.params64()
    out = [
        _features_graph(model, x[k:k + batch_size], params).data
        for k in range(0, len(x), batch_size)
    ]
    feats = np.concatenate(out) if out else np.zeros((0, model.feature_dim))
    return feats[0] if single else feats


def input_gradient(model: ScorerModel, images, cotangent, batch_size: int = 128) -> np.ndarray:
    """d<features, cotangent>/d input, per image; same shape as ``images``."""
    single = np.ndim(images) == 3
    x = _as_batch(model, images)
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.ndim == 1:
        cot = cot[None]
    if cot.shape != (len(x), model.feature_dim):
        raise BadInputError(f"cotangent shape {cot.shape} != {(len(x), model.feature_dim)}")
    params = model.params64()
    grads = []
    for k in range(0, len(x), batch_size):
        xt = ad.Tensor(x[k:k + batch_size], requires_grad=True)
        feats = _features_graph(model, xt, params)
        feats.backward(cot[k:k + batch_size])
        grads.append(xt.grad if xt.grad is not None else np.zeros_like(xt.data))
    g = np.concatenate(grads)
    return g[0] if single else g


def features_and_input_gradient(model, images, cotangent_fn, batch_size=128):
    """Forward once, pick cotangents from the features, then backpropagate.

    ``cotangent_fn(start, feats)`` returns the cotangent rows for the chunk
    beginning at ``start``. Returns (features, gradients).
    """
    x = _as_batch(model, images)
    params = model.params64()
    feats_out, grads = [], []
    for k in range(0, len(x), batch_size):
        xt = ad.Tensor(x[k:k + batch_size], requires_grad=True)
        feats = _features_graph(model, xt, params)
        feats.backward(np.asarray(cotangent_fn(k, feats.data), dtype=np.float64))
        feats_out.append(feats.data)
        grads.append(xt.grad if xt.grad is not None else np.zeros_like(xt.data))
    return np.concatenate(feats_out), np.concatenate(grads)


def logits(model: ScorerModel, images) -> np.ndarray:
    x = _as_batch(model, images)
    t = ad.Tensor(x).transpose(0, 3, 1, 2)
    return _run_layers(model.layers, model.params64(), t, 0, len(model.layers)).data


# construction, training, serialisation -------------------------------------


def default_architecture(size: int = 64, channels=(4, 8, 8), classes: int = 2):
    """Layer recipe: three conv(3x3)/relu/avgpool blocks then a dense head."""
    if size % 8:
        raise BadInputError("input size must be divisible by 8")
    recipe = []
    c_in = 3
    for c in channels:
        recipe += [("conv", c_in, c), ("relu",), ("pool",)]
        c_in = c
    feat = c_in * (size // 8) ** 2
    recipe.append(("dense", feat, classes))
    return recipe


def init_model(recipe, input_shape=(64, 64, 3), seed: int = 0, feature_tap: int = -1) -> ScorerModel:
    """He-initialised float32 weights drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    layers = []
    for spec in recipe:
        kind = spec[0]
        if kind == "conv":
            _, c_in, c_out = spec[:3]
            k = spec[3] if len(spec) > 3 else 3
            std = np.sqrt(2.0 / (c_in * k * k))
            w = rng.normal(0.0, std, size=(c_out, c_in, k, k))
            layers.append(Layer("conv", (w, np.zeros(c_out))))
        elif kind == "dense":
            _, d_in, d_out = spec
            w = rng.normal(0.0, np.sqrt(1.0 / d_in), size=(d_out, d_in))
            layers.append(Layer("dense", (w, np.zeros(d_out))))
        elif kind in ("relu", "pool"):
            layers.append(Layer(kind))
        else:
            raise BadInputError(f"unknown layer kind {kind!r}")
    return ScorerModel(tuple(input_shape), layers, feature_tap)


def _cross_entropy(logit_t, labels):
    z = logit_t - ad.Tensor(logit_t.data.max(axis=1, keepdims=True))
    logsumexp = z.exp().sum(axis=1).log()
    picked = z[np.arange(len(labels)), labels]
    return (logsumexp - picked).mean()


def train_toy(
    model: ScorerModel,
    images,
    labels,
    epochs: int = 20,
    seed: int = 0,
    batch_size: int = 16,
    learning_rate: float = 5e-3,
    log=None,
) -> tuple[ScorerModel, float]:
    """Fit ``model`` with Adam on softmax cross-entropy.

    Returns the trained model (a new object) and its training-set accuracy.
    Raises NumericError if the loss becomes NaN.
    """
    x = _as_batch(model, images)
    y = np.asarray(labels, dtype=np.int64)
    if len(x) == 0 or len(x) != len(y):
        raise BadInputError("dataset must be nonempty with one label per image")
    if len(np.unique(y)) < 2:
        raise BadInputError("need at least two classes")
    rng = np.random.default_rng(seed)
    params = [[ad.Tensor(p.astype(np.float64), requires_grad=True) for p in l.params]
              for l in model.layers]
    flat = [p for ps in params for p in ps]
    m1 = [np.zeros_like(p.data) for p in flat]
    m2 = [np.zeros_like(p.data) for p in flat]
    b1, b2, eps = 0.9, 0.999, 1e-8
    t = 0
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for k in range(0, len(x), batch_size):
            idx = order[k:k + batch_size]
            for p in flat:
                p.grad = None
            xt = ad.Tensor(x[idx]).transpose(0, 3, 1, 2)
            out = _run_layers(model.layers, params, xt, 0, len(model.layers))
            loss = _cross_entropy(out, y[idx])
            if not np.isfinite(loss.data):
                raise NumericError(f"training loss became non-finite in epoch {epoch}")
            loss.backward()
            total += float(loss.data) * len(idx)
            t += 1
            for j, p in enumerate(flat):
                g = p.grad
                m1[j] = b1 * m1[j] + (1 - b1) * g
                m2[j] = b2 * m2[j] + (1 - b2) * g * g
                mhat = m1[j] / (1 - b1**t)
                vhat = m2[j] / (1 - b2**t)
                p.data = p.data - learning_rate * mhat / (np.sqrt(vhat) + eps)
        if log is not None:
            log(f"epoch {epoch + 1}/{epochs} loss {total / len(x):.4f}")
    if epochs == 0:
        trained = model
    else:
        layers = [Layer(l.kind, tuple(p.data for p in ps)) for l, ps in zip(model.layers, params)]
        trained = ScorerModel(model.input_shape, layers, model.feature_tap)
    acc = accuracy(trained, x, y)
    return trained, acc


def accuracy(model: ScorerModel, images, labels, batch_size: int = 128) -> float:
    x = _as_batch(model, images)
    preds = np.concatenate(
        [logits(model, x[k:k + batch_size]).argmax(axis=1) for k in range(0, len(x), batch_size)]
    )
    return float(np.mean(preds == np.asarray(labels)))


def dumps_weights(model: ScorerModel) -> bytes:
    """Serialise to the ILENS1 format (little-endian throughout).

    Layout: magic, u32 H, W, C, u32 feature_tap, u32 layer count, then per
    layer a 4-byte tag, u32 parameter count, and per parameter u32 ndim,
    u32 dims, row-major float32 values.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<4I", *model.input_shape, model.feature_tap))
    buf.write(struct.pack("<I", len(model.layers)))
    for layer in model.layers:
        buf.write(TAGS[layer.kind])
        buf.write(struct.pack("<I", len(layer.params)))
        for p in layer.params:
            buf.write(struct.pack("<I", p.ndim))
            buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
            buf.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return buf.getvalue()


def loads_weights(data: bytes) -> ScorerModel:
    view = memoryview(data)
    pos = 0

    def take(nbytes):
        nonlocal pos
        if pos + nbytes > len(view):
            raise BadInputError("weights file is truncated")
        chunk = view[pos:pos + nbytes]
        pos += nbytes
        return chunk

    if bytes(take(len(MAGIC))) != MAGIC:
        raise BadInputError("not an ILENS1 weights file (bad magic)")
    H, W, C, tap = struct.unpack("<4I", take(16))
    (count,) = struct.unpack("<I", take(4))
    layers = []
    for _ in range(count):
        tag = bytes(take(4))
        if tag not in KINDS:
            raise BadInputError(f"unknown layer tag {tag!r}")
        (nparams,) = struct.unpack("<I", take(4))
        params = []
        for _ in range(nparams):
            (ndim,) = struct.unpack("<I", take(4))
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
            params.append(arr.astype(np.float32))
        layers.append(Layer(KINDS[tag], tuple(params)))
    if pos != len(view):
        raise BadInputError("trailing bytes after weights")
    return ScorerModel((H, W, C), layers, tap)


def save_weights(model: ScorerModel, path):
    with open(path, "wb") as fh:
        fh.write(dumps_weights(model))


def load_weights(path) -> ScorerModel:
    try:
        with open(path, "rb") as fh:
            return loads_weights(fh.read())
    except OSError as exc:
        raise BadInputError(f"cannot read weights {path}: {exc}") from None


# games -------------------------------------------------------------------------


def batch_features(model, batch, batch_size=64, jobs=1) -> np.ndarray:
    chunks = [batch[k:k + batch_size] for k in range(0, len(batch), batch_size)]
    if jobs > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(lambda c: forward_features(model, c, batch_size), chunks))
    else:
        parts = [forward_features(model, c, batch_size) for c in chunks]
    return np.concatenate(parts) if parts else np.zeros((0, model.feature_dim))


def game_from_image(
    model: ScorerModel, image: GridImage, batch_size: int = 64, jobs: int = 1,
    cache_size: int = 4096,
) -> CoalitionGame:
    """Game over grid cells with value(S) = features of the image masked to S."""
    pixels = image.pixels

    def batch(memberships):
        out = []
        for k in range(0, len(memberships), batch_size):
            imgs = masked_batch(pixels, image, memberships[k:k + batch_size])
            out.append(batch_features(model, imgs, batch_size, jobs))
        return np.concatenate(out)

    return CoalitionGame(image.n_cells, batch_value=batch, cache_size=cache_size)
