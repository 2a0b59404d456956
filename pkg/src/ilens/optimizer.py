"""Gradient descent on the revision coefficients against the sparsity loss."""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import BadInputError, DivergenceError
from .game_core import mask_to_bool
from .revision import OPS, Reviser, RevisionField, RevisionResult
from .saliency import (
    INESSENTIAL,
    SALIENT,
    SaliencyConfig,
    loss_weights,
    rank_and_partition,
    sample_coalitions,
)
from .scorer import (
    GridImage,
    ScorerModel,
    features_and_input_gradient,
    forward_features,
    game_from_image,
)

GRADIENT_MODES = ("analytic", "finite-difference")


@dataclass
class OptimizeConfig:
    steps: int = 200
    learning_rate: float = 0.05
    gradient_mode: str = "analytic"
    fd_step: float = 1e-3
    seed: int = 0
    relabel_period: int | None = None
    minibatch_fraction: float = 1.0
    batch_size: int = 64
    jobs: int = 1

    def __post_init__(self):
        if self.steps < 1:
            raise BadInputError("steps must be >= 1")
        # 0 is allowed: it is the documented no-op run
        if not self.learning_rate >= 0:
            raise BadInputError("learning_rate must be >= 0")
        if not self.fd_step > 0:
            raise BadInputError("fd_step must be positive")
        if self.gradient_mode not in GRADIENT_MODES:
            raise BadInputError(f"gradient_mode must be one of {GRADIENT_MODES}")
        if self.relabel_period is not None and self.relabel_period < 1:
            raise BadInputError("relabel_period must be >= 1")
        if not 0 < self.minibatch_fraction <= 1:
            raise BadInputError("minibatch_fraction must lie in (0, 1]")
        if self.batch_size < 2 or self.batch_size % 2:
            raise BadInputError("batch_size must be an even number >= 2")
        if self.jobs < 1:
            raise BadInputError("jobs must be >= 1")


@dataclass
class LossTrace:
    """``losses[t]`` is the loss of the accepted coefficients entering step t."""

    losses: list = field(default_factory=list)
    max_abs_k: list = field(default_factory=list)
    learning_rates: list = field(default_factory=list)
    accepted: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    final_loss: float = float("nan")

    def __len__(self):
        return len(self.losses)


class CompositeLoss:
    """Sparsity loss of the revised image as a function of the coefficients.

    Coalition labels are fixed at construction; every evaluation recomputes
    the marginal utilities on the revised pixels.
    """

    def __init__(self, image: GridImage, model: ScorerModel, reviser: Reviser, samples,
                 alpha: float, batch_size: int = 64, jobs: int = 1):
        self.image = image
        self.model = model
        self.reviser = reviser
        self.alpha = alpha
        self.batch_size = batch_size
        self.jobs = jobs
        self.set_samples(samples)

    def set_samples(self, samples):
        samples = list(samples)
        w = loss_weights(samples, self.alpha)
        keep = np.flatnonzero(w)
        self.samples = samples
        self.active = [samples[k] for k in keep]
        self.weights = w[keep]
        n = self.image.n_cells
        members = []
        for s in self.active:
            members.append(mask_to_bool(s.L | 1 << s.i, n))
            members.append(mask_to_bool(s.L, n))
        self.members = np.array(members, dtype=bool).reshape(-1, n)

    def revised_pixels(self, coeffs) -> np.ndarray:
        out, _ = self.reviser.graph(np.asarray(coeffs, dtype=np.float64))
        return out.data

    def _chunk(self, pixels, start, stop, need_grad):
        vis = self.image.pixel_mask(self.members[start:stop])[..., None]
        batch = np.where(vis, pixels[None], self.image.baseline)
        w = self.weights[start // 2:stop // 2]
        result = {}

        def cot(_, feats):
            d = feats[0::2] - feats[1::2]
            result["loss"] = float(w @ np.abs(d).sum(axis=1))
            # sign(0) = 0 is the L1 subgradient choice
            g = np.sign(d) * w[:, None]
            out = np.empty_like(feats)
            out[0::2], out[1::2] = g, -g
            return out

        if need_grad:
            _, g = features_and_input_gradient(self.model, batch, cot, batch_size=len(batch))
            return result["loss"], (g * vis).sum(axis=0)
        feats = forward_features(self.model, batch, batch_size=len(batch))
        cot(0, feats)
        return result["loss"], None

    def pixel_loss(self, pixels, need_grad=True):
        """Loss at ``pixels`` and its gradient with respect to them."""
        bounds = [(k, min(k + self.batch_size, len(self.members)))
                  for k in range(0, len(self.members), self.batch_size)]
        work = lambda b: self._chunk(pixels, b[0], b[1], need_grad)  # noqa: E731
        if self.jobs > 1 and len(bounds) > 1:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                parts = list(pool.map(work, bounds))
        else:
            parts = [work(b) for b in bounds]
        # fixed summation order keeps threaded runs bit-identical
        loss = 0.0
        grad = np.zeros_like(pixels) if need_grad else None
        for part_loss, part_grad in parts:
            loss += part_loss
            if need_grad:
                grad += part_grad
        return loss, grad

    def value(self, coeffs) -> float:
        return self.pixel_loss(self.revised_pixels(coeffs), need_grad=False)[0]

    def value_and_grad(self, coeffs):
        coeffs = np.asarray(coeffs, dtype=np.float64)
        loss, gpix = self.pixel_loss(self.revised_pixels(coeffs))
        return loss, self.reviser.vjp(coeffs, gpix)

    def fd_grad(self, coeffs, h=1e-3, coords=None):
        """Central differences over ``coords`` (flat indices; default all)."""
        coeffs = np.asarray(coeffs, dtype=np.float64)
        grad = np.zeros_like(coeffs)
        coords = range(coeffs.size) if coords is None else coords
        for c in coords:
            up, down = coeffs.copy(), coeffs.copy()
            up.flat[c] += h
            down.flat[c] -= h
            grad.flat[c] = (self.value(up) - self.value(down)) / (2 * h)
        return grad


def label_coalitions(image: GridImage, model: ScorerModel, sal_config: SaliencyConfig,
                     seed: int = 0, batch_size: int = 64, jobs: int = 1):
    """Sample coalitions on ``image`` and label them by marginal-utility norm."""
    game = game_from_image(model, image, batch_size=batch_size, jobs=jobs)
    samples = sample_coalitions(image.n_cells, sal_config, rng_seed=seed)
    return rank_and_partition(game, samples, sal_config)


def loss_gradient(image: GridImage, model: ScorerModel, field: RevisionField, samples,
                  mode: str = "analytic", alpha: float = 10.0, h: float = 1e-3,
                  coords=None, reviser: Reviser | None = None, batch_size: int = 64):
    """Gradient of the loss over all coefficients, shape (4, C)."""
    if mode not in GRADIENT_MODES:
        raise BadInputError(f"mode must be one of {GRADIENT_MODES}")
    reviser = reviser or Reviser(image, field)
    obj = CompositeLoss(image, model, reviser, samples, alpha, batch_size)
    if mode == "analytic":
        return obj.value_and_grad(field.coeffs)[1]
    return obj.fd_grad(field.coeffs, h, coords)


def _minibatch(samples, fraction, rng):
    """Stratified subset keeping the same share of each (r, label) group."""
    if fraction >= 1.0:
        return samples
    groups = {}
    for k, s in enumerate(samples):
        if s.label in (INESSENTIAL, SALIENT):
            groups.setdefault((s.r, s.label), []).append(k)
    keep = []
    for key in sorted(groups):
        idx = groups[key]
        take = max(1, int(np.ceil(fraction * len(idx))))
        keep.extend(rng.choice(idx, size=take, replace=False).tolist())
    return [samples[k] for k in sorted(keep)]


def optimize(image: GridImage, model: ScorerModel, sal_config: SaliencyConfig,
             opt_config: OptimizeConfig, field: RevisionField | None = None,
             samples=None, reviser: Reviser | None = None, log=None):
    """Learn the revision field; returns (field, trace, result, samples).

    Coalitions are sampled and labelled on the unrevised image unless
    ``samples`` are given. A step that raises the loss is rejected and the
    learning rate halved, so the recorded trace never increases.
    """
    field = field or RevisionField.zeros(image)
    reviser = reviser or Reviser(image, field)
    if samples is None:
        samples = label_coalitions(image, model, sal_config, opt_config.seed,
                                   opt_config.batch_size, opt_config.jobs)
    samples = list(samples)
    rng = np.random.default_rng(opt_config.seed + 1)
    obj = CompositeLoss(image, model, reviser, samples, sal_config.alpha,
                        opt_config.batch_size, opt_config.jobs)
    use_fd = opt_config.gradient_mode == "finite-difference"

    def evaluate(theta):
        if use_fd:
            return obj.value(theta), obj.fd_grad(theta, opt_config.fd_step)
        return obj.value_and_grad(theta)

    def check(loss, step):
        if not np.isfinite(loss):
            raise DivergenceError(f"loss became non-finite at step {step}")

    def draw():
        if opt_config.minibatch_fraction < 1.0:
            obj.set_samples(_minibatch(samples, opt_config.minibatch_fraction, rng))

    theta = np.array(field.coeffs, dtype=np.float64)
    lr = opt_config.learning_rate
    draw()
    loss, grad = evaluate(theta)
    check(loss, 0)
    trace = LossTrace()
    for t in range(opt_config.steps):
        started = time.perf_counter()
        if opt_config.relabel_period and t and t % opt_config.relabel_period == 0:
            samples = _relabel(image, model, reviser, theta, samples, sal_config, opt_config)
            obj.set_samples(samples)
            loss, grad = evaluate(theta)
        trace.losses.append(loss)
        trace.max_abs_k.append(float(np.abs(theta).max()))
        trace.learning_rates.append(lr)
        candidate = theta - lr * grad
        if opt_config.minibatch_fraction < 1.0:
            # compare both points on the same minibatch, then move on to a fresh one
            cand_loss = obj.value(candidate)
            check(cand_loss, t + 1)
            ok = cand_loss <= loss
            if ok:
                theta = candidate
            else:
                lr *= 0.5
            draw()
            loss, grad = evaluate(theta)
        else:
            cand_loss, cand_grad = evaluate(candidate)
            check(cand_loss, t + 1)
            ok = cand_loss <= loss
            if ok:
                theta, loss, grad = candidate, cand_loss, cand_grad
            else:
                lr *= 0.5
        trace.accepted.append(bool(ok))
        trace.seconds.append(time.perf_counter() - started)
        if log:
            log(f"step {t}: loss {trace.losses[-1]:.6g} lr {trace.learning_rates[-1]:.3g}"
                f"{'' if ok else ' (rejected)'}")
    trace.final_loss = loss
    final = field.with_coeffs(theta)
    return final, trace, reviser.revise(theta), samples


def _relabel(image, model, reviser, theta, samples, sal_config, opt_config):
    revised = reviser.revise(theta).revised
    game = game_from_image(model, revised, batch_size=opt_config.batch_size, jobs=opt_config.jobs)
    return rank_and_partition(game, samples, sal_config)


# export ---------------------------------------------------------------------


def write_trace_csv(path, trace: LossTrace):
    """Per-step loss, max |k|, learning rate and acceptance; timing is omitted."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "max_abs_k", "learning_rate", "accepted"])
        for t in range(len(trace)):
            w.writerow([t, repr(trace.losses[t]), repr(trace.max_abs_k[t]),
                        repr(trace.learning_rates[t]), int(trace.accepted[t])])
        w.writerow(["final", repr(trace.final_loss), "", "", ""])


def write_theta_csv(path, field: RevisionField):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["center_x", "center_y", "op", "k"])
        for c, (cy, cx) in enumerate(field.centers):
            for o, op in enumerate(OPS):
                w.writerow([int(cx), int(cy), op, repr(float(field.coeffs[o, c]))])


def read_theta_csv(path, template: RevisionField) -> RevisionField:
    """Coefficients from a theta CSV laid over ``template``'s centres."""
    index = {(int(cx), int(cy)): c for c, (cy, cx) in enumerate(template.centers)}
    coeffs = np.zeros_like(template.coeffs)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (int(row["center_x"]), int(row["center_y"]))
            if key not in index or row["op"] not in OPS:
                raise BadInputError(f"theta row {row} does not match the field")
            coeffs[OPS.index(row["op"]), index[key]] = float(row["k"])
    return template.with_coeffs(coeffs)
