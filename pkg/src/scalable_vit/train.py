"""Synthetic two-class data and a minimal Adam training loop."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import Model, forward
from .rng import Rng
from .tensor import backward, cross_entropy, no_grad, scale, add


def blob_dataset(n: int = 32, size: int = 32, seed: int = 0, noise: float = 0.05):
    """Images with one bright Gaussian blob: top-left half (label 0) or bottom-right (label 1).

    The mean intensity difference between the two triangles of the image
    separates the classes linearly.
    """
    rng = Rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    images, labels = [], []
    for i in range(n):
        label = i % 2
        lo, hi = (0.15, 0.4) if label == 0 else (0.6, 0.85)
        cy, cx = rng.uniform((), lo, hi), rng.uniform((), lo, hi)
        sigma = rng.uniform((), 0.08, 0.14)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        tint = rng.uniform(3, 0.6, 1.0)
        img = blob[..., None] * tint + rng.normal((size, size, 3), noise)
        images.append(np.clip(img, 0.0, 1.0))
        labels.append(label)
    return np.stack(images), np.array(labels)


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1, c2 = 1 - self.b1 ** self.t, 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad ** 2
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def predict(model: Model, images: np.ndarray) -> np.ndarray:
    with no_grad():
        return np.array([int(np.argmax(forward(model, img).data)) for img in images])


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(model, images) == labels))


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    accuracies: list[tuple[int, float]] = field(default_factory=list)
    steps_to_perfect: int | None = None


def train(model: Model, images: np.ndarray, labels: np.ndarray, steps: int = 200, batch: int = 8,
          lr: float = 3e-3, seed: int = 0, eval_every: int = 10, stop_at_perfect: bool = True) -> TrainLog:
    """Full-graph minibatch training; deterministic given ``seed``."""
    model.train(True)
    opt = Adam(model.params.values(), lr)
    rng = Rng(seed)
    log = TrainLog()
    order = np.array([], dtype=int)
    for step in range(1, steps + 1):
        if len(order) < batch:
            order = np.concatenate([order, rng.permutation(len(images))])
        idx, order = order[:batch], order[batch:]
        loss = None
        for i in idx:
            term = cross_entropy(forward(model, images[i]), labels[i])
            loss = term if loss is None else add(loss, term)
        loss = scale(loss, 1.0 / len(idx))
        opt.zero_grad()
        backward(loss)
        opt.step()
        log.losses.append(loss.item())
        if step % eval_every == 0 or step == steps:
            acc = accuracy(model, images, labels)
            log.accuracies.append((step, acc))
            if acc == 1.0 and log.steps_to_perfect is None:
                log.steps_to_perfect = step
                if stop_at_perfect:
                    break
    model.train(False)
    return log
