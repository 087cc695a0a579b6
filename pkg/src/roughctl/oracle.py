"""Shape classifier used as the automated judge for filtering and class confidence."""

from __future__ import annotations

import colorsys
import logging
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .shapes import BACKGROUND_COLOR, CLASS_NAMES, random_spec, render

log = logging.getLogger(__name__)

ORACLE_MIN_ACCURACY = 0.99


class OracleNotReady(RuntimeError):
    pass


class ShapeClassifier(nn.Module):
    def __init__(self, num_classes: int = len(CLASS_NAMES)):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 32, 3, padding=1), nn.ReLU(),
            nn.Conv2d(32, 32, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), nn.ReLU(),
            nn.Conv2d(64, 64, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(64, 128, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        )
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(128 * 16, 128), nn.ReLU(), nn.Linear(128, num_classes))

    def forward(self, x):
        return self.head(self.features(x))


class Oracle:
    """Frozen classifier over images in [0, 1], shape [N, 3, H, W]."""

    def __init__(self, net: ShapeClassifier, accuracy: float):
        self.net = net.eval()
        self.accuracy = accuracy
        if accuracy < ORACLE_MIN_ACCURACY:
            raise OracleNotReady(f"held-out accuracy {accuracy:.4f} < {ORACLE_MIN_ACCURACY}")

    @torch.no_grad()
    def probabilities(self, images) -> np.ndarray:
        x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
        if x.ndim == 3:
            x = x[None]
        if len(x) == 0:
            return np.zeros((0, self.net.head[-1].out_features))
        out = [F.softmax(self.net(x[i:i + 256] * 2 - 1), dim=1) for i in range(0, len(x), 256)]
        return torch.cat(out).double().numpy()

    def confidence(self, images, cls) -> np.ndarray:
        """Probability of ``cls`` (int or per-image array) for every image."""
        p = self.probabilities(images)
        cls = np.broadcast_to(np.asarray(cls), (len(p),))
        return p[np.arange(len(p)), cls]

    def save(self, path: Path) -> None:
        torch.save({"format_version": 1, "kind": "oracle", "accuracy": self.accuracy,
                    "tensors": self.net.state_dict()}, path)

    @classmethod
    def load(cls, path: Path) -> "Oracle":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        net = ShapeClassifier()
        net.load_state_dict(blob["tensors"])
        return cls(net, blob["accuracy"])


def _random_fill(rng: np.random.Generator):
    h = rng.uniform()
    s = rng.uniform(0.55, 1.0)
    v = rng.uniform(0.75, 1.0)
    return colorsys.hsv_to_rgb(h, s, v)


def augmented_renders(n: int, rng: np.random.Generator, size: int = 32):
    """Renders with colour, pose and scale jitter beyond the generator's training range."""
    images = np.empty((n, 3, size, size))
    labels = np.arange(n) % len(CLASS_NAMES)
    for i, cls in enumerate(labels):
        spec = random_spec(int(cls), rng, size=size, max_rotation=math.radians(20), min_area=0.12,
                           scale_range=(0.5, 1.0), fill=_random_fill(rng))
        bg = np.clip(np.asarray(BACKGROUND_COLOR) + rng.normal(0, 0.02, 3), 0, 1)
        spec = type(spec)(**{**spec.to_dict(), "background": tuple(bg)})
        images[i] = render(spec)[0]
    return images, labels


def _outliers(n: int, rng: np.random.Generator, size: int) -> np.ndarray:
    """Noise fields and blank canvases; the oracle should be unsure about these."""
    out = np.empty((n, 3, size, size))
    bg = np.asarray(BACKGROUND_COLOR)[:, None, None]
    for i in range(n):
        kind = i % 3
        if kind == 0:
            out[i] = rng.uniform(0, 1, (3, size, size))
        elif kind == 1:
            out[i] = np.clip(bg + rng.normal(0, 0.05, (3, size, size)), 0, 1)
        else:
            blob = rng.normal(0, 1, (1, size // 4, size // 4))
            blob = np.kron(blob, np.ones((4, 4))) > 0.5
            out[i] = np.where(blob, np.asarray(_random_fill(rng))[:, None, None], bg)
    return out


def _jitter(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    noise = torch.randn(x.shape, generator=gen) * torch.rand(len(x), 1, 1, 1, generator=gen) * 0.08
    flip = torch.rand(len(x), generator=gen) < 0.5
    x = torch.where(flip[:, None, None, None], x.flip(-1), x)
    return (x + noise).clamp(0, 1)


def train_oracle_classifier(n_train: int = 9000, n_holdout: int = 900, steps: int = 3000,
                            seed: int = 0, size: int = 32) -> Oracle:
    """Train on augmented renders plus outlier images with uniform targets.

    Raises OracleNotReady when held-out clean-render accuracy is below 99%.
    """
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    images, labels = augmented_renders(n_train, rng, size)
    outliers = _outliers(n_train // 6, rng, size)
    x = torch.as_tensor(images, dtype=torch.float32)
    y = torch.as_tensor(labels, dtype=torch.long)
    xo = torch.as_tensor(outliers, dtype=torch.float32)
    net = ShapeClassifier()
    opt = torch.optim.AdamW(net.parameters(), lr=2e-3, weight_decay=1e-4)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=2e-3, total_steps=steps)
    for step in range(steps):
        idx = torch.randint(0, len(x), (64,), generator=gen)
        oidx = torch.randint(0, len(xo), (12,), generator=gen)
        logits = net(_jitter(x[idx], gen) * 2 - 1)
        loss = F.cross_entropy(logits, y[idx], label_smoothing=0.02)
        out_logits = net(xo[oidx] * 2 - 1)
        loss = loss - 0.5 * F.log_softmax(out_logits, dim=1).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if (step + 1) % 500 == 0:
            log.info("oracle step %d loss %.4f", step + 1, loss.item())
    net.eval()
    hold_rng = np.random.default_rng(seed + 10_000)
    hold = []
    for i in range(n_holdout):
        spec = random_spec(i % len(CLASS_NAMES), hold_rng, size=size)
        hold.append(render(spec)[0])
    with torch.no_grad():
        pred = net(torch.as_tensor(np.stack(hold), dtype=torch.float32) * 2 - 1).argmax(1).numpy()
    accuracy = float((pred == np.arange(n_holdout) % len(CLASS_NAMES)).mean())
    log.info("oracle held-out accuracy %.4f", accuracy)
    return Oracle(net, accuracy)
