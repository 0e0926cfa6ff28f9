"""A small denoising diffusion model with hand-written gradients.

The denoiser is a two-hidden-layer MLP over the flattened image plus a fixed
sinusoidal embedding of the step index.  Any object with a ``normal(shape)``
method can serve as the noise source, for both training and generation, so
swapping ideal Gaussian noise for hardware noise touches nothing else.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator

from .sampler import IdealNoise

EMBED_DIM = 32
HIDDEN = 256
LETTERS = ("U", "C", "L", "A")

# Adam and batch constants for the desk-scale letter task.
LR = 1e-3
BATCH = 32
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class Schedule:
    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a non-empty 1-D array")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("every beta must lie in (0, 1)")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", 1.0 - beta)
        # plain running product, so alpha_bar[t] == alpha_bar[t-1] * alpha[t] bit for bit
        object.__setattr__(self, "alpha_bar", np.cumprod(1.0 - beta))

    @property
    def T(self) -> int:
        return int(self.beta.size)

    @classmethod
    def from_betas(cls, betas) -> "Schedule":
        return cls(np.asarray(betas, dtype=float))

    # 1-based accessors, matching the usual step numbering
    def b(self, t):
        return self.beta[np.asarray(t) - 1]

    def a(self, t):
        return self.alpha[np.asarray(t) - 1]

    def abar(self, t):
        return self.alpha_bar[np.asarray(t) - 1]


def make_schedule(T: int, beta_1: float = 1e-4, beta_T: float = 0.02, kind: str = "linear") -> Schedule:
    if kind != "linear":
        raise ValueError(f"unsupported schedule kind {kind!r}")
    if T < 2:
        raise ValueError("T must be >= 2 (use Schedule.from_betas for a single step)")
    if not 0 < beta_1 <= beta_T < 1:
        raise ValueError("need 0 < beta_1 <= beta_T < 1")
    return Schedule(np.linspace(beta_1, beta_T, T))


def letter_schedule(T: int = 100) -> Schedule:
    """Linear schedule with endpoints scaled by 1000/T so alpha_bar_T stays near zero."""
    s = 1000.0 / T
    return make_schedule(T, 1e-4 * s, min(0.02 * s, 0.999))


def forward_sample(schedule: Schedule, x0: np.ndarray, t, noise: np.ndarray) -> np.ndarray:
    """Closed-form jump to step ``t``; ``t`` is a scalar or one step per sample."""
    x0 = np.asarray(x0, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if x0.shape != noise.shape:
        raise ValueError(f"noise shape {noise.shape} does not match x0 shape {x0.shape}")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError(f"t must lie in 1..{schedule.T}")
    ab = schedule.abar(t)
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def time_embedding(t) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    half = EMBED_DIM // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _silu(z):
    s = expit(z)
    return z * s, s


_PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


class Denoiser:
    """Noise predictor ``eps_theta(x_t, t)`` on flattened images."""

    def __init__(self, dim: int, hidden: int = HIDDEN, seed: int = 0, out_scale: float = 1e-2):
        self.dim = int(dim)
        self.hidden = int(hidden)
        rng = np.random.default_rng(seed)
        d_in = self.dim + EMBED_DIM
        self.params = {
            "W1": rng.standard_normal((d_in, hidden)) * math.sqrt(2.0 / d_in),
            "b1": np.zeros(hidden),
            "W2": rng.standard_normal((hidden, hidden)) * math.sqrt(2.0 / hidden),
            "b2": np.zeros(hidden),
            "W3": rng.standard_normal((hidden, self.dim)) * (out_scale / math.sqrt(hidden)),
            "b3": np.zeros(self.dim),
        }

    def _forward(self, x, t):
        p = self.params
        h0 = np.concatenate([x, time_embedding(t)], axis=1)
        z1 = h0 @ p["W1"] + p["b1"]
        h1, s1 = _silu(z1)
        z2 = h1 @ p["W2"] + p["b2"]
        h2, s2 = _silu(z2)
        out = h2 @ p["W3"] + p["b3"]
        return out, (h0, z1, s1, h1, z2, s2, h2)

    def predict(self, x, t) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        t = np.broadcast_to(np.asarray(t), (x.shape[0],))
        return self._forward(x, t)[0]

    def loss_and_grad(self, x, t, target):
        """Mean squared error over every element, and its gradient for each parameter."""
        p = self.params
        out, (h0, z1, s1, h1, z2, s2, h2) = self._forward(x, t)
        diff = out - target
        loss = float(np.mean(diff * diff))
        g_out = 2.0 * diff / diff.size
        grads = {"W3": h2.T @ g_out, "b3": g_out.sum(0)}
        g_h2 = g_out @ p["W3"].T
        g_z2 = g_h2 * (s2 * (1.0 + z2 * (1.0 - s2)))
        grads["W2"] = h1.T @ g_z2
        grads["b2"] = g_z2.sum(0)
        g_h1 = g_z2 @ p["W2"].T
        g_z1 = g_h1 * (s1 * (1.0 + z1 * (1.0 - s1)))
        grads["W1"] = h0.T @ g_z1
        grads["b1"] = g_z1.sum(0)
        return loss, grads

    def copy(self) -> "Denoiser":
        other = object.__new__(Denoiser)
        other.dim, other.hidden = self.dim, self.hidden
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other


def loss(denoiser, schedule: Schedule, x0, t, noise) -> float:
    x0 = np.asarray(x0, dtype=float).reshape(len(x0), -1)
    noise = np.asarray(noise, dtype=float).reshape(x0.shape)
    xt = forward_sample(schedule, x0, t, noise)
    pred = denoiser.predict(xt, np.broadcast_to(np.asarray(t), (len(x0),)))
    return float(np.mean((pred - noise) ** 2))


class Adam:
    def __init__(self, params: dict, lr: float = LR, betas=ADAM_BETAS, eps: float = ADAM_EPS):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in _PARAM_NAMES:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class TrainResult:
    denoiser: Denoiser
    losses: list  # index 0 is the untrained model, then one entry per epoch
    noise_source: str

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def _batches(n: int, batch: int, rng):
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def train(dataset, schedule: Schedule, noise_source=None, epochs: int = 50, lr: float = LR,
          batch_size: int = BATCH, seed: int = 0, hidden: int = HIDDEN, denoiser: Denoiser | None = None,
          callback=None, ema: float | None = None) -> TrainResult:
    """Fit a noise predictor.

    Minibatch order and step indices come from ``seed`` alone, so changing
    the noise source changes nothing but the noise values.  ``callback``
    (if given) is called as ``callback(epoch, denoiser)`` after each epoch.
    With ``ema`` set, an exponential moving average of the weights is kept
    and returned as the result's ``denoiser``; losses track the live weights.
    """
    X = np.asarray(dataset, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("dataset is empty")
    X = X.reshape(X.shape[0], -1)
    noise_source = IdealNoise(seed) if noise_source is None else noise_source
    ss = np.random.SeedSequence(seed)
    init_ss, order_ss = ss.spawn(2)
    if denoiser is None:
        denoiser = Denoiser(X.shape[1], hidden, seed=int(init_ss.generate_state(1)[0]))
    rng = np.random.default_rng(order_ss)
    opt = Adam(denoiser.params, lr)
    avg = denoiser.copy() if ema else None

    def one_pass(update: bool) -> float:
        total, count = 0.0, 0
        for idx in _batches(len(X), batch_size, rng):
            x0 = X[idx]
            t = rng.integers(1, schedule.T + 1, len(idx))
            noise = np.asarray(noise_source.normal(x0.shape), dtype=float)
            xt = forward_sample(schedule, x0, t, noise)
            value, grads = denoiser.loss_and_grad(xt, t, noise)
            if update:
                opt.step(denoiser.params, grads)
                if avg is not None:
                    for k, v in denoiser.params.items():
                        avg.params[k] *= ema
                        avg.params[k] += (1.0 - ema) * v
            total += value * len(idx)
            count += len(idx)
        return total / count

    losses = [one_pass(update=False)]
    for epoch in range(1, epochs + 1):
        losses.append(one_pass(update=True))
        if callback is not None:
            callback(epoch, denoiser if avg is None else avg)
    return TrainResult(denoiser if avg is None else avg, losses, getattr(noise_source, "name", type(noise_source).__name__))


def generate(denoiser, schedule: Schedule, noise_source, n_images: int, shape) -> np.ndarray:
    """Ancestral sampling from pure noise; the last step adds no noise."""
    shape = tuple(shape)
    dim = math.prod(shape)
    x = np.asarray(noise_source.normal((n_images, dim)), dtype=float)
    for t in range(schedule.T, 0, -1):
        eps = denoiser.predict(x, np.full(n_images, t))
        bt, at, abt = schedule.b(t), schedule.a(t), schedule.abar(t)
        x = (x - bt / math.sqrt(1.0 - abt) * eps) / math.sqrt(at)
        if t > 1:
            x = x + math.sqrt(bt) * np.asarray(noise_source.normal((n_images, dim)), dtype=float)
    return np.clip(x, -1.0, 1.0).reshape((n_images,) + shape)


# ----------------------------------------------------------------------------
# letter glyphs

# strokes as (row0, row1, col0, col1) fractions of the inner box
_STROKES = {
    "U": [(0.0, 1.0, 0.0, 0.25), (0.0, 1.0, 0.75, 1.0), (0.75, 1.0, 0.0, 1.0)],
    "C": [(0.0, 0.25, 0.0, 1.0), (0.0, 1.0, 0.0, 0.25), (0.75, 1.0, 0.0, 1.0)],
    "L": [(0.0, 1.0, 0.0, 0.25), (0.75, 1.0, 0.0, 1.0)],
    "A": [(0.0, 1.0, 0.0, 0.25), (0.0, 1.0, 0.75, 1.0), (0.0, 0.25, 0.0, 1.0), (0.45, 0.65, 0.0, 1.0)],
}


def glyph(letter: str, size: int = 16) -> np.ndarray:
    """Canonical ``size x size`` glyph with values -1 (background) and +1 (ink)."""
    if letter not in _STROKES:
        raise ValueError(f"unsupported letter {letter!r}; choose from {LETTERS}")
    if size < 8:
        raise ValueError("size must be >= 8")
    img = -np.ones((size, size))
    margin = max(1, round(size * 0.15))
    inner = size - 2 * margin
    for r0, r1, c0, c1 in _STROKES[letter]:
        a = margin + int(round(r0 * inner))
        b = margin + max(int(round(r1 * inner)), int(round(r0 * inner)) + 1)
        c = margin + int(round(c0 * inner))
        d = margin + max(int(round(c1 * inner)), int(round(c0 * inner)) + 1)
        img[a:b, c:d] = 1.0
    return img


def _shift(img: np.ndarray, dy: int, dx: int, fill: float = -1.0) -> np.ndarray:
    out = np.full_like(img, fill)
    h, w = img.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def _box_blur(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, 1, mode="edge")
    h, w = img.shape
    return sum(p[i:i + h, j:j + w] for i in range(3) for j in range(3)) / 9.0


def make_letter_dataset(letter: str, size: int = 16, n: int = 256, jitter: int = 1, flip: float = 0.0,
                        smooth: float = 0.0, rng=None) -> np.ndarray:
    """``n`` jittered copies of one glyph, shape ``(n, size, size)``.

    Each copy is translated by up to ``jitter`` pixels per axis, each pixel
    is inverted with probability ``flip``, and the result is optionally
    blended with its 3x3 box blur (weight ``smooth``).
    """
    rng = np.random.default_rng(rng)
    base = glyph(letter, size)
    if jitter < 0 or not 0 <= flip <= 1 or not 0 <= smooth <= 1:
        raise ValueError("need jitter >= 0, flip and smooth in [0, 1]")
    out = np.empty((n, size, size))
    shifts = rng.integers(-jitter, jitter + 1, size=(n, 2))
    flips = rng.random((n, size, size)) < flip
    for i in range(n):
        img = _shift(base, int(shifts[i, 0]), int(shifts[i, 1]))
        img = np.where(flips[i], -img, img)
        if smooth > 0:
            img = (1 - smooth) * img + smooth * _box_blur(img)
        out[i] = img
    return out


def nearest_template(images, letters=LETTERS, jitter: int = 1) -> list:
    """Label each image with the letter whose (shifted) canonical glyph is closest in L2."""
    images = np.asarray(images, dtype=float)
    size = images.shape[-1]
    templates, labels = [], []
    for letter in letters:
        g = glyph(letter, size)
        for dy in range(-jitter, jitter + 1):
            for dx in range(-jitter, jitter + 1):
                templates.append(_shift(g, dy, dx).ravel())
                labels.append(letter)
    tm = np.array(templates)
    flat = images.reshape(len(images), -1)
    d2 = (flat**2).sum(1)[:, None] - 2 * flat @ tm.T + (tm**2).sum(1)[None, :]
    return [labels[j] for j in np.argmin(d2, axis=1)]


# ----------------------------------------------------------------------------
# file formats

_CK_MAGIC = b"MERAMCK\x00"
_CK_VERSION = 1


def save_checkpoint(path, denoiser: Denoiser, schedule: Schedule | None = None):
    """``magic | version | dim | hidden | embed | T | betas | weights`` (little-endian)."""
    betas = schedule.beta if schedule is not None else np.zeros(0)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<8sIIIII", _CK_MAGIC, _CK_VERSION, denoiser.dim, denoiser.hidden,
                             EMBED_DIM, betas.size))
        fh.write(np.asarray(betas, dtype="<f8").tobytes())
        for k in _PARAM_NAMES:
            fh.write(np.ascontiguousarray(denoiser.params[k], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Denoiser, Schedule | None]:
    with open(path, "rb") as fh:
        blob = fh.read()
    head = struct.calcsize("<8sIIIII")
    if len(blob) < head:
        raise ValueError(f"{path}: truncated checkpoint")
    magic, version, dim, hidden, embed, n_beta = struct.unpack_from("<8sIIIII", blob)
    if magic != _CK_MAGIC or version != _CK_VERSION:
        raise ValueError(f"{path}: not a version-{_CK_VERSION} checkpoint")
    if embed != EMBED_DIM:
        raise ValueError(f"{path}: embedding width {embed} != {EMBED_DIM}")
    d = Denoiser.__new__(Denoiser)
    d.dim, d.hidden = dim, hidden
    shapes = {"W1": (dim + embed, hidden), "b1": (hidden,), "W2": (hidden, hidden), "b2": (hidden,),
              "W3": (hidden, dim), "b3": (dim,)}
    need = head + 8 * (n_beta + sum(math.prod(s) for s in shapes.values()))
    if len(blob) != need:
        raise ValueError(f"{path}: size {len(blob)} does not match header ({need})")
    off = head
    betas = np.frombuffer(blob, "<f8", n_beta, off).copy()
    off += 8 * n_beta
    d.params = {}
    for k in _PARAM_NAMES:
        cnt = math.prod(shapes[k])
        d.params[k] = np.frombuffer(blob, "<f8", cnt, off).reshape(shapes[k]).copy()
        off += 8 * cnt
    return d, (Schedule(betas) if n_beta else None)


def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.rint((np.clip(img, -1, 1) + 1.0) * 127.5).astype(np.uint8)


def write_pgm(path, img: np.ndarray):
    img = np.asarray(img)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(to_bytes(img).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5" or int(parts[3]) != 255:
        raise ValueError(f"{path}: only 8-bit binary PGM (P5) is supported")
    w, h = int(parts[1]), int(parts[2])
    data = np.frombuffer(parts[4][: w * h], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return data.reshape(h, w) / 127.5 - 1.0


def write_images_csv(path, images: np.ndarray):
    """One image per row, pixels in row-major order."""
    images = np.asarray(images)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for img in images.reshape(len(images), -1):
            w.writerow([f"{v:.6f}" for v in img])


def write_loss_csv(path, results):
    """Rows ``epoch, mean_loss, noise_source`` for one or more :class:`TrainResult`."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "noise_source"])
        for r in results:
            for epoch, value in enumerate(r.losses):
                w.writerow([epoch, repr(float(value)), r.noise_source])


class DiffusionModel(BaseEstimator):
    """Estimator wrapper: ``fit`` on an image stack, ``sample`` new images.

    The noise source is passed to ``fit`` and ``sample`` rather than held as
    a hyper-parameter, since streams are stateful.
    """

    def __init__(self, T=100, epochs=50, lr=LR, batch_size=BATCH, hidden=HIDDEN, random_state=0):
        self.T = T
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.hidden = hidden
        self.random_state = random_state

    def fit(self, X, y=None, noise_source=None):
        X = np.asarray(X, dtype=float)
        if X.ndim != 3:
            raise ValueError("X must be an (n, H, W) image stack")
        if not np.all(np.isfinite(X)):
            raise ValueError("X contains non-finite values")
        self.image_shape_ = X.shape[1:]
        self.schedule_ = letter_schedule(self.T)
        res = train(X, self.schedule_, noise_source, self.epochs, self.lr, self.batch_size,
                    self.random_state, self.hidden)
        self.denoiser_ = res.denoiser
        self.loss_curve_ = res.losses
        return self

    def sample(self, n_images: int, noise_source=None):
        if not hasattr(self, "denoiser_"):
            raise RuntimeError("call fit before sample")
        src = IdealNoise(self.random_state + 1) if noise_source is None else noise_source
        return generate(self.denoiser_, self.schedule_, src, n_images, self.image_shape_)
