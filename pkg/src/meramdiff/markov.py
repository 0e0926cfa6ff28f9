"""Exact Markov-chain model of an N-bit MeRAM unit.

Joint states are integers ``s = sum_k b_k 2^(k-1)`` with ``b_k`` the bit of
MTJ ``k`` (1 = AP), so bit ``k`` varies with stride ``2^(k-1)``.  The digit
weights are binary as well, ``w_k = 2^(k-1-frac_bits)``, which makes the
read-out value simply ``A(s) = s / 2^frac_bits``.  With eight bits and six
fraction bits ``A`` covers ``0 .. 255/64`` in steps of ``1/64``.

Under this indexing the dense transition matrix is
``kron(T_N, ..., T_2, T_1)``: the highest bit is the slowest-varying index.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

DENSE_MAX_BITS = 16


class AbsorbingBitError(ValueError):
    """Raised when a bit never flips, leaving the stationary law non-unique."""


@dataclass(frozen=True)
class BitTransition:
    p_pa: float
    p_ap: float

    def __post_init__(self):
        for name in ("p_pa", "p_ap"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v!r}")

    @property
    def flip_rate(self) -> float:
        """Stationary probability of a flip in one step, ``p q / (p + q)`` per direction."""
        s = self.p_pa + self.p_ap
        return 0.0 if s == 0 else self.p_pa * self.p_ap / s


@dataclass(frozen=True)
class UnitConfig:
    """Ordered bits, index 0 is bit 1 (the least significant)."""

    bits: tuple
    frac_bits: int | None = None

    def __post_init__(self):
        bits = tuple(b if isinstance(b, BitTransition) else BitTransition(*b) for b in self.bits)
        if not bits:
            raise ValueError("a unit needs at least one bit")
        object.__setattr__(self, "bits", bits)
        if self.frac_bits is None:
            object.__setattr__(self, "frac_bits", max(len(bits) - 2, 0))

    @property
    def n_bits(self) -> int:
        return len(self.bits)

    @property
    def n_states(self) -> int:
        return 1 << self.n_bits

    @property
    def step(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def weights(self) -> np.ndarray:
        return 2.0 ** (np.arange(self.n_bits) - self.frac_bits)

    @property
    def p_pa(self) -> np.ndarray:
        return np.array([b.p_pa for b in self.bits])

    @property
    def p_ap(self) -> np.ndarray:
        return np.array([b.p_ap for b in self.bits])

    def values(self) -> np.ndarray:
        """Read-out value of every joint state."""
        return np.arange(self.n_states) * self.step

    @classmethod
    def uniform(cls, n_bits: int, p_pa: float, p_ap: float | None = None, frac_bits=None) -> "UnitConfig":
        p_ap = p_pa if p_ap is None else p_ap
        return cls(tuple(BitTransition(p_pa, p_ap) for _ in range(n_bits)), frac_bits)

    @classmethod
    def from_arrays(cls, p_pa, p_ap, frac_bits=None) -> "UnitConfig":
        return cls(tuple(BitTransition(float(a), float(b)) for a, b in zip(p_pa, p_ap)), frac_bits)

    def to_dict(self) -> dict:
        return {
            "frac_bits": int(self.frac_bits),
            "bits": [{"p_pa": float(b.p_pa), "p_ap": float(b.p_ap)} for b in self.bits],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UnitConfig":
        bits = tuple(BitTransition(float(b["p_pa"]), float(b["p_ap"])) for b in d["bits"])
        return cls(bits, d.get("frac_bits"))


def single_matrix(bt: BitTransition) -> np.ndarray:
    """Column-stochastic 2x2 matrix, state order (P, AP)."""
    return np.array([[1.0 - bt.p_pa, bt.p_ap], [bt.p_pa, 1.0 - bt.p_ap]])


@dataclass(frozen=True)
class TransitionMatrix:
    """Factored Kronecker transition operator, dense form on demand."""

    factors: tuple = field(repr=False)

    @property
    def n_bits(self) -> int:
        return len(self.factors)

    def dense(self) -> np.ndarray:
        if self.n_bits > DENSE_MAX_BITS:
            raise ValueError(f"dense form is capped at {DENSE_MAX_BITS} bits; use apply()")
        out = np.ones((1, 1))
        for f in reversed(self.factors):
            out = np.kron(out, f)
        return out

    def apply(self, dist: np.ndarray) -> np.ndarray:
        """``M @ dist`` in O(N 2^N) without materializing ``M``."""
        n = self.n_bits
        t = np.asarray(dist, dtype=float).reshape((2,) * n)
        for k, f in enumerate(self.factors):
            axis = n - 1 - k  # bit k+1 lives on this axis in C order
            t = np.moveaxis(np.tensordot(f, t, axes=([1], [axis])), 0, axis)
        return t.reshape(-1)


def kron_chain(config: UnitConfig) -> TransitionMatrix:
    return TransitionMatrix(tuple(single_matrix(b) for b in config.bits))


def _check_dist(dist, config: UnitConfig) -> np.ndarray:
    dist = np.asarray(dist, dtype=float)
    if dist.shape != (config.n_states,):
        raise ValueError(f"distribution must have {config.n_states} entries, got shape {dist.shape}")
    if np.any(dist < 0) or abs(dist.sum() - 1.0) > 1e-12:
        raise ValueError("distribution must be non-negative and sum to 1")
    return dist


def evolve(dist, config: UnitConfig) -> np.ndarray:
    return kron_chain(config).apply(_check_dist(dist, config))


def bit_marginals(config: UnitConfig) -> np.ndarray:
    """Per-bit stationary law, shape (N, 2) with columns (P, AP)."""
    p, q = config.p_pa, config.p_ap
    s = p + q
    if np.any(s == 0):
        k = int(np.flatnonzero(s == 0)[0]) + 1
        raise AbsorbingBitError(f"absorbing bit {k}: p_pa = p_ap = 0, stationary law is not unique")
    return np.column_stack([q / s, p / s])


def product_dist(marginals: np.ndarray) -> np.ndarray:
    """Joint law of independent bits from (N, 2) marginals, in state indexing."""
    out = np.ones(1)
    for pk in marginals[::-1]:
        out = np.kron(out, pk)
    return out


def stationary(config: UnitConfig) -> np.ndarray:
    return product_dist(bit_marginals(config))


def delta(config: UnitConfig, state: int) -> np.ndarray:
    d = np.zeros(config.n_states)
    d[state] = 1.0
    return d


def value_distribution(dist, config: UnitConfig) -> tuple[np.ndarray, np.ndarray]:
    """(values, probabilities); the value map is a bijection onto the grid."""
    return config.values(), _check_dist(dist, config).copy()


@dataclass(frozen=True)
class EpsDist:
    """Law of the read-out increment on the grid ``d * step``, ``|d| <= 2^N - 1``."""

    step: float
    probs: np.ndarray

    @property
    def offsets(self) -> np.ndarray:
        half = (len(self.probs) - 1) // 2
        return np.arange(-half, half + 1)

    @property
    def support(self) -> np.ndarray:
        return self.offsets * self.step

    def mean(self) -> float:
        return float(np.dot(self.support, self.probs))

    def var(self) -> float:
        mu = self.mean()
        return float(np.dot((self.support - mu) ** 2, self.probs))

    def std(self) -> float:
        return self.var() ** 0.5

    def moment(self, k: int) -> float:
        return float(np.dot(self.support**k, self.probs))

    def excess_kurtosis(self) -> float:
        mu = self.mean()
        c = self.support - mu
        return float(np.dot(c**4, self.probs) / np.dot(c**2, self.probs) ** 2 - 3.0)

    def sample(self, n: int, rng) -> np.ndarray:
        return self.support[rng.choice(len(self.probs), size=n, p=self.probs)]


def _diag_sums(joint: np.ndarray) -> np.ndarray:
    """P(b - a = d) from joint[b, a], d = -(n-1) .. n-1."""
    n = joint.shape[0]
    b, a = np.indices(joint.shape)
    return np.bincount((b - a + n - 1).ravel(), weights=joint.ravel(), minlength=2 * n - 1)


def epsilon_distribution(config: UnitConfig, start=None) -> EpsDist:
    """Exact law of ``A_i - A_{i-1}`` when ``A_{i-1}`` is distributed as ``start``.

    A stationary (product-form) start decomposes the increment into
    independent per-bit three-point laws, so the result is a convolution of
    N small arrays.  Any other start falls back to the double sum over
    ``start_a M[b, a]``.
    """
    if start is None:
        return EpsDist(config.step, _eps_product(config, bit_marginals(config)))
    start = _check_dist(start, config)
    joint = kron_chain(config).dense() * start[None, :]
    return EpsDist(config.step, _diag_sums(joint))


def _eps_product(config: UnitConfig, marginals: np.ndarray) -> np.ndarray:
    out = np.ones(1)
    for k, bt in enumerate(config.bits):
        w = 1 << k
        up = marginals[k, 0] * bt.p_pa
        down = marginals[k, 1] * bt.p_ap
        law = np.zeros(2 * w + 1)
        law[0], law[w], law[2 * w] = down, 1.0 - up - down, up
        out = np.convolve(out, law)
    return out


def sample_chain(config: UnitConfig, n_steps: int, rng, init: int | np.ndarray = 0):
    """Exact per-bit Bernoulli simulation.

    Returns ``(states, values, eps)``: ``states`` has ``n_steps + 1`` joint
    states starting with ``init``; ``eps`` has ``n_steps`` increments.
    ``init`` may be a joint state index, or a probability vector to draw it
    from.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    n = config.n_bits
    if np.ndim(init) == 1:
        init = int(rng.choice(config.n_states, p=_check_dist(init, config)))
    bits = ((int(init) >> np.arange(n)) & 1).astype(np.uint8)
    u = rng.random((n_steps, n))
    walk = _kernels.chain_walk(bits, config.p_pa, config.p_ap, u)
    states = np.empty(n_steps + 1, dtype=np.int64)
    states[0] = init
    states[1:] = walk.astype(np.int64) @ (1 << np.arange(n, dtype=np.int64))
    values = states * config.step
    return states, values, np.diff(values)


def empirical_eps(eps: np.ndarray, config: UnitConfig) -> EpsDist:
    """Histogram of increments on the unit's grid."""
    half = config.n_states - 1
    idx = np.rint(np.asarray(eps) / config.step).astype(np.int64) + half
    counts = np.bincount(idx, minlength=2 * half + 1).astype(float)
    return EpsDist(config.step, counts / counts.sum())


def lag_autocorr(eps, lag: int = 1) -> float:
    """Sample Pearson autocorrelation; NaN for a zero-variance sequence."""
    x = np.asarray(eps, dtype=float)
    if len(x) <= lag + 1:
        raise ValueError("sequence must be longer than lag + 1")
    a, b = x[:-lag], x[lag:]
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if den == 0:
        return float("nan")
    return float(np.dot(a, b) / den)


def write_distribution_csv(path, values, probs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["value", "probability"])
        for v, p in zip(values, probs):
            w.writerow([repr(float(v)), repr(float(p))])


def read_distribution_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["value", "probability"]:
        raise ValueError(f"{path}: expected header value,probability")
    arr = np.array([[float(a), float(b)] for a, b in rows[1:]])
    return arr[:, 0], arr[:, 1]
