"""Quality checks for noise streams and generated image sets."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats as sps

from .markov import EpsDist

MIN_EXPECTED = 5.0


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class Moments:
    n: int
    mean: float
    std: float
    skew: float
    excess_kurtosis: float
    higher_defined: bool

    def to_dict(self) -> dict:
        return asdict(self)


def moments(samples) -> Moments:
    """Sample mean, the ``ddof=1`` std, and bias-corrected skewness and excess kurtosis.

    A zero-variance sample leaves the higher moments undefined (NaN, with
    ``higher_defined`` False).
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 8:
        raise ValueError("moments need at least 8 samples")
    std = float(x.std(ddof=1))
    if std == 0.0:
        return Moments(x.size, float(x.mean()), 0.0, math.nan, math.nan, False)
    return Moments(
        x.size,
        float(x.mean()),
        std,
        float(sps.skew(x, bias=False)),
        float(sps.kurtosis(x, fisher=True, bias=False)),
        True,
    )


@dataclass
class GofReport:
    test: str
    statistic: float
    p_value: float
    n: int
    alpha: float = 0.01
    dof: int | None = None
    notes: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.p_value > self.alpha

    @property
    def per_dof(self) -> float:
        return self.statistic / self.dof if self.dof else math.nan

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    CSV_FIELDS = ("test", "n", "statistic", "dof", "p_value", "alpha", "passed")

    def csv_row(self) -> list:
        return [self.test, self.n, repr(self.statistic), "" if self.dof is None else self.dof,
                repr(self.p_value), self.alpha, int(self.passed)]


def _grid_index(samples, step: float, half: int) -> np.ndarray:
    x = np.asarray(samples, dtype=float).ravel()
    k = np.rint(x / step)
    if np.any(np.abs(x - k * step) > 1e-9 * step):
        raise ValueError("samples are not aligned to the target grid")
    idx = k.astype(np.int64) + half
    if idx.min() < 0 or idx.max() > 2 * half:
        raise ValueError("samples fall outside the target support")
    return idx


def merge_bins(expected: np.ndarray, observed: np.ndarray, min_expected: float = MIN_EXPECTED):
    """Greedy left-to-right merging until every bin expects at least ``min_expected``.

    A short remainder at the right end is folded into the last full bin.
    """
    e_out, o_out = [], []
    e_acc = o_acc = 0.0
    for e, o in zip(expected, observed):
        e_acc += e
        o_acc += o
        if e_acc >= min_expected:
            e_out.append(e_acc)
            o_out.append(o_acc)
            e_acc = o_acc = 0.0
    if e_acc > 0 or o_acc > 0:
        if e_out:
            e_out[-1] += e_acc
            o_out[-1] += o_acc
        else:
            e_out.append(e_acc)
            o_out.append(o_acc)
    return np.array(e_out), np.array(o_out)


def chi2_gof(samples, target: EpsDist, min_expected: float = MIN_EXPECTED, alpha: float = 0.01) -> GofReport:
    """Pearson chi-square of grid-aligned samples against a discrete law."""
    probs = np.asarray(target.probs, dtype=float)
    half = (len(probs) - 1) // 2
    idx = _grid_index(samples, target.step, half)
    n = idx.size
    observed = np.bincount(idx, minlength=len(probs)).astype(float)
    expected, observed = merge_bins(n * probs, observed, min_expected)
    if len(expected) < 2:
        raise ValueError(f"only {len(expected)} bin(s) left after merging; need more samples")
    stat = float(np.sum((observed - expected) ** 2 / expected))
    dof = len(expected) - 1
    return GofReport("chi2", stat, float(sps.chi2.sf(stat, dof)), n, alpha, dof, {"bins": len(expected)})


def ks_statistic(samples, mu: float = 0.0, sigma: float = 1.0, grid_step: float | None = None,
                 alpha: float = 0.01) -> GofReport:
    """Kolmogorov-Smirnov distance to N(mu, sigma^2), asymptotic p-value.

    Samples on a grid of spacing ``grid_step`` cannot get closer than about
    half the largest probability jump, ``grid_step * pdf(mu) / 2``; that floor
    is reported in ``notes`` and ``below_floor`` says whether the statistic
    is already at it (so a rejection may be a discreteness artifact).
    """
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if n < 50:
        raise ValueError("ks_statistic needs at least 50 samples")
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    cdf = sps.norm.cdf(x, mu, sigma)
    i = np.arange(1, n + 1)
    d = float(max(np.max(i / n - cdf), np.max(cdf - (i - 1) / n)))
    p = float(sps.kstwobign.sf(math.sqrt(n) * d))
    notes = {}
    if grid_step is not None:
        floor = float(0.5 * grid_step * sps.norm.pdf(mu, mu, sigma))
        notes = {"grid_step": grid_step, "discreteness_floor": floor, "below_floor": bool(d <= 1.5 * floor)}
    return GofReport("ks", d, p, n, alpha, None, notes)


def serial_permutation_test(samples, lag: int = 1, n_perm: int = 200, seed: int = 0) -> GofReport:
    """Two-sided permutation test of zero lag-``lag`` autocorrelation."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size <= lag + 2:
        raise ValueError("sequence too short for the requested lag")

    def r(v):
        a, b = v[:-lag] - v[:-lag].mean(), v[lag:] - v[lag:].mean()
        den = math.sqrt(float(a @ a) * float(b @ b))
        return 0.0 if den == 0 else float(a @ b) / den

    obs = r(x)
    rng = np.random.default_rng(seed)
    hits = sum(abs(r(rng.permutation(x))) >= abs(obs) for _ in range(n_perm))
    return GofReport(f"serial_lag{lag}", obs, (1 + hits) / (1 + n_perm), x.size)


@dataclass
class MmdReport:
    mmd2: float
    bandwidth: float
    p_value: float
    n_a: int
    n_b: int
    n_perm: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    CSV_FIELDS = ("mmd2", "bandwidth", "p_value", "n_a", "n_b", "n_perm")

    def csv_row(self) -> list:
        return [repr(self.mmd2), repr(self.bandwidth), repr(self.p_value), self.n_a, self.n_b, self.n_perm]


def _sq_dists(z: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", z, z)
    d2 = sq[:, None] + sq[None, :] - 2.0 * z @ z.T
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def median_bandwidth(*sets) -> float:
    """Median pairwise Euclidean distance over the pooled sets."""
    z = np.concatenate([np.asarray(s, dtype=float).reshape(len(s), -1) for s in sets])
    d2 = _sq_dists(z)
    iu = np.triu_indices(len(z), 1)
    h = float(np.sqrt(np.median(d2[iu])))
    if not h > 0:
        raise DegenerateInputError("median pairwise distance is zero; inputs are (nearly) identical")
    return h


def _mmd2_from_kernel(k: np.ndarray, n_a: int) -> float:
    kxx = k[:n_a, :n_a]
    kyy = k[n_a:, n_a:]
    kxy = k[:n_a, n_a:]
    m = n_a
    n = k.shape[0] - n_a
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


def mmd2(images_a, images_b, bandwidth: float | None = None, n_perm: int = 200, seed: int = 0) -> MmdReport:
    """Unbiased squared MMD under a Gaussian RBF kernel, with a permutation p-value.

    The estimate is reported as computed and can be slightly negative when
    the two sets come from one distribution.
    """
    a = np.asarray(images_a, dtype=float)
    b = np.asarray(images_b, dtype=float)
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"image shapes differ: {a.shape[1:]} vs {b.shape[1:]}")
    if len(a) < 20 or len(b) < 20:
        raise ValueError("mmd2 needs at least 20 images per set")
    if n_perm < 200:
        raise ValueError("use at least 200 permutations")
    z = np.concatenate([a.reshape(len(a), -1), b.reshape(len(b), -1)])
    d2 = _sq_dists(z)
    if bandwidth is None:
        iu = np.triu_indices(len(z), 1)
        bandwidth = float(np.sqrt(np.median(d2[iu])))
    if not bandwidth > 0:
        raise DegenerateInputError("kernel bandwidth is zero; inputs are (nearly) identical")
    k = np.exp(-d2 / (2.0 * bandwidth**2))
    obs = _mmd2_from_kernel(k, len(a))
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_perm):
        p = rng.permutation(len(z))
        if _mmd2_from_kernel(k[np.ix_(p, p)], len(a)) >= obs:
            hits += 1
    return MmdReport(obs, float(bandwidth), (1 + hits) / (1 + n_perm), len(a), len(b), n_perm)


def write_reports_csv(path, reports):
    """One CSV row per report; all reports must be the same type."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to write")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(type(reports[0]).CSV_FIELDS)
        for r in reports:
            w.writerow(r.csv_row())
