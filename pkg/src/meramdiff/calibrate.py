"""Inverse design of per-bit switching probabilities.

The stationary increment law of a unit depends on each bit only through its
flip rate ``p q / (p + q)``, so the objective is cheap (a handful of short
convolutions) and exact.  A derivative-free multi-start coordinate descent
searches the probability box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .macrospin import LookupTable, PulseSpec
from .markov import BitTransition, EpsDist, UnitConfig, epsilon_distribution

PRESET_VOLTAGE = 2.4
PRESET_MSB_WIDTH = 0.4e-9
PRESET_LSB_WIDTH = 2e-9


class NoImprovementError(RuntimeError):
    pass


class InfeasiblePulseError(ValueError):
    def __init__(self, bits, residuals):
        self.bits = list(bits)
        self.residuals = list(residuals)
        super().__init__(
            "infeasible probability request for bit(s) "
            + ", ".join(f"{b} (residual {r:.3f})" for b, r in zip(self.bits, self.residuals))
        )


@dataclass(frozen=True)
class TargetDist(EpsDist):
    sigma: float = 1.0


def eps_grid(n_bits: int, frac_bits: int | None = None) -> np.ndarray:
    """Support of the increment law for an ``n_bits`` unit."""
    frac = max(n_bits - 2, 0) if frac_bits is None else frac_bits
    half = (1 << n_bits) - 1
    return np.arange(-half, half + 1) * 2.0**-frac


def discretize_gaussian(sigma: float, grid) -> TargetDist:
    """Normal density sampled on a symmetric uniform grid, renormalized."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    grid = np.asarray(grid, dtype=float)
    step = float(grid[1] - grid[0])
    if not np.allclose(grid, -grid[::-1], atol=1e-12 * step):
        raise ValueError("grid must be symmetric about 0")
    z = grid / sigma
    w = np.exp(-0.5 * z * z)
    return TargetDist(step, w / w.sum(), float(sigma))


def divergence(p, q, metric: str = "tv") -> float:
    """TV, KL(p || q), or Pearson chi-square between two laws on one grid."""
    p = getattr(p, "probs", p)
    q = getattr(q, "probs", q)
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("distributions live on different grids")
    if metric == "tv":
        return 0.5 * float(np.abs(p - q).sum())
    if metric == "kl":
        mask = p > 0
        if np.any(q[mask] == 0):
            return math.inf
        return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))
    if metric == "chi2":
        floor = max(float(q.max()) * 1e-12, 1e-300)
        return float(np.sum((p - q) ** 2 / np.maximum(q, floor)))
    raise ValueError(f"unknown metric {metric!r}")


@dataclass(frozen=True)
class FitOptions:
    starts: int = 8
    seed: int = 0
    lo: float = 0.01
    hi: float = 0.99
    metric: str = "tv"
    steps: tuple = (0.2, 0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.001)
    max_sweeps: int = 200
    symmetric: bool = False
    frac_bits: int | None = None


@dataclass
class CalibResult:
    config: UnitConfig
    achieved_tv: float
    baseline_tv: float
    objective: float
    metric: str = "tv"
    sigma: float = 1.0
    pulses: list | None = None
    residuals: list | None = None
    n_evals: int = 0
    start_objectives: list = field(default_factory=list)
    history: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = {
            "unit": self.config.to_dict(),
            "fit": {
                "achieved_tv": float(self.achieved_tv),
                "baseline_tv": float(self.baseline_tv),
                "objective": float(self.objective),
                "metric": self.metric,
                "sigma": float(self.sigma),
                "n_evals": int(self.n_evals),
                "start_objectives": [float(x) for x in self.start_objectives],
            },
        }
        if self.pulses is not None:
            d["pulses"] = [
                {"voltage": float(p.voltage), "width": float(p.width), "relax_time": float(p.relax_time),
                 "residual": float(r)}
                for p, r in zip(self.pulses, self.residuals)
            ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CalibResult":
        fit = d.get("fit", {})
        pulses = residuals = None
        if d.get("pulses"):
            pulses = [PulseSpec(p["voltage"], p["width"], p.get("relax_time", 5e-9)) for p in d["pulses"]]
            residuals = [p.get("residual", 0.0) for p in d["pulses"]]
        return cls(
            config=UnitConfig.from_dict(d["unit"]),
            achieved_tv=fit.get("achieved_tv", math.nan),
            baseline_tv=fit.get("baseline_tv", math.nan),
            objective=fit.get("objective", math.nan),
            metric=fit.get("metric", "tv"),
            sigma=fit.get("sigma", 1.0),
            pulses=pulses,
            residuals=residuals,
            n_evals=fit.get("n_evals", 0),
            start_objectives=list(fit.get("start_objectives", [])),
        )

    def report(self) -> str:
        lines = [
            f"metric            {self.metric}",
            f"target sigma      {self.sigma:g}",
            f"achieved TV       {self.achieved_tv:.6f}",
            f"all-coins TV      {self.baseline_tv:.6f}",
            f"objective evals   {self.n_evals}",
            "",
            "bit  weight      p_pa      p_ap   flip_rate" + ("   width_ns  residual" if self.pulses else ""),
        ]
        for k, (bt, w) in enumerate(zip(self.config.bits, self.config.weights), start=1):
            row = f"{k:>3}  {w:>6g}  {bt.p_pa:8.4f}  {bt.p_ap:8.4f}  {bt.flip_rate:10.4f}"
            if self.pulses:
                row += f"   {self.pulses[k - 1].width * 1e9:8.3f}  {self.residuals[k - 1]:8.4f}"
            lines.append(row)
        return "\n".join(lines) + "\n"


def _config(x: np.ndarray, n_bits: int, symmetric: bool, frac_bits) -> UnitConfig:
    if symmetric:
        return UnitConfig.from_arrays(x, x, frac_bits)
    return UnitConfig.from_arrays(x[:n_bits], x[n_bits:], frac_bits)


def fit_probabilities(target: TargetDist, n_bits: int = 8, options: FitOptions | None = None) -> CalibResult:
    """Multi-start coordinate descent on the exact stationary increment law.

    Each start walks every coordinate up and down by the current step,
    keeping any strict improvement, until a full sweep changes nothing; then
    the step shrinks.  The overall best (objective, start index) wins.
    """
    opt = options or FitOptions()
    if n_bits < 2:
        raise ValueError("n_bits must be >= 2")
    if opt.starts < 1:
        raise ValueError("need at least one start")
    probs = getattr(target, "probs", target)
    if len(probs) != 2 * (1 << n_bits) - 1:
        raise ValueError("target grid does not match n_bits")
    dim = n_bits if opt.symmetric else 2 * n_bits
    history = []

    def objective(x):
        d = divergence(epsilon_distribution(_config(x, n_bits, opt.symmetric, opt.frac_bits)), probs, opt.metric)
        history.append(d)
        return d

    coins = UnitConfig.uniform(n_bits, 0.5, frac_bits=opt.frac_bits)
    baseline = divergence(epsilon_distribution(coins), probs, opt.metric)
    baseline_tv = divergence(epsilon_distribution(coins), probs, "tv")

    rng = np.random.default_rng(opt.seed)
    inits = rng.uniform(opt.lo, opt.hi, size=(opt.starts, dim))
    best_x, best_f, start_f = None, math.inf, []
    for s in range(opt.starts):
        x = inits[s].copy()
        f = objective(x)
        for step in opt.steps:
            for _ in range(opt.max_sweeps):
                moved = False
                for i in range(dim):
                    for direction in (1.0, -1.0):
                        cand = x.copy()
                        cand[i] = min(opt.hi, max(opt.lo, x[i] + direction * step))
                        if cand[i] == x[i]:
                            continue
                        fc = objective(cand)
                        if fc < f:
                            x, f, moved = cand, fc, True
                            break
                if not moved:
                    break
        start_f.append(f)
        if f < best_f:
            best_x, best_f = x, f

    if baseline <= 1e-12 and baseline <= best_f:
        # the target is the all-coins law itself; coins are an exact solution
        best_x, best_f = np.full(dim, 0.5), baseline
    cfg = _config(best_x, n_bits, opt.symmetric, opt.frac_bits)
    tv = divergence(epsilon_distribution(cfg), probs, "tv")
    exact = best_f <= 1e-12
    if not exact and not best_f < baseline:
        raise NoImprovementError(
            f"best {opt.metric} {best_f:.6g} does not beat the all-coins baseline {baseline:.6g}"
        )
    return CalibResult(
        config=cfg,
        achieved_tv=tv,
        baseline_tv=baseline_tv,
        objective=best_f,
        metric=opt.metric,
        sigma=float(getattr(target, "sigma", math.nan)),
        n_evals=len(history),
        start_objectives=start_f,
        history=np.array(history),
    )


@dataclass
class PulseMap:
    pulses: list
    residuals: np.ndarray
    realized: UnitConfig
    feasible: np.ndarray


def probabilities_to_pulses(lookup: LookupTable, config: UnitConfig, tol: float = 0.05,
                            strict: bool = True) -> PulseMap:
    """Pick, per bit, the tabulated width closest to the requested pair.

    Distance is the larger of the two coordinate gaps; ties go to the
    shortest width.  A bit whose best residual exceeds ``tol`` cannot be
    realized at the table's voltage.
    """
    pa, ap = np.asarray(lookup.p_pa), np.asarray(lookup.p_ap)
    pulses, residuals, realized, feasible = [], [], [], []
    for bt in config.bits:
        dist = np.maximum(np.abs(pa - bt.p_pa), np.abs(ap - bt.p_ap))
        j = int(np.argmin(dist))
        pulses.append(PulseSpec(lookup.voltage, float(lookup.widths[j]), lookup.relax_time))
        residuals.append(float(dist[j]))
        realized.append(BitTransition(float(pa[j]), float(ap[j])))
        feasible.append(dist[j] <= tol)
    residuals = np.array(residuals)
    feasible = np.array(feasible)
    if strict and not feasible.all():
        bad = np.flatnonzero(~feasible)
        raise InfeasiblePulseError(bad + 1, residuals[bad])
    return PulseMap(pulses, residuals, UnitConfig(tuple(realized), config.frac_bits), feasible)


def paper_preset(lookup: LookupTable, n_bits: int = 8, msb_width: float = PRESET_MSB_WIDTH,
                 lsb_width: float = PRESET_LSB_WIDTH) -> UnitConfig:
    """Unit with a short pulse on the most significant bit and a long one elsewhere."""
    if not math.isclose(lookup.voltage, PRESET_VOLTAGE, rel_tol=1e-3):
        raise ValueError(f"preset expects a {PRESET_VOLTAGE} V lookup, got {lookup.voltage} V")
    msb = lookup.row(msb_width)
    rest = lookup.row(lsb_width)
    bits = [BitTransition(rest.p_pa, rest.p_ap)] * (n_bits - 1) + [BitTransition(msb.p_pa, msb.p_ap)]
    return UnitConfig(tuple(bits))


def preset_pulses(n_bits: int = 8, relax_time: float = 5e-9) -> list:
    return [PulseSpec(PRESET_VOLTAGE, PRESET_LSB_WIDTH, relax_time)] * (n_bits - 1) + [
        PulseSpec(PRESET_VOLTAGE, PRESET_MSB_WIDTH, relax_time)
    ]


class GaussianNoiseCalibrator(BaseEstimator):
    """Fit a unit whose increment law approximates a discretized normal.

    ``fit()`` with no data targets ``N(0, sigma^2)``.  Passing samples
    instead fits their histogram on the unit's grid.
    """

    def __init__(self, sigma=1.0, n_bits=8, starts=8, metric="tv", symmetric=False, random_state=0):
        self.sigma = sigma
        self.n_bits = n_bits
        self.starts = starts
        self.metric = metric
        self.symmetric = symmetric
        self.random_state = random_state

    def fit(self, X=None, y=None):
        grid = eps_grid(self.n_bits)
        if X is None:
            target = discretize_gaussian(self.sigma, grid)
        else:
            x = np.asarray(X, dtype=float).ravel()
            if x.size == 0 or not np.all(np.isfinite(x)):
                raise ValueError("X must be a non-empty finite sample")
            step = grid[1] - grid[0]
            idx = np.clip(np.rint(x / step).astype(int) + len(grid) // 2, 0, len(grid) - 1)
            counts = np.bincount(idx, minlength=len(grid)).astype(float)
            target = TargetDist(step, counts / counts.sum(), float(np.std(x)))
        opts = FitOptions(starts=self.starts, seed=self.random_state, metric=self.metric, symmetric=self.symmetric)
        self.result_ = fit_probabilities(target, self.n_bits, opts)
        self.config_ = self.result_.config
        self.tv_ = self.result_.achieved_tv
        self.target_ = target
        return self

    def eps_distribution(self) -> EpsDist:
        check_is_fitted(self, "config_")
        return epsilon_distribution(self.config_)

    def sample(self, n, random_state=None):
        """I.i.d. draws from the fitted stationary increment law."""
        rng = np.random.default_rng(self.random_state if random_state is None else random_state)
        return self.eps_distribution().sample(int(n), rng)
