"""Stochastic macrospin model of a voltage-controlled MTJ free layer.

The free layer is a single moment ``m`` (unit vector) obeying the
Landau-Lifshitz-Gilbert equation in explicit form::

    dm/dt = -g' [ m x H + alpha m x (m x H) ],   g' = gamma mu0 / (1 + alpha^2)

with ``H = (2 K(V) / (mu0 Ms)) m_z z + h_ext + H_th``.  The gate voltage only
enters through the linear VCMA law ``K(V) = K0 - xi V / (t_ox t_free)``.  The
reference layer points along +z, so P (bit 0) means ``m_z > 0``.

Trials are integrated with the stochastic Heun scheme in :mod:`._kernels`.
Each Monte Carlo trial draws its thermal field from its own
``SeedSequence(seed, spawn_key=(init_bit, trial))`` stream, so probability
estimates do not depend on how trials are scheduled across threads.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import constants
from scipy.stats import binomtest

from . import _kernels

MU0 = constants.mu_0
KB = constants.k
OE = 1e3 / (4 * math.pi)  # A/m per oersted

P, AP = 0, 1

DT_DEFAULT = 1e-13
DT_MAX = 1e-12
RELAX_DEFAULT = 5e-9
SETTLE_MARGIN_KT = 20.0

_CHUNK = 4096
_CHECK_EVERY = 50

_VC_PAPER = 2.4
_XI_PAPER = 40e-15
_T_OX = 1.4e-9
_T_FREE = 1.1e-9


@dataclass(frozen=True)
class DeviceParams:
    """Physical constants of one VC-MTJ, all SI.

    ``k_eff0`` is the net perpendicular anisotropy at zero bias with
    demagnetization already folded in; the default is chosen so that the
    critical voltage ``k_eff0 t_ox t_free / xi_vcma`` equals 2.4 V.
    """

    m_sat: float = 2.0e5
    k_eff0: float = _XI_PAPER * _VC_PAPER / (_T_OX * _T_FREE)
    xi_vcma: float = _XI_PAPER
    t_free: float = _T_FREE
    t_ox: float = _T_OX
    diameter: float = 100e-9
    alpha: float = 0.05
    gamma: float = 1.76e11
    temperature: float = 300.0
    h_ext: tuple = (390 * OE, 0.0, 0.0)
    r_p: float = 5.0e3
    r_ap: float = 11.0e3

    def __post_init__(self):
        object.__setattr__(self, "h_ext", tuple(float(h) for h in self.h_ext))
        if len(self.h_ext) != 3:
            raise ValueError("h_ext must have three components")
        for name in ("t_free", "t_ox", "diameter", "m_sat", "gamma", "xi_vcma", "k_eff0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)!r}")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not self.r_ap > self.r_p > 0:
            raise ValueError("need r_ap > r_p > 0 (AP is the high-resistance state)")

    @classmethod
    def from_critical_voltage(cls, v_c: float = _VC_PAPER, **kwargs) -> "DeviceParams":
        """Build params with ``k_eff0`` fixed by the requested critical voltage."""
        probe = cls(**kwargs)
        k0 = probe.xi_vcma * v_c / (probe.t_ox * probe.t_free)
        return cls(**{**kwargs, "k_eff0": k0})

    @property
    def v_c(self) -> float:
        return self.k_eff0 * self.t_ox * self.t_free / self.xi_vcma

    @property
    def volume(self) -> float:
        return math.pi * (self.diameter / 2) ** 2 * self.t_free

    @property
    def tmr(self) -> float:
        return (self.r_ap - self.r_p) / self.r_p

    @property
    def h_anis0(self) -> float:
        """Zero-bias anisotropy field ``2 K0 / (mu0 Ms)`` in A/m."""
        return anisotropy_field(self, 0.0)

    @property
    def thermal_stability(self) -> float:
        """Zero-bias barrier ``K0 V / kT`` ignoring the in-plane field."""
        if self.temperature == 0:
            return math.inf
        return self.k_eff0 * self.volume / (KB * self.temperature)

    def thermal_sigma(self, dt: float) -> float:
        """Per-component standard deviation of the thermal field (A/m)."""
        return math.sqrt(
            2 * self.alpha * KB * self.temperature
            / (MU0**2 * self.gamma * self.m_sat * self.volume * dt)
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["h_ext"] = list(self.h_ext)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceParams":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown device parameters: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class PulseSpec:
    voltage: float
    width: float
    relax_time: float = RELAX_DEFAULT

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError("pulse width must be > 0")
        if self.relax_time < 0:
            raise ValueError("relax_time must be >= 0")
        if self.voltage < 0:
            raise ValueError("voltage must be >= 0")


@dataclass(frozen=True)
class SpinState:
    """Free-layer direction; the bit is read from the sign of ``m_z``."""

    m: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float).reshape(3)
        norm = np.linalg.norm(m)
        if not abs(norm - 1.0) <= 1e-9:
            raise ValueError(f"|m| must be 1 within 1e-9, got {norm!r}")
        object.__setattr__(self, "m", m)

    @property
    def bit(self) -> int:
        return P if self.m[2] > 0 else AP

    @classmethod
    def equilibrium(cls, params: DeviceParams, bit: int) -> "SpinState":
        return cls(_equilibrium(params, bit))


@dataclass(frozen=True)
class ProbPoint:
    voltage: float
    width: float
    p_pa: float
    p_ap: float
    n_trials: int
    ci_half_width: float

    def as_row(self) -> list:
        return [self.voltage, self.width, self.p_pa, self.p_ap, self.ci_half_width, self.n_trials]


CSV_HEADER = ["voltage_V", "width_s", "p_pa", "p_ap", "ci", "n_trials"]


def keff_of_voltage(params: DeviceParams, v: float) -> float:
    """Effective anisotropy (J/m^3) under gate voltage ``v``; negative means easy-plane."""
    if v < 0:
        raise ValueError("voltage must be >= 0")
    return params.k_eff0 - params.xi_vcma * v / (params.t_ox * params.t_free)


def anisotropy_field(params: DeviceParams, v: float) -> float:
    return 2 * keff_of_voltage(params, v) / (MU0 * params.m_sat)


def effective_field(params: DeviceParams, m, v: float) -> np.ndarray:
    """Deterministic effective field (A/m); the thermal part is added by the integrator."""
    m = np.asarray(m, dtype=float)
    h = np.array(params.h_ext, dtype=float)
    h[2] += anisotropy_field(params, v) * m[2]
    return h


def energy_density(params: DeviceParams, m, v: float = 0.0) -> float:
    """Anisotropy plus Zeeman energy density (J/m^3)."""
    m = np.asarray(m, dtype=float)
    return keff_of_voltage(params, v) * (1 - m[2] ** 2) - MU0 * params.m_sat * float(
        np.dot(params.h_ext, m)
    )


def analytic_half_period(params: DeviceParams) -> float:
    """Time for damped precession about ``h_ext`` alone to advance by pi.

    For Gilbert damping in a fixed field the azimuth advances at exactly
    ``gamma mu0 |h| / (1 + alpha^2)``.
    """
    h = float(np.linalg.norm(params.h_ext))
    return math.pi * (1 + params.alpha**2) / (params.gamma * MU0 * h)


def _equilibrium(params: DeviceParams, bit: int) -> np.ndarray:
    hk = params.h_anis0
    hx, hy, hz = params.h_ext
    sign = 1.0 if bit == P else -1.0
    if hz == 0.0 and math.hypot(hx, hy) < hk:
        mx, my = hx / hk, hy / hk
        return np.array([mx, my, sign * math.sqrt(1 - mx * mx - my * my)])
    # general field: zero-temperature relaxation with heavy damping
    m = np.array([0.0, 0.0, sign])
    zeros = np.zeros((_CHUNK, 3))
    g = params.gamma * MU0 / 2.0
    for _ in range(50):
        _kernels.heun_chunk(m, hk, hx, hy, hz, g, 1.0, 1e-12, zeros, 0.0, 0.0, 0)
    return m / np.linalg.norm(m)


class _Integrator:
    """Pre-computed constants shared by all trials of one experiment."""

    def __init__(self, params: DeviceParams, dt: float, settle: bool = True):
        _check_dt(dt)
        self.params = params
        self.dt = dt
        self.g = params.gamma * MU0 / (1 + params.alpha**2)
        self.sigma = params.thermal_sigma(dt) if params.temperature > 0 else 0.0
        self.hx, self.hy, self.hz = params.h_ext
        self.hk0 = params.h_anis0
        self.e_stop = -math.inf
        h_ip = math.hypot(self.hx, self.hy)
        if settle and self.hz == 0.0 and h_ip < self.hk0:
            # reduced energy of the zero-bias saddle (m along the in-plane field)
            saddle = 0.5 * self.hk0 - h_ip
            kt = KB * params.temperature / (MU0 * params.m_sat * params.volume)
            # at T = 0 any state below the saddle stays in its well
            margin = SETTLE_MARGIN_KT * kt if kt > 0 else 1e-9 * self.hk0
            self.e_stop = saddle - margin
        self._zeros = np.zeros((_CHUNK, 3))

    def run(self, m: np.ndarray, hk: float, n_steps: int, rng, settle: bool) -> int:
        """Integrate ``n_steps`` at anisotropy field ``hk``; returns steps taken."""
        check = _CHECK_EVERY if settle and self.e_stop > -math.inf else 0
        done = 0
        while done < n_steps:
            k = min(_CHUNK, n_steps - done)
            if self.sigma > 0:
                noise = rng.standard_normal((k, 3))
            else:
                noise = self._zeros[:k]
            taken = _kernels.heun_chunk(
                m, hk, self.hx, self.hy, self.hz, self.g, self.params.alpha,
                self.dt, noise, self.sigma, self.e_stop, check,
            )
            done += taken
            if taken < k:
                break
        return done

    def pulse(self, m: np.ndarray, pulse: PulseSpec, rng) -> np.ndarray:
        self.run(m, anisotropy_field(self.params, pulse.voltage), _n_steps(pulse.width, self.dt), rng, False)
        if pulse.relax_time > 0:
            self.run(m, self.hk0, _n_steps(pulse.relax_time, self.dt), rng, True)
        return m


def _check_dt(dt: float):
    if not 0 < dt <= DT_MAX:
        raise ValueError(f"dt must lie in (0, {DT_MAX}], got {dt!r}")


def _n_steps(duration: float, dt: float) -> int:
    return max(1, int(round(duration / dt)))


def step_heun(params: DeviceParams, state: SpinState, v: float, dt: float, rng) -> SpinState:
    """One stochastic Heun step at gate voltage ``v``; ``rng`` is a numpy Generator."""
    _check_dt(dt)
    integ = _Integrator(params, dt, settle=False)
    m = state.m.copy()
    integ.run(m, anisotropy_field(params, v), 1, rng, False)
    return SpinState(m)


def trajectory(params: DeviceParams, state: SpinState, v: float, duration: float,
               rng=None, dt: float = DT_DEFAULT) -> np.ndarray:
    """Every integrator state over ``duration`` at fixed voltage, shape (n + 1, 3)."""
    integ = _Integrator(params, dt, settle=False)
    n = _n_steps(duration, dt)
    if integ.sigma > 0:
        if rng is None:
            raise ValueError("a random generator is required at finite temperature")
        noise = rng.standard_normal((n, 3))
    else:
        noise = np.zeros((n, 3))
    out = np.empty((n + 1, 3))
    m = state.m.copy()
    _kernels.heun_record(m, anisotropy_field(params, v), integ.hx, integ.hy, integ.hz,
                         integ.g, params.alpha, dt, noise, integ.sigma, out)
    return out


def simulate_pulse(params: DeviceParams, init: SpinState, pulse: PulseSpec, rng=None,
                   dt: float = DT_DEFAULT, settle: bool = True) -> SpinState:
    """Apply one pulse then relax at zero bias.

    With ``settle`` the relaxation stops early once the energy is 20 kT below
    the zero-bias saddle, since the well can no longer be left on the
    remaining time scale.
    """
    integ = _Integrator(params, dt, settle=settle)
    if integ.sigma > 0 and rng is None:
        raise ValueError("a random generator is required at finite temperature")
    m = integ.pulse(init.m.copy(), pulse, rng)
    return SpinState(m / np.linalg.norm(m))


def trial_generator(seed, init_bit: int, trial: int) -> np.random.Generator:
    """Independent stream for one Monte Carlo trial."""
    if isinstance(seed, np.random.SeedSequence):
        entropy = seed.entropy
        key = tuple(seed.spawn_key)
    else:
        entropy, key = int(seed), ()
    return np.random.default_rng(np.random.SeedSequence(entropy, spawn_key=key + (init_bit, trial)))


def _switch_count(integ: _Integrator, pulse: PulseSpec, init_bit: int, seed, trials: range) -> np.ndarray:
    m0 = _equilibrium(integ.params, init_bit)
    out = np.empty(len(trials), dtype=np.uint8)
    for j, i in enumerate(trials):
        rng = trial_generator(seed, init_bit, i) if integ.sigma > 0 else None
        m = integ.pulse(m0.copy(), pulse, rng)
        bit = P if m[2] > 0 else AP
        out[j] = bit != init_bit
    return out


def switching_outcomes(params: DeviceParams, pulse: PulseSpec, init_bit: int, n_trials: int,
                       seed=0, dt: float = DT_DEFAULT, threads: int = 1) -> np.ndarray:
    """Per-trial switch indicators in trial order."""
    integ = _Integrator(params, dt)
    if threads <= 1 or n_trials < 2 * threads:
        return _switch_count(integ, pulse, init_bit, seed, range(n_trials))
    bounds = np.linspace(0, n_trials, threads + 1).astype(int)
    blocks = [range(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        parts = list(ex.map(lambda r: _switch_count(integ, pulse, init_bit, seed, r), blocks))
    return np.concatenate(parts)


def wilson_half_width(k: int, n: int, level: float = 0.95) -> float:
    ci = binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="wilson")
    return 0.5 * (ci.high - ci.low)


def switching_probability(params: DeviceParams, pulse: PulseSpec, init_bit=None, n_trials: int = 1000,
                          seed=0, dt: float = DT_DEFAULT, threads: int = 1, min_trials: int = 100) -> ProbPoint:
    """Monte Carlo estimate of the per-pulse switching probabilities.

    ``init_bit`` restricts the run to one starting state; the other
    probability is then reported as NaN.  By default both P->AP and AP->P
    are estimated with ``n_trials`` each.  ``ci_half_width`` is the larger of
    the two 95% Wilson half-intervals.
    """
    if n_trials < max(min_trials, 1):
        raise ValueError(f"n_trials must be >= {max(min_trials, 1)}")
    bits = (P, AP) if init_bit is None else (int(init_bit),)
    probs = {P: math.nan, AP: math.nan}
    ci = 0.0
    for b in bits:
        hits = int(switching_outcomes(params, pulse, b, n_trials, seed, dt, threads).sum())
        probs[b] = hits / n_trials
        ci = max(ci, wilson_half_width(hits, n_trials))
    return ProbPoint(pulse.voltage, pulse.width, probs[P], probs[AP], n_trials, ci)


def sweep(params: DeviceParams, voltages: Sequence[float], widths: Sequence[float], n_trials: int,
          seed=0, init_bit=None, relax_time: float = RELAX_DEFAULT, dt: float = DT_DEFAULT,
          threads: int = 1, min_trials: int = 100) -> list[ProbPoint]:
    """Cross-product of voltages and widths, voltage-major."""
    voltages, widths = list(voltages), list(widths)
    if not voltages or not widths:
        raise ValueError("voltage and width grids must be non-empty")
    return [
        switching_probability(params, PulseSpec(v, w, relax_time), init_bit, n_trials, seed, dt, threads,
                              min_trials)
        for v in voltages
        for w in widths
    ]


def write_csv(path, points: Iterable[ProbPoint]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for p in points:
            w.writerow([repr(float(x)) if isinstance(x, float) else x for x in p.as_row()])


def read_csv(path) -> list[ProbPoint]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != CSV_HEADER:
        raise ValueError(f"{path}: expected header {CSV_HEADER}")
    return [
        ProbPoint(float(r[0]), float(r[1]), float(r[2]), float(r[3]), int(r[5]), float(r[4]))
        for r in rows[1:]
    ]


@dataclass
class LookupTable:
    """Switching probabilities versus pulse width at one gate voltage."""

    voltage: float
    widths: np.ndarray
    p_pa: np.ndarray
    p_ap: np.ndarray
    ci: np.ndarray
    n_trials: int
    relax_time: float = RELAX_DEFAULT

    def points(self) -> list[ProbPoint]:
        return [
            ProbPoint(self.voltage, float(w), float(a), float(b), self.n_trials, float(c))
            for w, a, b, c in zip(self.widths, self.p_pa, self.p_ap, self.ci)
        ]

    def row(self, width: float, rtol: float = 1e-6) -> ProbPoint:
        idx = np.flatnonzero(np.isclose(self.widths, width, rtol=rtol, atol=0))
        if idx.size == 0:
            raise KeyError(f"no lookup row for width {width!r}")
        return self.points()[int(idx[0])]

    def write_csv(self, path):
        write_csv(path, self.points())

    @classmethod
    def from_points(cls, points: Sequence[ProbPoint], relax_time: float = RELAX_DEFAULT) -> "LookupTable":
        if not points:
            raise ValueError("empty lookup")
        volts = {p.voltage for p in points}
        if len(volts) != 1:
            raise ValueError("a lookup table holds a single voltage")
        order = sorted(points, key=lambda p: p.width)
        return cls(
            voltage=order[0].voltage,
            widths=np.array([p.width for p in order]),
            p_pa=np.array([p.p_pa for p in order]),
            p_ap=np.array([p.p_ap for p in order]),
            ci=np.array([p.ci_half_width for p in order]),
            n_trials=order[0].n_trials,
            relax_time=relax_time,
        )

    @classmethod
    def read_csv(cls, path, relax_time: float = RELAX_DEFAULT) -> "LookupTable":
        return cls.from_points(read_csv(path), relax_time)


def build_lookup(params: DeviceParams, voltage: float, widths: Sequence[float], n_trials: int,
                 seed=0, relax_time: float = RELAX_DEFAULT, dt: float = DT_DEFAULT, threads: int = 1,
                 max_ci: float = 0.05) -> LookupTable:
    """Tabulate both transition probabilities per width for later inversion."""
    widths = list(widths)
    if not widths:
        raise ValueError("width grid must be non-empty")
    if any(b <= a for a, b in zip(widths, widths[1:])):
        raise ValueError("widths must be strictly ascending")
    pts = sweep(params, [voltage], widths, n_trials, seed, None, relax_time, dt, threads)
    table = LookupTable.from_points(pts, relax_time)
    worst = float(np.max(table.ci))
    if worst > max_ci:
        raise ValueError(f"CI half-width {worst:.3f} exceeds {max_ci}; increase n_trials")
    return table


def zero_temperature_outcome(params: DeviceParams, voltage: float, width: float, init_bit: int = P,
                             relax_time: float = RELAX_DEFAULT, dt: float = DT_DEFAULT) -> int:
    """Deterministic read-out bit after one pulse with the thermal field switched off."""
    cold = DeviceParams(**{**params.to_dict(), "temperature": 0.0})
    st = simulate_pulse(cold, SpinState.equilibrium(cold, init_bit), PulseSpec(voltage, width, relax_time), dt=dt)
    return st.bit


def first_flip_width(params: DeviceParams, voltage: float, max_width: float = 2e-9, coarse: float = 1e-11,
                     init_bit: int = P, relax_time: float = RELAX_DEFAULT, dt: float = DT_DEFAULT) -> float:
    """Smallest pulse width (to one integrator step) whose T = 0 read-out differs from ``init_bit``.

    A coarse scan brackets the first flip and a step-resolution scan refines
    it.  Returns NaN if no flip occurs below ``max_width``.
    """
    def flips(n):
        return zero_temperature_outcome(params, voltage, n * dt, init_bit, relax_time, dt) != init_bit

    stride = max(1, int(round(coarse / dt)))
    n_max = int(round(max_width / dt))
    prev = 0
    for n in range(stride, n_max + 1, stride):
        if flips(n):
            for k in range(prev + 1, n + 1):
                if flips(k):
                    return k * dt
        prev = n
    return math.nan


def measured_half_period(params: DeviceParams, dt: float = DT_DEFAULT, max_time: float = 2e-9) -> float:
    """Zero-temperature time for the azimuth about ``h_ext`` to advance by pi at ``v = v_c``.

    Starts from the P equilibrium and interpolates the crossing linearly
    between integrator steps.
    """
    cold = DeviceParams(**{**params.to_dict(), "temperature": 0.0})
    traj = trajectory(cold, SpinState.equilibrium(cold, P), cold.v_c, max_time, dt=dt)
    axis = np.asarray(cold.h_ext) / np.linalg.norm(cold.h_ext)
    # orthonormal frame (e1, e2) perpendicular to the field, e1 along z projected
    e1 = np.array([0.0, 0.0, 1.0]) - axis[2] * axis
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    phase = np.unwrap(np.arctan2(traj @ e2, traj @ e1))
    phase = np.abs(phase - phase[0])
    k = int(np.argmax(phase >= math.pi))
    if phase[k] < math.pi:
        return math.nan
    frac = (math.pi - phase[k - 1]) / (phase[k] - phase[k - 1])
    return (k - 1 + frac) * dt
