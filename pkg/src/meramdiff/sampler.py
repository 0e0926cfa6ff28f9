"""Noise streams drawn from a calibrated MeRAM unit.

A stream owns ``n_units`` independent unit instances used round-robin (draw
``j`` comes from unit ``j % n_units``).  Per draw, a unit either takes one
pulse event (sequential mode: consecutive read-outs of one chain) or first
re-equilibrates for ``burn_in`` events and then takes one (independent
mode).  The Markov backend applies the exact ``burn_in``-step kernel of each
two-state bit in a single move; the physical backend integrates every pulse
event with the macrospin model.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from .calibrate import CalibResult
from .macrospin import (
    AP,
    DT_DEFAULT,
    P,
    DeviceParams,
    PulseSpec,
    _equilibrium,
    _Integrator,
)
from .markov import EpsDist, UnitConfig, _eps_product, bit_marginals

BACKENDS = ("markov", "physical")
MODES = ("sequential", "independent")
DEFECT_KINDS = ("stuck_P", "stuck_AP", "random")
MAX_FILL = 10**8


class StreamConfigError(ValueError):
    pass


class BankFormatError(ValueError):
    pass


class BankDigestError(ValueError):
    pass


@dataclass(frozen=True)
class StreamSpec:
    backend: str = "markov"
    mode: str = "independent"
    scale: float = 1.0
    offset: float = 0.0
    burn_in: int = 100
    defect_rate: float = 0.0
    defect_kind: str = "stuck_P"
    seed: int = 0
    n_units: int = 1

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise StreamConfigError(f"backend must be one of {BACKENDS}")
        if self.mode not in MODES:
            raise StreamConfigError(f"mode must be one of {MODES}")
        if self.defect_kind not in DEFECT_KINDS:
            raise StreamConfigError(f"defect_kind must be one of {DEFECT_KINDS}")
        if not self.scale > 0:
            raise StreamConfigError("scale must be > 0")
        if not 0 <= self.defect_rate < 1:
            raise StreamConfigError("defect_rate must lie in [0, 1)")
        if self.burn_in < 0:
            raise StreamConfigError("burn_in must be >= 0")
        if self.n_units < 1:
            raise StreamConfigError("n_units must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StreamSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise StreamConfigError(f"unknown stream options: {sorted(unknown)}")
        return cls(**d)


def config_digest(config: UnitConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _skip_probs(p: np.ndarray, q: np.ndarray, n: int):
    """n-step flip probabilities of two-state chains (from P, from AP)."""
    s = p + q
    with np.errstate(invalid="ignore", divide="ignore"):
        decay = 1.0 - (1.0 - s) ** n
        from_p = np.where(s > 0, p / s * decay, 0.0)
        from_ap = np.where(s > 0, q / s * decay, 0.0)
    return from_p, from_ap


class NoiseStream:
    """Stateful single-consumer stream; build with :func:`open_stream`."""

    def __init__(self, config: UnitConfig, spec: StreamSpec, device: DeviceParams | None = None,
                 pulses=None, dt: float = DT_DEFAULT, defects=None):
        self.config = config
        self.spec = spec
        self.device = device
        self.pulses = list(pulses) if pulses is not None else None
        self.dt = dt
        self.n_drawn = 0
        n, u = config.n_bits, spec.n_units
        ss = np.random.SeedSequence(spec.seed)
        defect_ss, init_ss, draw_ss, phys_ss = ss.spawn(4)
        self._phys_entropy = phys_ss
        self._rng = np.random.default_rng(draw_ss)

        # defects are drawn once per stream, before anything else
        drng = np.random.default_rng(defect_ss)
        stuck_u = drng.random((u, n))
        kind_u = drng.random((u, n))
        if defects is None:
            self.stuck = stuck_u < spec.defect_rate
        else:
            self.stuck = np.array(defects, dtype=bool).reshape(u, n)
        if spec.defect_kind == "stuck_P":
            stuck_val = np.zeros((u, n), dtype=np.uint8)
        elif spec.defect_kind == "stuck_AP":
            stuck_val = np.ones((u, n), dtype=np.uint8)
        else:
            stuck_val = (kind_u < 0.5).astype(np.uint8)
        self.stuck_value = np.where(self.stuck, stuck_val, 0).astype(np.uint8)
        self.p_pa = np.where(self.stuck, 0.0, config.p_pa[None, :])
        self.p_ap = np.where(self.stuck, 0.0, config.p_ap[None, :])

        self.state = self.stuck_value.copy()
        if spec.backend == "physical":
            self._integ = _Integrator(device, dt)
            self._m0 = {b: _equilibrium(device, b) for b in (P, AP)}
            self._events = 0
        # initial burn-in from the all-P (or stuck) state
        if spec.burn_in > 0:
            if spec.backend == "markov":
                irng = np.random.default_rng(init_ss)
                sp, sa = _skip_probs(self.p_pa, self.p_ap, spec.burn_in)
                uu = irng.random((u, n))
                flip = np.where(self.state == 0, uu < sp, uu < sa)
                self.state = (self.state ^ flip).astype(np.uint8)
            else:
                for _ in range(spec.burn_in):
                    for k in range(u):
                        self._physical_event(k)

    @property
    def digest(self) -> str:
        return config_digest(self.config)

    def _physical_event(self, unit: int):
        """Pulse every healthy bit of one unit once; returns nothing, updates state."""
        for b in range(self.config.n_bits):
            if self.stuck[unit, b]:
                continue
            ss = np.random.SeedSequence(
                self._phys_entropy.entropy,
                spawn_key=tuple(self._phys_entropy.spawn_key) + (unit, b, self._events),
            )
            rng = np.random.default_rng(ss)
            m = self._integ.pulse(self._m0[int(self.state[unit, b])].copy(), self.pulses[b], rng)
            self.state[unit, b] = P if m[2] > 0 else AP
        self._events += 1

    def _bits_to_value(self, bits: np.ndarray) -> np.ndarray:
        w = (1 << np.arange(self.config.n_bits, dtype=np.int64))
        return (bits.astype(np.int64) @ w) * self.config.step

    def _markov_raw(self, n: int) -> np.ndarray:
        u_units = self.spec.n_units
        n_bits = self.config.n_bits
        unit_of = (self.n_drawn + np.arange(n)) % u_units
        if self.spec.mode == "sequential":
            uu = self._rng.random((n, n_bits))
        else:
            uu = self._rng.random((n, n_bits, 2))
        out = np.empty(n)
        for k in range(u_units):
            rows = np.flatnonzero(unit_of == k)
            if rows.size == 0:
                continue
            st = self.state[k].copy()
            if self.spec.mode == "sequential":
                before = np.empty((rows.size, n_bits), dtype=np.uint8)
                walk = _kernels.chain_walk(st, self.p_pa[k], self.p_ap[k], uu[rows])
                before[0] = self.state[k]
                before[1:] = walk[:-1]
                prev, cur = before, walk
            else:
                sp, sa = _skip_probs(self.p_pa[k], self.p_ap[k], self.spec.burn_in)
                prev, cur = _kernels.chain_walk_two_kernel(st, sp, sa, self.p_pa[k], self.p_ap[k], uu[rows])
            self.state[k] = st
            out[rows] = self._bits_to_value(cur) - self._bits_to_value(prev)
        return out

    def _physical_raw(self, n: int) -> np.ndarray:
        out = np.empty(n)
        for j in range(n):
            k = (self.n_drawn + j) % self.spec.n_units
            if self.spec.mode == "independent":
                for _ in range(self.spec.burn_in):
                    self._physical_event(k)
            before = self._bits_to_value(self.state[k][None, :])[0]
            self._physical_event(k)
            out[j] = self._bits_to_value(self.state[k][None, :])[0] - before
        return out

    def draw(self, n: int) -> np.ndarray:
        """Next ``n`` noise values ``scale * eps + offset``."""
        n = int(n)
        if n < 1:
            raise ValueError("n must be >= 1")
        raw = self._markov_raw(n) if self.spec.backend == "markov" else self._physical_raw(n)
        self.n_drawn += n
        return self.spec.scale * raw + self.spec.offset

    def fill(self, shape) -> np.ndarray:
        """Row-major tensor of draws."""
        shape = tuple(int(s) for s in np.atleast_1d(shape))
        size = math.prod(shape)
        if size > MAX_FILL:
            raise ValueError(f"fill of {size} values exceeds the {MAX_FILL} cap")
        return self.draw(size).reshape(shape)

    def exact_law(self) -> EpsDist:
        """Stationary increment law of the realized units (mixture over units)."""
        mix = None
        for k in range(self.spec.n_units):
            cfg = UnitConfig.from_arrays(self.p_pa[k], self.p_ap[k], self.config.frac_bits)
            healthy = (self.p_pa[k] + self.p_ap[k]) > 0
            # a stuck bit never flips, so its marginal drops out of the law
            marg = np.full((cfg.n_bits, 2), 0.5)
            if healthy.any():
                marg[healthy] = bit_marginals(
                    UnitConfig.from_arrays(cfg.p_pa[healthy], cfg.p_ap[healthy])
                )
            law = _eps_product(cfg, marg)
            mix = law if mix is None else mix + law
        return EpsDist(self.config.step, mix / self.spec.n_units)


def open_stream(config, spec: StreamSpec | None = None, device: DeviceParams | None = None,
                pulses=None, dt: float = DT_DEFAULT, defects=None) -> NoiseStream:
    """Build a stream from a :class:`UnitConfig` or a :class:`CalibResult`.

    ``defects`` optionally fixes which bits are stuck, as a boolean array of
    shape ``(n_units, n_bits)``; by default they are drawn from the seed.
    """
    spec = spec or StreamSpec()
    if isinstance(config, CalibResult):
        if pulses is None:
            pulses = config.pulses
        config = config.config
    if not isinstance(config, UnitConfig):
        raise StreamConfigError("config must be a UnitConfig or CalibResult")
    if spec.backend == "physical":
        if device is None or pulses is None:
            raise StreamConfigError("physical backend needs DeviceParams and one PulseSpec per bit")
        if len(pulses) != config.n_bits:
            raise StreamConfigError(f"expected {config.n_bits} pulses, got {len(pulses)}")
        if not all(isinstance(p, PulseSpec) for p in pulses):
            raise StreamConfigError("pulses must be PulseSpec instances")
    if defects is not None and np.shape(defects) != (spec.n_units, config.n_bits):
        raise StreamConfigError(f"defects must have shape ({spec.n_units}, {config.n_bits})")
    return NoiseStream(config, spec, device, pulses, dt, defects)


_MAGIC = b"MERAMNB\x00"
_VERSION = 1
_HEADER = struct.Struct("<8sIQ32sI")


@dataclass
class NoiseBank:
    """A fixed set of noise numbers reused across training and generation."""

    values: np.ndarray
    provenance: dict = field(default_factory=dict)
    digest: str = ""

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype="<f8").ravel()
        if not np.all(np.isfinite(self.values)):
            raise ValueError("noise bank values must be finite")

    @property
    def count(self) -> int:
        return int(self.values.size)

    @classmethod
    def from_stream(cls, stream: NoiseStream, count: int = 40_000) -> "NoiseBank":
        return cls(stream.draw(count), {"stream": stream.spec.to_dict()}, stream.digest)


def save_bank(path, bank: NoiseBank):
    """Write ``magic | version | count | digest | json length | json | float64 values``."""
    meta = json.dumps(bank.provenance, sort_keys=True).encode()
    digest = bytes.fromhex(bank.digest) if bank.digest else bytes(32)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, bank.count, digest, len(meta)))
        fh.write(meta)
        fh.write(bank.values.astype("<f8").tobytes())


def load_bank(path, expected_digest: str | None = None) -> NoiseBank:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise BankFormatError(f"{path}: truncated header")
    magic, version, count, digest, meta_len = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise BankFormatError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise BankFormatError(f"{path}: unsupported version {version}")
    start = _HEADER.size + meta_len
    if len(blob) != start + 8 * count:
        raise BankFormatError(f"{path}: size does not match header count {count}")
    try:
        provenance = json.loads(blob[_HEADER.size:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise BankFormatError(f"{path}: corrupt metadata") from e
    hexdigest = digest.hex() if digest != bytes(32) else ""
    if expected_digest is not None and hexdigest != expected_digest:
        raise BankDigestError(f"{path}: config digest {hexdigest[:12]} does not match expected {expected_digest[:12]}")
    values = np.frombuffer(blob, dtype="<f8", count=count, offset=start).copy()
    return NoiseBank(values, provenance, hexdigest)


def write_bank_csv(path, bank: NoiseBank):
    with open(path, "w") as fh:
        for v in bank.values:
            fh.write(f"{float(v)!r}\n")


class BankNoise:
    """Consume a bank in order; once exhausted, resample it with replacement.

    With ``replacement=True`` every draw is resampled from the start.
    """

    name = "meram"

    def __init__(self, bank: NoiseBank, seed: int = 0, replacement: bool = False):
        self.bank = bank
        self.replacement = replacement
        self._rng = np.random.default_rng(seed)
        self._cursor = 0

    def draw(self, n: int) -> np.ndarray:
        out = np.empty(n)
        filled = 0
        if not self.replacement and self._cursor < self.bank.count:
            take = min(n, self.bank.count - self._cursor)
            out[:take] = self.bank.values[self._cursor:self._cursor + take]
            self._cursor += take
            filled = take
        if filled < n:
            out[filled:] = self.bank.values[self._rng.integers(0, self.bank.count, n - filled)]
        return out

    def normal(self, shape) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape))
        return self.draw(math.prod(shape)).reshape(shape)


class StreamNoise:
    """Adapter exposing a :class:`NoiseStream` as a diffusion noise source."""

    name = "meram"

    def __init__(self, stream: NoiseStream):
        self.stream = stream

    def normal(self, shape) -> np.ndarray:
        return self.stream.fill(shape)


class IdealNoise:
    """Standard normal noise from a seeded numpy generator."""

    name = "ideal"

    def __init__(self, seed: int = 0):
        self._rng = np.random.default_rng(seed)

    def normal(self, shape) -> np.ndarray:
        return self._rng.standard_normal(tuple(np.atleast_1d(shape)))
