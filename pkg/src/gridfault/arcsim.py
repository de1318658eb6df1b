"""
Arc-fault waveform synthesis.

A per-phase Thevenin source (series R-L) feeds a resistive load; on the
faulted phase (always phase A) a Kizilcay arc branch connects the load node
to ground. The arc conductance follows

    dg/dt = (|i_f| / (u_o + r_o |i_f|) - g) / tau

and is integrated with classical RK4, while the series R-L branch uses a
trapezoidal step. The internal step is 1/(32 fs); the trajectory is then
point-sampled at fs.

Two domains are produced: ``source`` (nominal circuit, 4000 Hz, fixed SNR)
and ``shifted`` (perturbed impedances, frequency jitter, calibration gain
error, lower SNR, 4096 Hz) which stands in for field recordings.
"""
import dataclasses
import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

GENERATOR_VERSION = "1.0.0"

CATEGORIES = ("SIF", "MIF", "PF", "TD")
CHANNELS = ("I_A", "I_B", "I_C", "U_A", "U_B", "U_C")
DOMAINS = ("source", "shifted")

G_FLOOR = 1e-8          # S, extinguished-arc conductance
G_IGNITION = 1.0        # S, conductance at fault inception
NEUTRAL_COUPLING = 0.05
OVERSAMPLE = 32
RECORD_CYCLES = 16

TAU_RANGE = (0.2e-3, 0.4e-3)
U_O_RANGE = (300.0, 4000.0)
R_O_RANGE = (0.01, 0.015)


class ArcSimError(Exception):
    """Base class for simulator failures."""


class IntegrationError(ArcSimError):
    pass


class StabilityError(ArcSimError):
    pass


class InvalidSpecError(ArcSimError, ValueError):
    pass


@dataclass(frozen=True)
class ArcParams:
    """Kizilcay arc parameters: time constant (s), characteristic voltage (V)
    and characteristic resistance (ohm)."""

    tau: float
    u_o: float
    r_o: float
    allow_out_of_range: bool = field(default=False, compare=False)

    def __post_init__(self):
        for name in ("tau", "u_o", "r_o"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise InvalidSpecError(f"{name} must be finite and > 0, got {v!r}")
        if self.allow_out_of_range:
            return
        for name, (lo, hi) in (("tau", TAU_RANGE), ("u_o", U_O_RANGE), ("r_o", R_O_RANGE)):
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise InvalidSpecError(f"{name}={v!r} outside [{lo}, {hi}]")

    def steady_conductance(self, current: float) -> float:
        a = abs(current)
        return a / (self.u_o + self.r_o * a)


@dataclass(frozen=True)
class ArcState:
    g: float
    t: float = 0.0

    def __post_init__(self):
        if not self.g >= G_FLOOR:
            raise InvalidSpecError(f"arc conductance {self.g!r} below floor {G_FLOOR}")


@dataclass(frozen=True)
class CircuitParams:
    source_peak_voltage: float = 10e3 * math.sqrt(2.0 / 3.0)
    system_frequency: float = 50.0
    source_resistance: float = 0.5
    source_inductance: float = 5e-3
    line_resistance: float = 1.0
    line_inductance: float = 3e-3
    load_resistance: float = 80.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v > 0):
                raise InvalidSpecError(f"circuit {f.name} must be finite and > 0, got {v!r}")

    @property
    def series_resistance(self) -> float:
        return self.source_resistance + self.line_resistance

    @property
    def series_inductance(self) -> float:
        return self.source_inductance + self.line_inductance

    def series_impedance(self) -> complex:
        w = 2 * math.pi * self.system_frequency
        return complex(self.series_resistance, w * self.series_inductance)

    def nominal_current_peak(self) -> float:
        return self.source_peak_voltage / abs(self.series_impedance() + self.load_resistance)

    def scaled(self, source_factor: float, line_factor: float, frequency: float) -> "CircuitParams":
        return dataclasses.replace(
            self,
            source_resistance=self.source_resistance * source_factor,
            source_inductance=self.source_inductance * source_factor,
            line_resistance=self.line_resistance * line_factor,
            line_inductance=self.line_inductance * line_factor,
            system_frequency=frequency,
        )


@dataclass(frozen=True)
class EventSpec:
    category: str
    fault_start_angle: float = 0.0
    fault_duration_cycles: float = 1.0
    arc: Optional[ArcParams] = None
    noise_snr_db: float = math.inf
    domain_tag: str = "source"

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise InvalidSpecError(f"unknown category {self.category!r}")
        if self.domain_tag not in DOMAINS:
            raise InvalidSpecError(f"unknown domain {self.domain_tag!r}")
        if not 0.0 <= self.fault_start_angle < 360.0:
            raise InvalidSpecError("fault_start_angle must lie in [0, 360)")
        if math.isnan(self.noise_snr_db):
            raise InvalidSpecError("noise_snr_db is NaN")
        if self.category == "TD":
            if self.arc is not None:
                raise InvalidSpecError("TD events have no arc branch")
            return
        if self.arc is None:
            raise InvalidSpecError(f"{self.category} requires ArcParams")
        d = self.fault_duration_cycles
        if self.category == "SIF" and not 0.0 < d <= 1.0:
            raise InvalidSpecError("SIF duration must lie in (0, 1] cycles")
        if self.category == "MIF" and not 1.0 < d <= 4.0:
            raise InvalidSpecError("MIF duration must lie in (1, 4] cycles")
        if self.category == "PF" and not d > 0:
            raise InvalidSpecError("duration must be > 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if self.arc is not None:
            d["arc"] = {"tau": self.arc.tau, "u_o": self.arc.u_o, "r_o": self.arc.r_o}
        return d


@dataclass(frozen=True)
class WaveformRecord:
    id: str
    fs: float
    channels: np.ndarray
    label: Optional[str] = None
    domain_tag: str = "source"
    system_frequency: float = 50.0
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        ch = np.array(self.channels, dtype=float)
        if ch.ndim != 2 or ch.shape[0] != len(CHANNELS):
            raise InvalidSpecError(f"expected six channels, got shape {ch.shape}")
        expected = record_length(self.fs, self.system_frequency)
        if ch.shape[1] != expected:
            raise InvalidSpecError(f"expected {expected} samples, got {ch.shape[1]}")
        if not np.all(np.isfinite(ch)):
            raise InvalidSpecError("non-finite samples")
        if self.label is not None and self.label not in CATEGORIES:
            raise InvalidSpecError(f"unknown label {self.label!r}")
        ch.setflags(write=False)
        object.__setattr__(self, "channels", ch)

    @property
    def n_samples(self) -> int:
        return self.channels.shape[1]

    def channel(self, name: str) -> np.ndarray:
        return self.channels[CHANNELS.index(name)]


def record_length(fs: float, system_frequency: float) -> int:
    return int(math.floor(RECORD_CYCLES * fs / system_frequency + 1e-9))


# ---------------------------------------------------------------------------
# Arc ODE


def _arc_rhs(g, i_f, tau, u_o, r_o):
    a = np.abs(i_f)
    return (a / (u_o + r_o * a) - g) / tau


def arc_step(state: ArcState, i_f: Union[float, Callable[[float], float]],
             p: ArcParams, dt: float) -> ArcState:
    """Advance the arc conductance by one RK4 step.

    ``i_f`` is either the fault current held constant over the step or a
    callable giving the current at time t (evaluated at the RK4 stage times).
    """
    if not dt > 0:
        raise StabilityError(f"dt must be > 0, got {dt!r}")
    if dt > p.tau / 10 * (1 + 1e-12):
        raise StabilityError(f"dt={dt:g} exceeds tau/10={p.tau / 10:g}")
    if callable(i_f):
        t = state.t
        currents = (i_f(t), i_f(t + dt / 2), i_f(t + dt / 2), i_f(t + dt))
    else:
        currents = (i_f,) * 4
    if not all(math.isfinite(c) for c in currents):
        raise IntegrationError(f"non-finite fault current at t={state.t:g}")
    g = state.g
    tau, u_o, r_o = p.tau, p.u_o, p.r_o
    k1 = _arc_rhs(g, currents[0], tau, u_o, r_o)
    k2 = _arc_rhs(g + dt / 2 * k1, currents[1], tau, u_o, r_o)
    k3 = _arc_rhs(g + dt / 2 * k2, currents[2], tau, u_o, r_o)
    k4 = _arc_rhs(g + dt * k3, currents[3], tau, u_o, r_o)
    g_new = g + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return ArcState(g=max(float(g_new), G_FLOOR), t=state.t + dt)


def integrate_arc(g0: float, current: Callable[[float], float], p: ArcParams,
                  dt: float, t_end: float) -> Tuple[np.ndarray, np.ndarray]:
    """Integrate the arc ODE under a prescribed current; returns (t, g)."""
    n = int(round(t_end / dt))
    state = ArcState(g=g0)
    ts = np.empty(n + 1)
    gs = np.empty(n + 1)
    ts[0], gs[0] = 0.0, g0
    for k in range(n):
        state = arc_step(state, current, p, dt)
        ts[k + 1], gs[k + 1] = state.t, state.g
    return ts, gs


# ---------------------------------------------------------------------------
# Circuit simulation


@dataclass
class _ArcBatch:
    """Per-event arrays for the vectorised faulted-phase integration."""

    vpk: np.ndarray
    omega: np.ndarray
    r_series: np.ndarray
    l_series: np.ndarray
    g_load: np.ndarray
    tau: np.ndarray
    u_o: np.ndarray
    r_o: np.ndarray
    t_start: np.ndarray
    t_open: np.ndarray      # inf for PF


def _steady_state_current(vpk, omega, r, l, r_load, phase):
    z = complex(r + r_load, omega * l)
    mag = vpk / abs(z)
    ang = phase - math.atan2(z.imag, z.real)
    return mag, ang


def _integrate_faulted_phase(batch: _ArcBatch, dt: float, n_steps: int, decimate: int):
    """Integrate the faulted phase for a batch of events sharing dt and length.

    Returns sampled series current, node voltage and arc current, each of shape
    (n_events, n_steps // decimate), plus a flag for whether the arc was ever
    instantiated.
    """
    n_ev = batch.vpk.shape[0]
    n_out = n_steps // decimate
    i_out = np.empty((n_ev, n_out))
    v_out = np.empty((n_ev, n_out))
    f_out = np.empty((n_ev, n_out))

    # source voltage by exact rotation (elementwise arithmetic only, so results
    # do not depend on how events are batched)
    cos_d = np.array([math.cos(w * dt) for w in batch.omega])
    sin_d = np.array([math.sin(w * dt) for w in batch.omega])
    s = np.zeros(n_ev)
    c = np.ones(n_ev)

    r_load = 1.0 / batch.g_load
    i0 = np.empty(n_ev)
    for k in range(n_ev):
        mag, ang = _steady_state_current(batch.vpk[k], batch.omega[k], batch.r_series[k],
                                         batch.l_series[k], r_load[k], 0.0)
        i0[k] = mag * math.sin(ang)
    i = i0
    g = np.full(n_ev, G_IGNITION)
    active = np.zeros(n_ev, dtype=bool)
    done = np.zeros(n_ev, dtype=bool)
    prev_if = np.zeros(n_ev)
    l_dt = batch.l_series / dt
    half_dt = dt / 2
    e = batch.vpk * s
    for n in range(n_steps):
        t = n * dt
        rp = 1.0 / (batch.g_load + np.where(active, g, 0.0))
        if n % decimate == 0:
            j = n // decimate
            i_out[:, j] = i
            v_out[:, j] = i * rp
            f_out[:, j] = np.where(active, g * i * rp, 0.0)
        s, c = s * cos_d + c * sin_d, c * cos_d - s * sin_d
        e_next = batch.vpk * s
        rr = 0.5 * (batch.r_series + rp)
        i_next = ((l_dt - rr) * i + 0.5 * (e + e_next)) / (l_dt + rr)
        if active.any():
            i_f = g * rp * 0.5 * (i + i_next)
            a = np.abs(i_f)
            target = a / (batch.u_o + batch.r_o * a)
            k1 = (target - g) / batch.tau
            k2 = (target - (g + half_dt * k1)) / batch.tau
            k3 = (target - (g + half_dt * k2)) / batch.tau
            k4 = (target - (g + dt * k3)) / batch.tau
            g_new = np.maximum(g + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4), G_FLOOR)
            g = np.where(active, g_new, g)
            t_next = t + dt
            closing = active & (t_next >= batch.t_open) & (prev_if * i_f <= 0) & (prev_if != 0)
            prev_if = np.where(active, i_f, prev_if)
            active = active & ~closing
            done |= closing
        if not np.all(np.isfinite(i_next)):
            raise IntegrationError(f"circuit solve diverged at t={t:g}")
        i = i_next
        e = e_next
        starting = ~active & ~done & (t + dt >= batch.t_start)
        if starting.any():
            active = active | starting
            g = np.where(starting, G_IGNITION, g)
    return i_out, v_out, f_out


def _fault_inception_time(spec: EventSpec, circuit: CircuitParams, pre_fault_cycles: float) -> float:
    return (pre_fault_cycles + spec.fault_start_angle / 360.0) / circuit.system_frequency


def _healthy_phase(circuit: CircuitParams, phase: float, t: np.ndarray):
    w = 2 * math.pi * circuit.system_frequency
    mag, ang = _steady_state_current(circuit.source_peak_voltage, w, circuit.series_resistance,
                                     circuit.series_inductance, circuit.load_resistance, phase)
    i = mag * np.sin(w * t + ang)
    return i, circuit.load_resistance * i


def _add_noise(channels: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal(channels.shape)
    if math.isinf(snr_db):
        return channels
    rms = np.sqrt(np.mean(channels ** 2, axis=1, keepdims=True))
    return channels + noise * rms / 10 ** (snr_db / 20.0)


def _td_burst(rng: np.random.Generator, t: np.ndarray, t0: float, vpk: float):
    freq = rng.uniform(300.0, 900.0)
    decay = rng.uniform(3e-3, 10e-3)
    amps = rng.uniform(0.1, 0.5, size=3) * vpk * rng.choice([-1.0, 1.0], size=3)
    phase = rng.uniform(0.0, 2 * math.pi)
    dt = t - t0
    env = np.where(dt >= 0, np.exp(-np.clip(dt, 0, None) / decay), 0.0)
    wave = env * np.cos(2 * math.pi * freq * dt + phase)
    params = {"burst_frequency": freq, "burst_decay": decay, "burst_amplitudes": amps.tolist(),
              "burst_phase": phase}
    return amps[:, None] * wave[None, :], params


def simulate_events(specs: Sequence[EventSpec], circuits: Sequence[CircuitParams],
                    seeds: Sequence[int], fs: float, ids: Optional[Sequence[str]] = None,
                    pre_fault_cycles: float = 4.0,
                    gains: Optional[Sequence[Sequence[float]]] = None) -> List[WaveformRecord]:
    """Simulate several events at a common sampling rate.

    Arc events are integrated together in one vectorised pass; per-event
    results are identical to simulating each event on its own.
    """
    if not (len(specs) == len(circuits) == len(seeds)):
        raise InvalidSpecError("specs, circuits and seeds must have equal length")
    if ids is None:
        ids = [f"{s.domain_tag}-{s.category}-{k:04d}" for k, s in enumerate(specs)]
    records: List[Optional[WaveformRecord]] = [None] * len(specs)

    # faulted-phase integration, grouped by record length
    arc_idx = [k for k, s in enumerate(specs) if s.arc is not None]
    groups: Dict[int, List[int]] = {}
    for k in arc_idx:
        groups.setdefault(record_length(fs, circuits[k].system_frequency), []).append(k)
    faulted: Dict[int, Tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    dt = 1.0 / (OVERSAMPLE * fs)
    for n_out, members in sorted(groups.items()):
        for k in members:
            if dt > specs[k].arc.tau / 10:
                raise StabilityError("internal step exceeds tau/10")
        batch = _ArcBatch(
            vpk=np.array([circuits[k].source_peak_voltage for k in members]),
            omega=np.array([2 * math.pi * circuits[k].system_frequency for k in members]),
            r_series=np.array([circuits[k].series_resistance for k in members]),
            l_series=np.array([circuits[k].series_inductance for k in members]),
            g_load=np.array([1.0 / circuits[k].load_resistance for k in members]),
            tau=np.array([specs[k].arc.tau for k in members]),
            u_o=np.array([specs[k].arc.u_o for k in members]),
            r_o=np.array([specs[k].arc.r_o for k in members]),
            t_start=np.array([_fault_inception_time(specs[k], circuits[k], pre_fault_cycles)
                              for k in members]),
            t_open=np.array([math.inf if specs[k].category == "PF" else
                             _fault_inception_time(specs[k], circuits[k], pre_fault_cycles)
                             + specs[k].fault_duration_cycles / circuits[k].system_frequency
                             for k in members]),
        )
        i_s, v_s, f_s = _integrate_faulted_phase(batch, dt, n_out * OVERSAMPLE, OVERSAMPLE)
        for row, k in enumerate(members):
            faulted[k] = (i_s[row], v_s[row], f_s[row])

    for k, (spec, circuit, seed) in enumerate(zip(specs, circuits, seeds)):
        rng = np.random.default_rng(seed)
        n = record_length(fs, circuit.system_frequency)
        t = np.arange(n) / fs
        clean = np.empty((6, n))
        for ph, shift in enumerate((0.0, -2 * math.pi / 3, 2 * math.pi / 3)):
            clean[ph], clean[3 + ph] = _healthy_phase(circuit, shift, t)
        meta = {"seed": int(seed), "spec": spec.to_dict(), "circuit": dataclasses.asdict(circuit),
                "faulted_phase": "A", "arc_instantiated": spec.arc is not None}
        if spec.arc is not None:
            i_a, v_a, i_f = faulted[k]
            clean[0], clean[3] = i_a, v_a
            shift_v = NEUTRAL_COUPLING * abs(circuit.series_impedance()) * i_f
            clean[4] += shift_v
            clean[5] += shift_v
        else:
            t0 = _fault_inception_time(spec, circuit, pre_fault_cycles)
            burst, params = _td_burst(rng, t, t0, circuit.source_peak_voltage)
            clean[3:] += burst
            clean[:3] += burst / circuit.load_resistance
            meta.update(params)
        channels = _add_noise(clean, spec.noise_snr_db, rng)
        if gains is not None:
            gk = np.asarray(gains[k], dtype=float)
            channels = channels * gk[:, None]
            meta["calibration_gains"] = gk.tolist()
        records[k] = WaveformRecord(id=ids[k], fs=fs, channels=channels, label=spec.category,
                                    domain_tag=spec.domain_tag,
                                    system_frequency=circuit.system_frequency, meta=meta)
    return records


def simulate_event(spec: EventSpec, circuit: CircuitParams, seed: int, fs: float = 4000.0,
                   record_id: Optional[str] = None, pre_fault_cycles: float = 4.0) -> WaveformRecord:
    """Simulate one sixteen-cycle, six-channel event record."""
    ids = None if record_id is None else [record_id]
    return simulate_events([spec], [circuit], [seed], fs, ids=ids,
                           pre_fault_cycles=pre_fault_cycles)[0]


# ---------------------------------------------------------------------------
# Dataset generation


@dataclass(frozen=True)
class GenerationConfig:
    source_counts: Tuple[int, int, int, int] = (80, 80, 80, 80)
    shifted_counts: Tuple[int, int, int, int] = (71, 64, 93, 88)
    domains: Tuple[str, ...] = DOMAINS
    source_fs: float = 4000.0
    shifted_fs: float = 4096.0
    source_snr_db: float = 45.0
    shifted_snr_db: Tuple[float, float] = (25.0, 40.0)
    impedance_jitter: float = 0.30
    frequency_range: Tuple[float, float] = (49.8, 50.2)
    gain_jitter: float = 0.05
    pre_fault_cycles: float = 4.0
    circuit: CircuitParams = field(default_factory=CircuitParams)

    def __post_init__(self):
        for name in ("source_counts", "shifted_counts"):
            counts = tuple(int(c) for c in getattr(self, name))
            if len(counts) != 4 or any(c < 0 for c in counts):
                raise InvalidSpecError(f"{name} must be four non-negative counts")
            object.__setattr__(self, name, counts)
        for d in self.domains:
            if d not in DOMAINS:
                raise InvalidSpecError(f"unknown domain {d!r}")

    def counts(self, domain: str) -> Tuple[int, int, int, int]:
        return self.source_counts if domain == "source" else self.shifted_counts

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return json.loads(json.dumps(d))


@dataclass
class DatasetManifest:
    records: List[WaveformRecord]
    seed: int
    config: dict
    generator_version: str = GENERATOR_VERSION

    def counts(self) -> Dict[str, Dict[str, int]]:
        out = {d: {c: 0 for c in CATEGORIES} for d in DOMAINS}
        for r in self.records:
            out[r.domain_tag][r.label] += 1
        return out

    def by_domain(self, domain: str) -> List[WaveformRecord]:
        return [r for r in self.records if r.domain_tag == domain]


def _child_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *keys]).generate_state(1, dtype=np.uint32)[0])


def _draw_event(rng: np.random.Generator, category: str, snr_db: float, domain: str) -> EventSpec:
    angle = float(rng.uniform(0.0, 360.0))
    if category == "TD":
        return EventSpec(category, angle, 1.0, None, snr_db, domain)
    arc = ArcParams(tau=float(rng.uniform(*TAU_RANGE)), u_o=float(rng.uniform(*U_O_RANGE)),
                    r_o=float(rng.uniform(*R_O_RANGE)))
    u = float(rng.random())
    if category == "SIF":
        duration = 1.0 - 0.9 * u          # (0.1, 1]
    elif category == "MIF":
        duration = 4.0 - 3.0 * u          # (1, 4]
    else:
        duration = 16.0
    return EventSpec(category, angle, duration, arc, snr_db, domain)


def generate_dataset(config: GenerationConfig = GenerationConfig(), seed: int = 0) -> DatasetManifest:
    """Draw and simulate every event of the configured domains.

    Output is a pure function of ``(config, seed)``.
    """
    records: List[WaveformRecord] = []
    for d_idx, domain in enumerate(DOMAINS):
        if domain not in config.domains:
            continue
        specs, circuits, seeds, ids, gains = [], [], [], [], []
        for c_idx, (category, count) in enumerate(zip(CATEGORIES, config.counts(domain))):
            for k in range(count):
                ev_seed = _child_seed(seed, d_idx, c_idx, k)
                rng = np.random.default_rng(_child_seed(ev_seed, 1))
                if domain == "source":
                    snr = config.source_snr_db
                    circuit = config.circuit
                    gain = None
                else:
                    snr = float(rng.uniform(*config.shifted_snr_db))
                    j = config.impedance_jitter
                    circuit = config.circuit.scaled(float(rng.uniform(1 - j, 1 + j)),
                                                    float(rng.uniform(1 - j, 1 + j)),
                                                    float(rng.uniform(*config.frequency_range)))
                    gain = rng.uniform(1 - config.gain_jitter, 1 + config.gain_jitter, size=6)
                specs.append(_draw_event(rng, category, snr, domain))
                circuits.append(circuit)
                seeds.append(ev_seed)
                ids.append(f"{domain}-{category}-{k:04d}")
                gains.append(gain if gain is not None else np.ones(6))
        if not specs:
            continue
        fs = config.source_fs if domain == "source" else config.shifted_fs
        recs = simulate_events(specs, circuits, seeds, fs, ids=ids,
                               pre_fault_cycles=config.pre_fault_cycles,
                               gains=None if domain == "source" else gains)
        records.extend(recs)
    return DatasetManifest(records=records, seed=int(seed), config=config.to_dict())


# ---------------------------------------------------------------------------
# Storage


MANIFEST_NAME = "manifest.json"
RECORD_DIR = "records"


def _atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def record_to_text(record: WaveformRecord) -> str:
    lines = [
        f"# id: {record.id}",
        f"# fs: {record.fs!r}",
        f"# n_samples: {record.n_samples}",
        f"# label: {record.label or ''}",
        f"# domain: {record.domain_tag}",
        f"# system_frequency: {record.system_frequency!r}",
        f"# meta: {json.dumps(record.meta, sort_keys=True)}",
        ",".join(CHANNELS),
    ]
    body = "\n".join(",".join("%.10g" % v for v in row) for row in record.channels.T)
    return "\n".join(lines) + "\n" + body + "\n"


def record_from_text(text: str) -> WaveformRecord:
    header = {}
    lines = text.splitlines()
    k = 0
    while lines[k].startswith("#"):
        key, _, value = lines[k][1:].strip().partition(":")
        header[key.strip()] = value.strip()
        k += 1
    cols = lines[k].split(",")
    if tuple(cols) != CHANNELS:
        raise InvalidSpecError(f"unexpected channel columns {cols}")
    data = np.array([[float(x) for x in ln.split(",")] for ln in lines[k + 1:] if ln],
                    dtype=float).reshape(-1, 6)
    if data.shape[0] != int(header["n_samples"]):
        raise InvalidSpecError("n_samples does not match data rows")
    return WaveformRecord(id=header["id"], fs=float(header["fs"]), channels=data.T,
                          label=header["label"] or None, domain_tag=header["domain"],
                          system_frequency=float(header.get("system_frequency", 50.0)),
                          meta=json.loads(header.get("meta", "{}")))


def manifest_to_dict(manifest: DatasetManifest) -> dict:
    return {
        "generator_version": manifest.generator_version,
        "seed": manifest.seed,
        "config": manifest.config,
        "counts": manifest.counts(),
        "records": [
            {"id": r.id, "file": f"{RECORD_DIR}/{r.id}.txt", "fs": r.fs, "n_samples": r.n_samples,
             "label": r.label, "domain": r.domain_tag, "channels": list(CHANNELS)}
            for r in manifest.records
        ],
    }


def write_dataset(manifest: DatasetManifest, out_dir: str) -> str:
    """Write records and the manifest index; returns the manifest path."""
    os.makedirs(os.path.join(out_dir, RECORD_DIR), exist_ok=True)
    for r in manifest.records:
        _atomic_write(os.path.join(out_dir, RECORD_DIR, f"{r.id}.txt"), record_to_text(r))
    path = os.path.join(out_dir, MANIFEST_NAME)
    _atomic_write(path, json.dumps(manifest_to_dict(manifest), indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(data_dir: str) -> dict:
    with open(os.path.join(data_dir, MANIFEST_NAME)) as fh:
        return json.load(fh)


def iter_records(data_dir: str, domain: Optional[str] = None) -> Iterable[WaveformRecord]:
    index = read_manifest(data_dir)
    for entry in index["records"]:
        if domain is not None and entry["domain"] != domain:
            continue
        with open(os.path.join(data_dir, entry["file"])) as fh:
            yield record_from_text(fh.read())


def dataset_hash(data_dir: str) -> str:
    """SHA-256 over the manifest and every record file, in manifest order."""
    h = hashlib.sha256()
    with open(os.path.join(data_dir, MANIFEST_NAME), "rb") as fh:
        h.update(fh.read())
    for entry in read_manifest(data_dir)["records"]:
        with open(os.path.join(data_dir, entry["file"]), "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()
