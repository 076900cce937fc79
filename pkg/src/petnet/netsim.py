"""Schedules, delays, the hybrid executor, traces, and parameter sweeps.

Sampling schedules are pregenerated for the whole horizon so that the
delay budget of a transmission, which references future inter-sample
gaps, is computable the moment the packet leaves.  One run is a strict
event loop: integrate the flow to the next event, then process that
event; all randomness comes from named, seeded streams, so identical
scenarios replay bit-identically.
"""

from __future__ import annotations

import math
import time as _time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, HorizonError, NumericalError, ProtocolViolation
from .hybrid import HybridState, NetworkedLoop
from .trigger import TriggerPolicy

#: minimal spacing enforced between consecutive arrivals on one channel
ORDER_EPS = 1e-9

KIND_FLOW, KIND_SAMPLE, KIND_TRANSMIT, KIND_ARRIVAL = 0, 1, 2, 3
PHASE_FLOW, PHASE_PRE, PHASE_POST = 0, 1, 2
KIND_NAMES = {KIND_FLOW: "flow", KIND_SAMPLE: "sample", KIND_TRANSMIT: "transmit", KIND_ARRIVAL: "arrival"}


# ---------------------------------------------------------------------------
# schedules and delays
# ---------------------------------------------------------------------------


@dataclass
class SamplingSchedule:
    """Cumulative sampling instants of one channel, first instant at zero."""

    times: np.ndarray
    gaps: np.ndarray
    t_min: float
    t_max: float

    @staticmethod
    def generate(
        t_min: float, t_max: float, horizon: float, madns: int, rng: np.random.Generator
    ) -> "SamplingSchedule":
        """Draw i.i.d. uniform inter-sample gaps covering the horizon plus
        enough margin to bound any delay of a transmission inside it."""
        if not 0 < t_min <= t_max:
            raise ConfigError("need 0 < t_min <= t_max")
        margin = (madns + 2) * t_max
        gaps = []
        total = 0.0
        while total <= horizon + margin:
            gap = float(rng.uniform(t_min, t_max))
            gaps.append(gap)
            total += gap
        gaps = np.asarray(gaps)
        times = np.concatenate([[0.0], np.cumsum(gaps)])
        return SamplingSchedule(times=times, gaps=gaps, t_min=t_min, t_max=t_max)

    def delay_bound(self, j: int, madns: int) -> float:
        """Largest admissible delay of a transmission at sampling index j."""
        if j + madns + 1 > len(self.gaps):
            raise HorizonError("schedule exhausted while bounding a delay")
        return float(self.gaps[j : j + madns + 1].sum())


def draw_delay(
    schedule: SamplingSchedule,
    madns: int,
    j: int,
    u: float,
    prev_arrival: float = -math.inf,
) -> float:
    """Arrival time of a packet sent at sampling index j.

    The raw delay is ``u`` times the admissible window; the result is then
    nudged after the previous arrival to keep deliveries ordered.  The
    nudge can never exceed the admissible window.
    """
    if not 0.0 <= u <= 1.0:
        raise ConfigError("delay fraction must lie in [0, 1]")
    bound = schedule.delay_bound(j, madns)
    t_send = float(schedule.times[j])
    arrival = t_send + u * bound
    if prev_arrival > -math.inf:
        arrival = max(arrival, prev_arrival + ORDER_EPS)
    if arrival > t_send + bound + 1e-9:
        raise ProtocolViolation("ordering nudge pushed an arrival past its delay bound")
    return arrival


# ---------------------------------------------------------------------------
# trace
# ---------------------------------------------------------------------------


class TraceSchema:
    """Column layout of a trace for given channel dimensions."""

    def __init__(self, n_x: int, channel_dims: list[int], capacities: list[int]):
        self.n_x = n_x
        self.channel_dims = list(channel_dims)
        self.capacities = list(capacities)
        cols = ["t", "j", "kind", "phase", "channel"]
        cols += [f"x{k}" for k in range(n_x)]
        for i, (dim, cap) in enumerate(zip(channel_dims, capacities)):
            cols += [f"e{i}_{c}" for c in range(dim)]
            cols += [f"vhat{i}_{c}" for c in range(dim)]
            cols += [f"vtilde{i}_{c}" for c in range(dim)]
            for b in range(cap + 1):
                cols += [f"theta{i}_{b}_{c}" for c in range(dim)]
            cols += [f"tau{i}", f"eta{i}", f"l{i}", f"lhat{i}", f"kbar{i}", f"ktilde{i}", f"trig{i}"]
        cols.append("U")
        self.columns = cols
        self.index = {name: k for k, name in enumerate(cols)}

    @property
    def width(self) -> int:
        return len(self.columns)

    def col(self, name: str) -> int:
        return self.index[name]


@dataclass
class TransmissionRecord:
    channel: int
    k: int                  # transmission counter value when sent
    sample_index: int       # j such that the send time is the j-th sampling instant
    t_send: float
    t_arrive: float
    bound: float            # admissible delay at the send instant


@dataclass
class Trace:
    """Time-ordered record of flow points and jumps, one row per record.

    ``kind`` and ``phase`` use the integer codes of this module; jump
    rows come in pre/post pairs sharing a timestamp, with the hybrid jump
    counter advancing on the post row.
    """

    schema: TraceSchema
    data: np.ndarray
    transmissions: list[TransmissionRecord] = field(default_factory=list)
    violations: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.data.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.data[:, self.schema.col(name)]

    def x(self, row: int) -> np.ndarray:
        base = self.schema.col("x0")
        return self.data[row, base : base + self.schema.n_x]

    def to_csv(self, path):
        header = ",".join(self.schema.columns)
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for row in self.data:
                fh.write(",".join(format(v, ".15g") for v in row) + "\n")

    @staticmethod
    def from_csv(path) -> "Trace":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            body = fh.read()
        if body.strip():
            data = np.loadtxt(body.splitlines(), delimiter=",", ndmin=2)
        else:
            data = np.empty((0, len(header)))
        n_x = sum(1 for c in header if c.startswith("x") and c[1:].isdigit())
        dims, caps = [], []
        i = 0
        while f"e{i}_0" in header:
            dims.append(sum(1 for c in header if c.startswith(f"e{i}_")))
            caps.append(
                max(int(c.split("_")[1]) for c in header if c.startswith(f"theta{i}_"))
            )
            i += 1
        schema = TraceSchema(n_x, dims, caps)
        if schema.columns != header:
            raise ConfigError("trace header does not match the expected column layout")
        return Trace(schema=schema, data=data)

    def events_csv(self, path):
        """Plot-ready per-channel event raster (post rows only)."""
        with open(path, "w") as fh:
            fh.write("t,channel,kind\n")
            for row in self.data:
                kind, phase = int(row[2]), int(row[3])
                if phase == PHASE_POST and kind != KIND_FLOW:
                    fh.write(f"{row[0]:.15g},{int(row[4])},{KIND_NAMES[kind]}\n")


@dataclass
class ChannelMetrics:
    samples: int = 0
    transmissions: int = 0
    arrivals: int = 0
    first_transmit: float = math.nan
    last_transmit: float = math.nan
    aiet: float = math.nan


@dataclass
class Metrics:
    horizon: float
    channel: list[ChannelMetrics]
    x_final: list[float]
    x_norm_final: float
    x_norm_max: float
    x_norm_max_after: float      # peak state norm after the transient window
    transient: float
    jumps: int
    violations: int
    runtime_s: float

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "channels": [
                {
                    "samples": c.samples,
                    "transmissions": c.transmissions,
                    "arrivals": c.arrivals,
                    "first_transmit": c.first_transmit,
                    "last_transmit": c.last_transmit,
                    "aiet": c.aiet,
                }
                for c in self.channel
            ],
            "x_final": self.x_final,
            "x_norm_final": self.x_norm_final,
            "x_norm_max": self.x_norm_max,
            "x_norm_max_after_transient": self.x_norm_max_after,
            "transient": self.transient,
            "jumps": self.jumps,
            "violations": self.violations,
            "runtime_s": self.runtime_s,
        }


# ---------------------------------------------------------------------------
# one run
# ---------------------------------------------------------------------------


@dataclass
class RunOptions:
    substep: float | None = None      # defaults to min(t_min/20, 1e-4)
    flow_stride: int = 10             # record every k-th substep boundary
    record_flow: bool = True
    transient: float = 1.0            # window excluded from the post-transient norm peak


@dataclass
class BuiltScenario:
    """A fully assembled, runnable scenario (see :mod:`petnet.scenarios`)."""

    name: str
    config: dict
    loop: NetworkedLoop
    policy: TriggerPolicy
    x0: np.ndarray
    disturbance: Callable[[float], float]
    disturbance_active: bool
    horizon: float
    schedule_seed: int
    delay_seed: int
    options: RunOptions
    monitor: object | None = None     # duck-typed: evaluate_state(loop, state)
    certifications: list = field(default_factory=list)
    lifted: list = field(default_factory=list)


class _Recorder:
    def __init__(self, built: BuiltScenario):
        loop = built.loop
        self.loop = loop
        self.schema = TraceSchema(
            loop.plant.n_x, [p.dim for p in loop.protocols], list(loop.madns)
        )
        self.rows: list[list[float]] = []
        self.monitor = built.monitor
        self.policy = built.policy

    def record(
        self,
        state: HybridState,
        kind: int,
        phase: int,
        channel: int,
        last_sample: list[float],
        trig_values: dict[int, float] | None = None,
    ):
        loop = self.loop
        t = state.t
        for i, ch in enumerate(state.channels):
            ch.tau_hat = t - last_sample[i]
        v_full = loop.signal(state.x)
        row = [t, float(state.j), float(kind), float(phase), float(channel)]
        row.extend(state.x.tolist())
        for i, ch in enumerate(state.channels):
            v_i = v_full[loop.slices[i]]
            row.extend((ch.v_hat - v_i).tolist())
            row.extend(ch.v_hat.tolist())
            row.extend(ch.v_tilde.tolist())
            row.extend(ch.theta.ravel().tolist())
            trig = math.nan
            if trig_values is not None and i in trig_values:
                trig = trig_values[i]
            row.extend(
                [
                    ch.tau_hat,
                    ch.eta,
                    float(ch.l),
                    float(self.policy.lhat(i)),
                    float(ch.k_bar),
                    float(ch.k_tilde),
                    trig,
                ]
            )
        u_val = math.nan
        if self.monitor is not None:
            u_val = self.monitor.evaluate_state(loop, state)
        row.append(u_val)
        self.rows.append(row)

    def finish(self, built: BuiltScenario) -> Trace:
        data = (
            np.asarray(self.rows, dtype=float)
            if self.rows
            else np.empty((0, self.schema.width))
        )
        return Trace(
            schema=self.schema,
            data=data,
            meta={
                "scenario": built.name,
                "horizon": built.horizon,
                "schedule_seed": built.schedule_seed,
                "delay_seed": built.delay_seed,
            },
        )


def _integrate_segment(built, state, t_target, substep, recorder, last_sample, stride):
    """Advance the flow to ``t_target`` with fixed 4th-order substeps.

    The held signals are constant on the segment, so the actuation is
    precomputed once; the trigger variables follow their exact
    constant-coefficient solution on each substep.
    """
    span = t_target - state.t
    if span <= 0:
        return
    loop, policy, wave = built.loop, built.policy, built.disturbance
    coeffs = [policy.eta_flow_coeffs(state, i) for i in range(loop.n_channels)]
    flow = loop.flow_closure(loop.held_signal(state))
    nsteps = max(1, int(math.ceil(span / substep - 1e-12)))
    h = span / nsteps
    half_h = 0.5 * h
    sixth = h / 6.0
    decays = [math.exp(-a * h) if a > 0 else 1.0 for a, _ in coeffs]
    t0 = state.t
    x = state.x
    for step in range(nsteps):
        tt = t0 + step * h
        w1 = wave(tt)
        w2 = wave(tt + half_h)
        w4 = wave(tt + h)
        k1 = flow(x, w1)
        k2 = flow(x + half_h * k1, w2)
        k3 = flow(x + half_h * k2, w2)
        k4 = flow(x + h * k3, w4)
        x = x + sixth * (k1 + 2.0 * (k2 + k3) + k4)
        for i, (a, c) in enumerate(coeffs):
            ch = state.channels[i]
            if a > 0:
                rest = c / a
                ch.eta = rest + (ch.eta - rest) * decays[i]
            else:
                ch.eta += c * h
        state.t = tt + h
        state.x = x
        if recorder is not None and (step + 1) % stride == 0 and step + 1 < nsteps:
            recorder.record(state, KIND_FLOW, PHASE_FLOW, -1, last_sample)
    state.t = t_target
    if not np.all(np.isfinite(x)):
        bad = int(np.flatnonzero(~np.isfinite(x))[0])
        raise NumericalError(
            f"state component {bad} became non-finite at t={t_target:.6g} s"
        )
    if recorder is not None:
        recorder.record(state, KIND_FLOW, PHASE_FLOW, -1, last_sample)


def run(built: BuiltScenario) -> tuple[Trace, Metrics]:
    """Execute one closed-loop scenario and return its trace and metrics.

    Event processing order at equal timestamps: ascending channel index,
    and within a channel arrivals before the sample.  The first sampling
    instant of every channel transmits by convention.
    """
    started = _time.perf_counter()
    loop = built.loop
    policy = built.policy.attach(loop)
    policy.reset()
    n = loop.n_channels
    opts = built.options
    substep = opts.substep or min(min(loop.t_min) / 20.0, 1e-4)
    stride = max(1, int(opts.flow_stride))
    record_flow = opts.record_flow

    sched_rngs = [
        np.random.default_rng(np.random.SeedSequence((built.schedule_seed, i)))
        for i in range(n)
    ]
    delay_rngs = [
        np.random.default_rng(np.random.SeedSequence((built.delay_seed, i)))
        for i in range(n)
    ]
    schedules = [
        SamplingSchedule.generate(
            loop.t_min[i], loop.t_max[i], built.horizon, loop.madns[i], sched_rngs[i]
        )
        for i in range(n)
    ]

    state = loop.initial_state(built.x0)
    recorder = _Recorder(built)
    transmissions: list[TransmissionRecord] = []
    arrivals: list[list[float]] = [[] for _ in range(n)]
    last_arrival = [-math.inf] * n
    last_sample = [0.0] * n
    next_idx = [0] * n
    channel_metrics = [ChannelMetrics() for _ in range(n)]
    tx_times: list[list[float]] = [[] for _ in range(n)]
    x_norm_max = float(np.linalg.norm(state.x))
    x_norm_max_after = 0.0

    def ground_truth_m_hat(i: int) -> int:
        """Next channel-i event: sample (+1) or arrival (-1); used to
        resolve the set-valued next-event tag at every jump."""
        if not arrivals[i]:
            return 1
        return -1 if arrivals[i][0] <= schedules[i].times[next_idx[i]] else 1

    def next_event_time() -> float:
        t_next = math.inf
        for i in range(n):
            t_next = min(t_next, float(schedules[i].times[next_idx[i]]))
            if arrivals[i]:
                t_next = min(t_next, arrivals[i][0])
        return t_next

    while built.horizon > 0:
        t_next = next_event_time()
        if t_next > built.horizon:
            _integrate_segment(
                built,
                state,
                built.horizon,
                substep,
                recorder if record_flow else None,
                last_sample,
                stride,
            )
            if not record_flow:
                recorder.record(state, KIND_FLOW, PHASE_FLOW, -1, last_sample)
            break
        _integrate_segment(
            built,
            state,
            t_next,
            substep,
            recorder if record_flow else None,
            last_sample,
            stride,
        )
        t = state.t
        norm = float(np.linalg.norm(state.x))
        x_norm_max = max(x_norm_max, norm)
        if t >= opts.transient:
            x_norm_max_after = max(x_norm_max_after, norm)

        for i in range(n):
            while arrivals[i] and arrivals[i][0] <= t:
                recorder.record(state, KIND_ARRIVAL, PHASE_PRE, i, last_sample)
                arrivals[i].pop(0)
                state = loop.jump_arrival(state, i, m_hat_next=ground_truth_m_hat(i))
                channel_metrics[i].arrivals += 1
                state.channels[i].check_invariants()
                recorder.record(state, KIND_ARRIVAL, PHASE_POST, i, last_sample)
        for i in range(n):
            if schedules[i].times[next_idx[i]] > t:
                continue
            j_idx = next_idx[i]
            state.channels[i].tau_hat = t - last_sample[i]
            value = policy.decision_value(state, i)
            transmit = j_idx == 0 or value < 0.0
            kind = KIND_TRANSMIT if transmit else KIND_SAMPLE
            recorder.record(state, kind, PHASE_PRE, i, last_sample, trig_values={i: value})
            next_idx[i] += 1  # the pending event is now the next one
            if transmit:
                v_i = loop.channel_signal(state.x, i)
                e_bar = loop.transmission_error(state, i)
                vbar_new = v_i + loop.protocols[i].residual(state.channels[i].k_bar, e_bar)
                u = float(delay_rngs[i].random())
                f_time = draw_delay(schedules[i], loop.madns[i], j_idx, u, last_arrival[i])
                arrivals[i].append(f_time)
                last_arrival[i] = f_time
                state = loop.jump_transmit(
                    state, i, policy, m_hat_next=ground_truth_m_hat(i)
                )
                policy.after_sample(i, True, vbar_new)
                transmissions.append(
                    TransmissionRecord(
                        channel=i,
                        k=state.channels[i].k_bar - 1,
                        sample_index=j_idx,
                        t_send=t,
                        t_arrive=f_time,
                        bound=schedules[i].delay_bound(j_idx, loop.madns[i]),
                    )
                )
                channel_metrics[i].transmissions += 1
                tx_times[i].append(t)
            else:
                state = loop.jump_sample_only(
                    state, i, policy, m_hat_next=ground_truth_m_hat(i)
                )
                policy.after_sample(i, False, None)
            channel_metrics[i].samples += 1
            last_sample[i] = t
            state.channels[i].check_invariants()
            recorder.record(state, kind, PHASE_POST, i, last_sample, trig_values={i: value})

    trace = recorder.finish(built)
    trace.transmissions = transmissions
    trace.violations = list(policy.violations)
    for i in range(n):
        m = channel_metrics[i]
        if tx_times[i]:
            m.first_transmit = tx_times[i][0]
            m.last_transmit = tx_times[i][-1]
            if m.transmissions >= 2:
                m.aiet = (m.last_transmit - m.first_transmit) / (m.transmissions - 1)
    metrics = Metrics(
        horizon=built.horizon,
        channel=channel_metrics,
        x_final=state.x.tolist(),
        x_norm_final=float(np.linalg.norm(state.x)),
        x_norm_max=x_norm_max,
        x_norm_max_after=x_norm_max_after,
        transient=opts.transient,
        jumps=state.j,
        violations=len(policy.violations),
        runtime_s=_time.perf_counter() - started,
    )
    return trace, metrics


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepCell:
    overrides: dict
    aiet_mean: list[float]
    aiet_std: list[float]
    replicates_ok: int
    errors: list[str] = field(default_factory=list)


@dataclass
class SweepResult:
    cells: list[SweepCell]
    seeds_per_cell: int
    master_seed: int

    def to_csv(self, path):
        n_ch = len(self.cells[0].aiet_mean) if self.cells else 0
        keys = sorted({k for c in self.cells for k in c.overrides})
        with open(path, "w") as fh:
            cols = keys + [f"aiet_mean_{i}" for i in range(n_ch)]
            cols += [f"aiet_std_{i}" for i in range(n_ch)] + ["replicates_ok", "errors"]
            fh.write(",".join(cols) + "\n")
            for c in self.cells:
                vals = [format(c.overrides.get(k, ""), "") for k in keys]
                vals += [format(v, ".15g") for v in c.aiet_mean]
                vals += [format(v, ".15g") for v in c.aiet_std]
                vals += [str(c.replicates_ok), ";".join(c.errors).replace(",", ";")]
                fh.write(",".join(str(v) for v in vals) + "\n")


def _replicate_task(payload: dict) -> dict:
    """Worker entry: build a scenario from config and run one replicate."""
    from . import scenarios  # deferred to keep worker pickling plain

    try:
        built = scenarios.build_from_config(payload["config"])
        _, metrics = run(built)
        return {
            "cell": payload["cell"],
            "aiet": [c.aiet for c in metrics.channel],
            "error": None,
        }
    except Exception as exc:  # noqa: BLE001 - per-run errors must not abort the sweep
        return {"cell": payload["cell"], "aiet": None, "error": f"{type(exc).__name__}: {exc}"}


def sweep(
    base_config: dict,
    grid: list[dict],
    seeds_per_cell: int,
    jobs: int = 1,
    master_seed: int = 0,
    x0_box: list | None = None,
) -> SweepResult:
    """Run a grid of scenario overrides, several seeded replicates each.

    Every replicate gets its own schedule/delay seeds derived from the
    master seed; with ``x0_box`` given, initial states are drawn
    uniformly from it per replicate.  Per-run errors are recorded in the
    owning cell without aborting the sweep.
    """
    if not grid:
        raise ConfigError("sweep grid must be nonempty")
    from . import scenarios

    payloads = []
    for ci, overrides in enumerate(grid):
        for rep in range(seeds_per_cell):
            config = scenarios.merge_config(base_config, overrides)
            sim = config.setdefault("simulation", {})
            sim["seeds"] = {
                "schedule": _derive_seed(master_seed, ci, rep, 0),
                "delay": _derive_seed(master_seed, ci, rep, 1),
            }
            if x0_box is not None:
                rng = np.random.default_rng(
                    np.random.SeedSequence((master_seed, ci, rep, 2))
                )
                lo, hi = x0_box
                sim["x0"] = rng.uniform(lo, hi, size=len(np.atleast_1d(lo))).tolist()
            sim.setdefault("record", {})["flow"] = False
            payloads.append({"cell": ci, "config": config})

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_replicate_task, payloads))
    else:
        results = [_replicate_task(p) for p in payloads]

    cells = []
    for ci, overrides in enumerate(grid):
        mine = [r for r in results if r["cell"] == ci]
        oks = [r["aiet"] for r in mine if r["error"] is None]
        errors = [r["error"] for r in mine if r["error"] is not None]
        if oks:
            arr = np.asarray(oks)
            mean = np.nanmean(arr, axis=0).tolist()
            std = np.nanstd(arr, axis=0).tolist()
        else:
            mean, std = [], []
        cells.append(
            SweepCell(
                overrides=dict(overrides),
                aiet_mean=mean,
                aiet_std=std,
                replicates_ok=len(oks),
                errors=errors,
            )
        )
    return SweepResult(cells=cells, seeds_per_cell=seeds_per_cell, master_seed=master_seed)


def _derive_seed(*entropy) -> int:
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])
