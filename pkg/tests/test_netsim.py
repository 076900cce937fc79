import math

import numpy as np
import pytest

from petnet import netsim
from petnet.errors import ConfigError, ProtocolViolation
from petnet.netsim import SamplingSchedule, Trace, draw_delay, run, sweep
from petnet.scenarios import (
    build_example1,
    build_example2,
    build_from_config,
    example1_config,
    merge_config,
)


def fixed_schedule(gaps, t_min=0.5, t_max=2.0):
    gaps = np.asarray(gaps, dtype=float)
    return SamplingSchedule(
        times=np.concatenate([[0.0], np.cumsum(gaps)]),
        gaps=gaps,
        t_min=t_min,
        t_max=t_max,
    )


# -- schedules and delays -------------------------------------------------


def test_schedule_generation_respects_bounds_and_origin():
    rng = np.random.default_rng(1)
    sched = SamplingSchedule.generate(0.002, 0.005, 1.0, madns=1, rng=rng)
    assert sched.times[0] == 0.0
    assert np.all(sched.gaps >= 0.002) and np.all(sched.gaps <= 0.005)
    assert sched.times[-1] >= 1.0 + 3 * 0.005


def test_delay_with_unit_fraction_hits_next_sample_in_small_delay_case():
    sched = fixed_schedule([1.0, 1.2, 0.8])
    f = draw_delay(sched, madns=0, j=1, u=1.0)
    assert f == sched.times[2]


def test_zero_delay_is_instantaneous_or_nudged():
    sched = fixed_schedule([1.0, 1.2, 0.8])
    assert draw_delay(sched, madns=0, j=1, u=0.0) == sched.times[1]
    nudged = draw_delay(sched, madns=0, j=1, u=0.0, prev_arrival=sched.times[1])
    assert nudged == pytest.approx(sched.times[1] + netsim.ORDER_EPS)


def test_delay_budget_spans_future_gaps():
    sched = fixed_schedule([1.0, 1.0, 1.0, 1.0])
    assert sched.delay_bound(1, madns=1) == pytest.approx(2.0)
    f = draw_delay(sched, madns=1, j=1, u=1.0)
    assert f == pytest.approx(sched.times[1] + 2.0)


def test_ordering_nudge_cannot_leave_the_admissible_window():
    sched = fixed_schedule([1.0, 1.0, 1.0, 1.0])
    with pytest.raises(ProtocolViolation):
        draw_delay(sched, madns=0, j=1, u=1.0, prev_arrival=sched.times[1] + 1.5)


def test_delay_fraction_validated():
    sched = fixed_schedule([1.0, 1.0])
    with pytest.raises(ConfigError):
        draw_delay(sched, madns=0, j=0, u=1.5)


# -- the executor ------------------------------------------------------------


def test_identical_scenarios_replay_bit_identically():
    a = build_example1(horizon=0.6, record_flow=True, flow_stride=5)
    b = build_example1(horizon=0.6, record_flow=True, flow_stride=5)
    trace_a, metrics_a = run(a)
    trace_b, metrics_b = run(b)
    assert np.array_equal(trace_a.data, trace_b.data, equal_nan=True)
    da, db = metrics_a.to_dict(), metrics_b.to_dict()
    da.pop("runtime_s"), db.pop("runtime_s")
    assert da == db


def test_rerunning_the_same_built_scenario_is_deterministic():
    built = build_example1(horizon=0.4, record_flow=False)
    trace_a, _ = run(built)
    trace_b, _ = run(built)
    assert np.array_equal(trace_a.data, trace_b.data, equal_nan=True)


def test_every_delay_respects_its_admissible_window():
    built = build_example1(horizon=2.0, record_flow=False)
    trace, _ = run(built)
    assert trace.transmissions
    for rec in trace.transmissions:
        assert 0.0 <= rec.t_arrive - rec.t_send <= rec.bound + 1e-9


def test_arrivals_strictly_ordered_per_channel():
    built = build_example1(horizon=2.0, record_flow=False)
    trace, _ = run(built)
    for i in range(2):
        arr = [r.t_arrive for r in trace.transmissions if r.channel == i]
        assert np.all(np.diff(arr) > 0)


def test_inflight_count_bounded_at_sampling_instants():
    built = build_example1(horizon=2.0, record_flow=False)
    trace, _ = run(built)
    d, sch = trace.data, trace.schema
    pre = d[d[:, sch.col("phase")] == netsim.PHASE_PRE]
    for i in range(2):
        rows = pre[
            (pre[:, sch.col("channel")] == i)
            & (pre[:, sch.col("kind")] != netsim.KIND_ARRIVAL)
        ]
        assert np.all(rows[:, sch.col(f"l{i}")] <= built.loop.madns[i])
        assert np.all(rows[:, sch.col(f"eta{i}")] >= 0.0)


def test_equilibrium_produces_no_traffic_after_startup():
    built = build_example1(
        horizon=0.5, x0=(0.0, 0.0), disturbance=False, record_flow=False
    )
    trace, metrics = run(built)
    assert [c.transmissions for c in metrics.channel] == [1, 1]  # the two t0 events
    assert metrics.x_norm_final == 0.0
    d, sch = trace.data, trace.schema
    assert np.all(d[:, sch.col("eta0")] == 0.0)


def test_zero_horizon_gives_empty_trace():
    built = build_example1(horizon=0.0)
    trace, metrics = run(built)
    assert len(trace) == 0
    assert metrics.jumps == 0


def test_aiet_matches_definition():
    built = build_example1(horizon=1.5, record_flow=False)
    trace, metrics = run(built)
    for i in range(2):
        tx = [r.t_send for r in trace.transmissions if r.channel == i]
        expected = (tx[-1] - tx[0]) / (len(tx) - 1)
        assert metrics.channel[i].aiet == pytest.approx(expected)


def test_sample_only_jumps_occur_even_near_the_period_bound():
    built = build_example1(horizon=3.0, record_flow=False)
    trace, _ = run(built)
    d, sch = trace.data, trace.schema
    rows = d[
        (d[:, sch.col("phase")] == netsim.PHASE_PRE)
        & (d[:, sch.col("kind")] == netsim.KIND_SAMPLE)
    ]
    periods = np.array(built.loop.t_max)
    taus = np.array(
        [rows[r, sch.col(f"tau{int(rows[r, sch.col('channel')])}")] for r in range(len(rows))]
    )
    channels = rows[:, sch.col("channel")].astype(int)
    assert np.any(taus > 0.9 * periods[channels])


def test_substep_halving_changes_terminal_state_marginally():
    for builder, kw in (
        (build_example1, {"horizon": 1.0}),
        (build_example2, {"horizon": 1.0}),
    ):
        built = builder(record_flow=False, **kw)
        _, m1 = run(built)
        built2 = builder(record_flow=False, **kw)
        built2.options.substep = (built2.options.substep or min(min(built2.loop.t_min) / 20, 1e-4)) / 2
        _, m2 = run(built2)
        ref = np.linalg.norm(m1.x_final)
        assert np.linalg.norm(np.array(m1.x_final) - np.array(m2.x_final)) <= 1e-6 * max(ref, 1e-9)


def test_flow_rows_follow_the_requested_stride():
    built = build_example1(horizon=0.05, record_flow=True, flow_stride=1)
    trace, _ = run(built)
    kinds = trace.column("kind")
    assert np.sum(kinds == netsim.KIND_FLOW) > 100


# -- trace round trip -----------------------------------------------------------


def test_trace_csv_round_trip(tmp_path):
    built = build_example1(horizon=0.3, record_flow=True, flow_stride=20)
    trace, _ = run(built)
    path = tmp_path / "trace.csv"
    trace.to_csv(path)
    loaded = Trace.from_csv(path)
    assert loaded.schema.columns == trace.schema.columns
    assert loaded.data.shape == trace.data.shape
    assert np.allclose(loaded.data, trace.data, rtol=1e-13, atol=1e-300, equal_nan=True)


def test_event_raster_csv(tmp_path):
    built = build_example1(horizon=0.2, record_flow=False)
    trace, _ = run(built)
    path = tmp_path / "events.csv"
    trace.events_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "t,channel,kind"
    assert any("transmit" in ln for ln in lines[1:])


# -- sweeps -----------------------------------------------------------------------


def test_sweep_single_cell_reduces_to_repeated_runs():
    base = example1_config(horizon=0.4, record_flow=False)
    result = sweep(base, [{}], seeds_per_cell=2, jobs=1, master_seed=7)
    assert len(result.cells) == 1
    cell = result.cells[0]
    assert cell.replicates_ok == 2
    assert not cell.errors
    assert len(cell.aiet_mean) == 2


def test_sweep_records_errors_without_aborting():
    base = example1_config(horizon=0.4, record_flow=False)
    bad = merge_config(base, {"channels": None})
    bad["channels"] = [dict(c) for c in example1_config()["channels"]]
    for c in bad["channels"]:
        c["t_min"] = 1.0  # far above any certifiable period
    result = sweep(bad, [{}], seeds_per_cell=2, jobs=1)
    assert result.cells[0].replicates_ok == 0
    assert len(result.cells[0].errors) == 2


def test_sweep_empty_grid_rejected():
    with pytest.raises(ConfigError):
        sweep(example1_config(), [], seeds_per_cell=1)


def test_sweep_random_initial_states_drawn_from_box():
    base = example1_config(horizon=0.3, record_flow=False)
    result = sweep(
        base,
        [{}],
        seeds_per_cell=2,
        jobs=1,
        master_seed=3,
        x0_box=[[-1.0, -1.0], [1.0, 1.0]],
    )
    assert result.cells[0].replicates_ok == 2


def test_sweep_csv(tmp_path):
    base = example1_config(horizon=0.3, record_flow=False)
    result = sweep(base, [{"certificates": {"params": {"eps_check": 1.0}}}], 1)
    path = tmp_path / "sweep.csv"
    result.to_csv(path)
    assert path.read_text().count("\n") == 2
