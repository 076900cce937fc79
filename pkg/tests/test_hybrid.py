import numpy as np
import pytest

from petnet.errors import ConfigError, NumericalError, ProtocolViolation
from petnet.hybrid import ChannelState, NetworkedLoop, PlantModel
from petnet.protocols import Protocol
from petnet.scenarios import chain3_plant, example1_plant, example2_plant


class ConstantEta:
    """Trigger stub: fixed post-jump values and zero flow."""

    def __init__(self, sample=0.0, transmit=0.0, flow=0.0):
        self._sample, self._transmit, self._flow = sample, transmit, flow

    def sample_update(self, state, i):
        return self._sample

    def transmit_update(self, state, i):
        return self._transmit

    def eta_flow(self, state, i):
        return self._flow


def example1_loop(madns=1, t_min=0.002, t_max=0.0054):
    return NetworkedLoop(
        example1_plant(),
        [Protocol.sd(1), Protocol.sd(1)],
        madns=[madns, madns],
        t_min=[t_min, t_min],
        t_max=[t_max, t_max],
    )


def example2_loop(madns=1):
    return NetworkedLoop(
        example2_plant(),
        [Protocol.tod((1, 1))],
        madns=[madns],
        t_min=[0.0005],
        t_max=[0.0016],
    )


def chain3_loop(madns=2):
    return NetworkedLoop(
        chain3_plant(),
        [Protocol.rr((1, 1, 1), contraction=0.99)],
        madns=[madns],
        t_min=[0.01],
        t_max=[0.05],
    )


# -- flow field -------------------------------------------------------------


def test_flow_field_vanishes_at_the_origin():
    loop = example1_loop()
    state = loop.initial_state(np.zeros(2))
    der = loop.flow_field(state, 0.0, ConstantEta())
    assert np.allclose(der.x_dot, 0.0)
    assert np.allclose(der.eta_dot, 0.0)
    assert np.allclose(der.tau_dot, 1.0)


def test_flow_field_example1_hand_value():
    # at x=(10,-10) with zero held signals the first component collects
    # 0.8*100 - 1000 + (-10) - 2*10 ... except the held actuation is zero,
    # so the -2*10 feedback term is absent until a packet lands
    loop = example1_loop()
    state = loop.initial_state(np.array([10.0, -10.0]))
    # deliver perfect held values (e = 0) to exercise the nominal loop
    for i in range(2):
        state.channels[i].v_hat = loop.channel_signal(state.x, i).copy()
    der = loop.flow_field(state, 0.0, ConstantEta())
    assert der.x_dot[0] == pytest.approx(0.8 * 100 - 1000 + (-10) - 2 * 10)
    assert der.x_dot[0] == pytest.approx(-950.0)


def test_flow_field_example2_first_component():
    loop = example2_loop()
    state = loop.initial_state(np.array([-1.3, 2.0]))
    state.channels[0].v_hat = state.x.copy()
    der = loop.flow_field(state, 0.0, ConstantEta())
    assert der.x_dot[0] == pytest.approx(2.0)


def test_flow_field_reports_nonfinite_components():
    plant = PlantModel(
        n_p=1,
        n_c=0,
        n_y=1,
        n_u=1,
        f_p=lambda x, u, w: np.array([x[0] * np.inf if x[0] else 0.0]),
        g_p=lambda x: x.copy(),
        g_c=lambda y: -y,
        static_controller=True,
    )
    loop = NetworkedLoop(plant, [Protocol.sd(1)], [0], [0.1], [0.2])
    state = loop.initial_state(np.array([1.0]))
    with pytest.raises(NumericalError, match="component 0"):
        loop.flow_field(state, 0.0, ConstantEta())


def test_plant_zero_at_zero_enforced():
    with pytest.raises(ConfigError, match="vanish"):
        PlantModel(
            n_p=1,
            n_c=0,
            n_y=1,
            n_u=1,
            f_p=lambda x, u, w: np.array([1.0]),
            g_p=lambda x: x.copy(),
            g_c=lambda y: -y,
            static_controller=True,
        )


# -- jump maps ---------------------------------------------------------------


def sampled(loop, state, tau=0.002):
    """Put every channel into its sampling window."""
    for ch in state.channels:
        ch.tau_hat = tau
    return state


def test_transmit_single_node_ledger_block_cancels_error():
    loop = example1_loop()
    state = sampled(loop, loop.initial_state(np.array([3.0, 1.0])))
    e_bar = loop.transmission_error(state, 0)
    new = loop.jump_transmit(state, 0, ConstantEta(), m_hat_next=-1)
    # full-vector protocol: the in-flight block carries exactly -e_bar
    assert np.allclose(new.channels[0].theta[0], -e_bar)
    assert new.channels[0].k_bar == 1
    assert new.channels[0].l == 1
    assert np.array_equal(new.channels[0].v_tilde, loop.channel_signal(state.x, 0))
    assert new.channels[0].tau_hat == 0.0
    # untouched channel and state
    assert np.array_equal(new.x, state.x)
    assert new.channels[1].k_bar == 0


def test_transmit_tod_schedules_largest_error_node():
    loop = example2_loop()
    state = sampled(loop, loop.initial_state(np.zeros(2)), tau=0.001)
    state.channels[0].v_hat = np.array([3.0, -1.0])  # e_bar = (3,-1) at x=0
    new = loop.jump_transmit(state, 0, ConstantEta(), m_hat_next=-1)
    assert np.allclose(new.channels[0].theta[0], np.array([-3.0, 0.0]))


def test_transmit_full_ledger_rejected():
    loop = example1_loop(madns=0)
    state = sampled(loop, loop.initial_state(np.array([1.0, 1.0])))
    state = loop.jump_transmit(state, 0, ConstantEta())
    state = sampled(loop, state)
    with pytest.raises(ProtocolViolation, match="delay budget"):
        loop.jump_transmit(state, 0, ConstantEta())


def test_sample_only_keeps_ledger_bitwise():
    loop = example1_loop()
    state = sampled(loop, loop.initial_state(np.array([2.0, -1.0])))
    state = loop.jump_transmit(state, 0, ConstantEta(), m_hat_next=-1)
    before = state.channels[0].theta.copy()
    state = sampled(loop, state)
    state.channels[0].m_hat = 1
    new = loop.jump_sample_only(state, 0, ConstantEta(sample=0.3))
    assert np.array_equal(new.channels[0].theta, before)
    assert new.channels[0].eta == 0.3
    assert new.channels[0].k_bar == state.channels[0].k_bar
    assert np.array_equal(new.channels[0].v_tilde, loop.channel_signal(state.x, 0))


def test_arrival_applies_first_block_and_shifts():
    loop = example1_loop()
    state = sampled(loop, loop.initial_state(np.array([2.0, -1.0])))
    state = loop.jump_transmit(state, 0, ConstantEta(), m_hat_next=-1)
    block = state.channels[0].theta[0].copy()
    v_hat_before = state.channels[0].v_hat.copy()
    new = loop.jump_arrival(state, 0)
    assert np.allclose(new.channels[0].v_hat, v_hat_before + block)
    assert new.channels[0].l == 0
    assert new.channels[0].k_tilde == 1
    assert np.all(new.channels[0].theta == 0.0)
    # updating error jumps by exactly the consumed block
    e_before = loop.updating_error(state, 0)
    e_after = loop.updating_error(new, 0)
    assert np.allclose(e_after - e_before, block)


def test_arrival_zero_block_leaves_held_value():
    loop = example1_loop()
    state = sampled(loop, loop.initial_state(np.zeros(2)))
    state = loop.jump_transmit(state, 0, ConstantEta(), m_hat_next=-1)
    assert np.all(state.channels[0].theta == 0.0)  # error was zero
    new = loop.jump_arrival(state, 0)
    assert np.array_equal(new.channels[0].v_hat, state.channels[0].v_hat)


def test_arrival_with_empty_ledger_rejected():
    loop = example1_loop()
    state = loop.initial_state(np.zeros(2))
    with pytest.raises(ProtocolViolation, match="nothing in flight"):
        loop.jump_arrival(state, 0)


def test_boundary_rule_forces_next_event_tag():
    loop = example1_loop(madns=0)
    state = sampled(loop, loop.initial_state(np.array([1.0, 0.5])))
    new = loop.jump_transmit(state, 0, ConstantEta())  # ledger now full
    assert new.channels[0].m_hat == -1
    back = loop.jump_arrival(new, 0)  # ledger empty again
    assert back.channels[0].m_hat == 1
    with pytest.raises(ProtocolViolation, match="conflicts"):
        loop.jump_transmit(state, 0, ConstantEta(), m_hat_next=1)


def test_flow_and_jump_sets():
    loop = example1_loop(t_min=0.002, t_max=0.005)
    state = loop.initial_state(np.zeros(2))
    assert loop.in_flow_set(state)
    assert not loop.in_jump_set(state, 0)  # tau = 0: flow only
    state.channels[0].tau_hat = 0.005
    assert loop.in_flow_set(state) and loop.in_jump_set(state, 0)  # jump forced
    state.channels[0].tau_hat = 0.003
    assert loop.in_flow_set(state) and loop.in_jump_set(state, 0)  # jump permitted
    state.channels[0].tau_hat = 0.006
    assert not loop.in_flow_set(state)


# -- the replay oracle --------------------------------------------------------


def replay_random_jumps(loop, x_scale, n_jumps, seed):
    """Drive random admissible jumps; maintain the scheduled value directly
    and check it against the ledger reconstruction at every step."""
    rng = np.random.default_rng(seed)
    n = loop.n_channels
    state = loop.initial_state(rng.uniform(-x_scale, x_scale, loop.plant.n_x))
    v_bar = [state.channels[i].v_hat.copy() for i in range(n)]  # zero initial
    sent_values = [[] for _ in range(n)]  # queue of in-flight scheduled values
    stub = ConstantEta()
    for _ in range(n_jumps):
        i = int(rng.integers(0, n))
        ch = state.channels[i]
        # random flow surrogate: move the plant state between jumps
        state.x = rng.uniform(-x_scale, x_scale, loop.plant.n_x)
        can_transmit = ch.l <= loop.madns[i]
        transmit = can_transmit and (ch.l == 0 or rng.random() < 0.5)
        if transmit:
            state.channels[i].tau_hat = loop.t_min[i]
            state.channels[i].m_hat = 1
            # direct maintenance of the scheduled value
            v_now = loop.channel_signal(state.x, i)
            e_bar_direct = v_bar[i] - v_now
            k = ch.k_bar
            v_bar[i] = v_now + loop.protocols[i].residual(k, e_bar_direct)
            sent_values[i].append(v_bar[i].copy())
            # the ledger-based transmission error must match the direct one
            assert np.allclose(
                loop.transmission_error(state, i), e_bar_direct, rtol=1e-12, atol=1e-12
            )
            state = loop.jump_transmit(state, i, stub)
        elif ch.l >= 1:
            state.channels[i].m_hat = -1
            state = loop.jump_arrival(state, i)
            expected = sent_values[i].pop(0)
            # FIFO: the arrival delivers the matching transmission's value
            assert np.allclose(
                state.channels[i].v_hat, expected, rtol=1e-12, atol=1e-12
            )
        else:
            state.channels[i].tau_hat = loop.t_min[i]
            state.channels[i].m_hat = 1
            state = loop.jump_sample_only(state, i, stub)
        ch = state.channels[i]
        assert ch.l == ch.k_bar - ch.k_tilde
        assert 0 <= ch.l <= loop.madns[i] + 1
        if ch.l < loop.madns[i] + 1:
            assert np.all(ch.theta[ch.l :] == 0.0)
        # reconstructed scheduled value == directly maintained one
        recon = state.channels[i].v_hat + ch.theta[: ch.l].sum(axis=0)
        scale = max(1.0, float(np.linalg.norm(v_bar[i])))
        assert np.allclose(recon, v_bar[i], rtol=1e-12, atol=1e-12 * scale)
    return state


@pytest.mark.parametrize(
    "make_loop,x_scale,seed",
    [
        (lambda: example1_loop(madns=2, t_min=0.001, t_max=0.01), 5.0, 101),
        (lambda: example2_loop(madns=3), 2.0, 102),
        (lambda: chain3_loop(madns=2), 4.0, 103),
    ],
)
def test_replay_oracle_per_protocol(make_loop, x_scale, seed):
    replay_random_jumps(make_loop(), x_scale, n_jumps=1000, seed=seed)


def test_transmission_error_reduces_to_updating_error_when_idle():
    loop = example2_loop()
    state = loop.initial_state(np.array([0.4, -0.2]))
    assert np.allclose(
        loop.transmission_error(state, 0), loop.updating_error(state, 0)
    )


def test_channel_invariant_checks_fire():
    ch = ChannelState(
        v_hat=np.zeros(1), v_tilde=np.zeros(1), theta=np.zeros((2, 1)), l=1
    )
    with pytest.raises(ProtocolViolation, match="counters"):
        ch.check_invariants()
