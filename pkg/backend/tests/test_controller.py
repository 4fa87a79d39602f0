import logging
import math
from typing import Optional, Tuple

import numpy as np
import pytest

from backend.src.controller import (
    VelocityCommand,
    bound_level,
    learned_control,
    lyapunov_rate,
    lyapunov_V,
    nominal_control,
    nominal_lyapunov_rate,
    ultimate_bound,
    worst_case_constants,
)
from backend.src.dq_algebra import (
    Pose,
    PoseError,
    Twist,
    UnitDualQuaternion,
    UnitQuaternion,
    dq_from_pose,
    integrate_step,
    pose_error,
)
from backend.src.errors import OutOfRangeError
from backend.src.kinematics_sim import (
    SimState,
    apply_and_step,
    disturbance_at,
    reference_at,
)
from backend.src.models import (
    DisturbanceField,
    GainSchedule,
    ReferenceTrajectory,
    SensorModel,
)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(7)


@pytest.fixture
def gains() -> GainSchedule:
    return GainSchedule()


def random_pose(rng: np.random.Generator, max_angle: float = math.pi) -> Pose:
    axis = rng.standard_normal(3)
    angle = rng.uniform(0.0, max_angle)
    return Pose(
        attitude=UnitQuaternion.from_axis_angle(axis, angle),
        position=rng.uniform(-3.0, 3.0, size=3),
    )


def random_twist(rng: np.random.Generator) -> Twist:
    return Twist(omega=rng.standard_normal(3), vel=rng.standard_normal(3))


def error_between(pose_d: Pose, pose: Pose) -> PoseError:
    return pose_error(dq_from_pose(pose_d), dq_from_pose(pose))


def test_zero_error_returns_reference_twist(rng: np.random.Generator, gains):
    """Tests that a perfectly tracked pose is commanded the reference twist."""
    pose_d = random_pose(rng)
    tw_d = random_twist(rng)
    cmd = nominal_control(error_between(pose_d, pose_d), tw_d, gains)
    np.testing.assert_allclose(cmd.omega_cmd, tw_d.omega, atol=1e-12)
    np.testing.assert_allclose(cmd.v_cmd, tw_d.vel, atol=1e-12)


def test_half_turn_error_uses_positive_sign(gains):
    """Tests ``sign(0) = 1`` at an attitude error of exactly pi."""
    pose = Pose(attitude=UnitQuaternion(v=[1.0, 0.0, 0.0], s=0.0), position=[0, 0, 0])
    err = error_between(Pose.identity(), pose)
    assert err.dq0 == 0.0
    cmd = nominal_control(err, Twist.zero(), gains)
    np.testing.assert_allclose(cmd.omega_cmd, [-2.0, 0.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(cmd.v_cmd, 0.0, atol=1e-15)


def test_command_independent_of_quaternion_sign(rng: np.random.Generator, gains):
    """Tests that ``q`` and ``-q`` describe the same pose and get one command."""
    for _ in range(200):
        pose_d, pose = random_pose(rng), random_pose(rng)
        flipped = Pose(attitude=-pose.attitude, position=pose.position)  # type: ignore
        tw_d = random_twist(rng)
        a = nominal_control(error_between(pose_d, pose), tw_d, gains)
        b = nominal_control(error_between(pose_d, flipped), tw_d, gains)
        np.testing.assert_allclose(a.omega_cmd, b.omega_cmd, atol=1e-12)
        np.testing.assert_allclose(a.v_cmd, b.v_cmd, atol=1e-12)


def test_position_command_uses_inertial_error(gains):
    """Tests ``v = v_d - K_v (p - p_d)`` under a rotated reference."""
    pose_d = Pose(attitude=UnitQuaternion.from_yaw(1.0), position=[1.0, 2.0, 3.0])
    pose = Pose(attitude=UnitQuaternion.from_yaw(1.0), position=[2.0, 2.0, 3.5])
    tw_d = Twist(omega=[0.0, 0.0, 0.0], vel=[0.5, 0.0, 0.0])
    cmd = nominal_control(error_between(pose_d, pose), tw_d, gains)
    np.testing.assert_allclose(cmd.v_cmd, [0.5 - 2.0, 0.0, -1.0], atol=1e-12)


def test_learned_control_subtracts_estimates():
    """Tests the GP-compensated command."""
    nominal = VelocityCommand(omega_cmd=[1.0, 0.0, 0.0], v_cmd=[0.0, 1.0, 0.0])
    out = learned_control(nominal, [0.5, 0.0, 0.0], [0.0, 0.25, -1.0])
    np.testing.assert_allclose(out.omega_cmd, [0.5, 0.0, 0.0])
    np.testing.assert_allclose(out.v_cmd, [0.0, 0.75, 1.0])


def test_velocity_command_rejects_non_finite():
    """Tests that NaN commands are refused."""
    with pytest.raises(OutOfRangeError):
        VelocityCommand(omega_cmd=[math.nan, 0.0, 0.0], v_cmd=[0.0, 0.0, 0.0])


def test_velocity_command_as_twist():
    cmd = VelocityCommand(omega_cmd=[1.0, 2.0, 3.0], v_cmd=[4.0, 5.0, 6.0])
    tw = cmd.as_twist()
    np.testing.assert_array_equal(tw.omega, [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(tw.vel, [4.0, 5.0, 6.0])


def test_lyapunov_V_values():
    """Tests ``V`` at the identity and at a pure translation."""
    identity = UnitDualQuaternion.identity()
    assert lyapunov_V(pose_error(identity, identity)) == 0.0
    shifted = dq_from_pose(Pose(attitude=UnitQuaternion.identity(), position=[0, 2, 0]))
    assert lyapunov_V(pose_error(identity, shifted)) == pytest.approx(2.0)


def test_lyapunov_rate_matches_central_difference(rng: np.random.Generator):
    """Tests ``dV/dt`` against ``(V(h) - V(-h)) / 2h`` for constant twists."""
    h = 1e-5
    for _ in range(100):
        Q_d = dq_from_pose(random_pose(rng, max_angle=2.5))
        Q = dq_from_pose(random_pose(rng, max_angle=2.5))
        tw, tw_d = random_twist(rng), random_twist(rng)
        back = Twist(omega=-tw.omega, vel=-tw.vel)
        back_d = Twist(omega=-tw_d.omega, vel=-tw_d.vel)
        ahead = lyapunov_V(
            pose_error(integrate_step(Q_d, tw_d, h), integrate_step(Q, tw, h))
        )
        behind = lyapunov_V(
            pose_error(integrate_step(Q_d, back_d, h), integrate_step(Q, back, h))
        )
        fd = (ahead - behind) / (2.0 * h)
        assert lyapunov_rate(pose_error(Q_d, Q), tw, tw_d) == pytest.approx(
            fd, abs=1e-6
        )


def test_nominal_rate_matches_rate_under_nominal_command(
    rng: np.random.Generator, gains
):
    """Tests the closed-form nominal rate and that it is never positive."""
    for _ in range(200):
        err = error_between(random_pose(rng), random_pose(rng))
        tw_d = random_twist(rng)
        cmd = nominal_control(err, tw_d, gains)
        closed_form = nominal_lyapunov_rate(err, gains)
        assert closed_form <= 0.0
        assert lyapunov_rate(err, cmd.as_twist(), tw_d) == pytest.approx(
            closed_form, abs=1e-10
        )


HOVER = Pose(attitude=UnitQuaternion.identity(), position=[0.0, 0.0, 1.0])


def hover_offset(
    rng: np.random.Generator, angle: Optional[float] = None, radius: float = 5.0
) -> Pose:
    """Initial pose around the hover point: any attitude, ``||dp|| <= radius``."""
    axis = rng.standard_normal(3)
    direction = rng.standard_normal(3)
    if angle is None:
        angle = rng.uniform(0.0, math.pi)
    return Pose(
        attitude=UnitQuaternion.from_axis_angle(axis, angle),
        position=HOVER.position
        + rng.uniform(0.0, radius) * direction / np.linalg.norm(direction),
    )


def _hover_run(
    pose: Pose, gains: GainSchedule, duration: float = 40.0, dt: float = 0.01
) -> Tuple[np.ndarray, np.ndarray]:
    """``V`` and the commanded angular rate at every tick of a hover episode."""
    Q_d = dq_from_pose(HOVER)
    Q = dq_from_pose(pose)
    trace, omegas = [], []
    for _ in range(int(round(duration / dt))):
        err = pose_error(Q_d, Q)
        cmd = nominal_control(err, Twist.zero(), gains)
        trace.append(lyapunov_V(err))
        omegas.append(cmd.omega_cmd)
        Q = integrate_step(Q, cmd.as_twist(), dt)
    return np.array(trace), np.array(omegas)


def _assert_hover_converges(rng: np.random.Generator, gains, n_cases: int) -> None:
    starts = [
        hover_offset(rng, angle=math.pi, radius=0.0),
        Pose(
            attitude=UnitQuaternion(v=[0.0, 0.0, 1.0], s=0.0),
            position=HOVER.position + [5.0, 0.0, 0.0],
        ),
    ]
    starts += [hover_offset(rng) for _ in range(n_cases - len(starts))]
    for pose in starts:
        assert np.linalg.norm(pose.position - HOVER.position) <= 5.0 + 1e-12
        trace, _ = _hover_run(pose, gains)
        assert np.all(np.diff(trace) <= 1e-12)
        assert trace[-1] < 1e-6


def test_hover_closed_loop_converges(rng: np.random.Generator, gains):
    """Tests that the nominal loop drives ``V`` monotonically to zero."""
    _assert_hover_converges(rng, gains, n_cases=5)


@pytest.mark.slow
def test_hover_closed_loop_converges_many_initial_conditions(
    rng: np.random.Generator, gains
):
    """Tests monotone convergence from 50 random initial poses."""
    _assert_hover_converges(rng, gains, n_cases=50)


def test_negative_scalar_start_turns_the_short_way(gains):
    """Tests that ``dq0 < 0`` and its mirror follow the same rotation of < pi."""
    angle = 5.0
    axis = np.array([1.0, 2.0, -2.0]) / 3.0
    negative = UnitQuaternion.from_axis_angle(axis, angle)
    assert negative.s < 0.0
    mirrored = -negative
    assert isinstance(mirrored, UnitQuaternion)
    dt = 0.01
    runs = [
        _hover_run(Pose(attitude=q, position=HOVER.position), gains, 20.0, dt)
        for q in (negative, mirrored)
    ]
    (trace, omegas), (mirror_trace, mirror_omegas) = runs

    np.testing.assert_allclose(omegas, mirror_omegas, atol=1e-12)
    np.testing.assert_allclose(trace, mirror_trace, atol=1e-12)
    rates = np.linalg.norm(omegas, axis=1)
    turned = float(np.sum(rates) * dt)
    assert turned <= math.pi
    assert turned == pytest.approx(2.0 * math.pi - angle, abs=1e-2)
    moving = rates > 1e-3
    directions = omegas[moving] / rates[moving, None]
    np.testing.assert_allclose(directions, np.tile(axis, (int(moving.sum()), 1)))


def test_exact_disturbance_estimates_recover_undisturbed_loop(gains):
    """Tests that injecting the true disturbance cancels it along a trajectory."""
    traj = ReferenceTrajectory(shape="lemniscate", amplitude=2.0, duration=12.0)
    field = DisturbanceField(always_on=True)
    quiet = SensorModel.noiseless()
    dt = 0.01
    Q0 = dq_from_pose(
        Pose(
            attitude=UnitQuaternion.from_axis_angle([0.0, 1.0, 1.0], 0.8),
            position=[0.5, -0.3, 1.2],
        )
    )
    cancelled = SimState.start(Q0, 0, quiet)
    nominal = SimState.start(Q0, 0, quiet)
    for k in range(int(round(traj.duration / dt))):
        Q_d, tw_d = reference_at(traj, k * dt)
        mu_omega, mu_v = disturbance_at(field, cancelled.Q_true)
        cmd = learned_control(
            nominal_control(pose_error(Q_d, cancelled.Q_true), tw_d, gains),
            mu_omega,
            mu_v,
        )
        cancelled = apply_and_step(cancelled, cmd, field, quiet, dt)
        plain = nominal_control(pose_error(Q_d, nominal.Q_true), tw_d, gains)
        nominal = apply_and_step(
            nominal, plain, DisturbanceField(enabled=False), quiet, dt
        )
        np.testing.assert_allclose(
            cancelled.Q_true.to_array(), nominal.Q_true.to_array(), atol=1e-8
        )
    assert lyapunov_V(pose_error(Q_d, nominal.Q_true)) < 1e-3


def test_worst_case_constants(gains):
    c_omega, c_v = worst_case_constants(0.3, 0.4, gains)
    assert c_omega == pytest.approx(0.3)
    assert c_v == pytest.approx(0.16 / 4.0)
    with pytest.raises(OutOfRangeError):
        worst_case_constants(-0.1, 0.4, gains)


def _dense_level(eps0: float, n: int = 1_000_001) -> float:
    """Maximum of V over the component of the sublevel set containing s = 0."""
    s = np.linspace(0.0, 1.0, n)
    gap = s * np.sqrt(1.0 - s)
    infeasible = np.nonzero(gap > eps0)[0]
    stop = infeasible[0] if infeasible.size else n
    reachable = s[:stop]
    return float(np.max(reachable + 0.5 * (eps0 - gap[:stop])))


@pytest.mark.parametrize("eps0", [0.001, 0.01, 0.1, 0.2, 0.35, 0.38])
def test_bound_level_matches_dense_grid(eps0: float):
    """Tests the reachable level against a fine grid search."""
    assert bound_level(eps0) == pytest.approx(_dense_level(eps0), abs=1e-5)


@pytest.mark.parametrize("eps0", [0.39, 0.5, 2.0])
def test_bound_level_without_gap(eps0: float):
    """Tests that above the gap the level admits half-turn errors."""
    assert bound_level(eps0) == pytest.approx(1.0 + 0.5 * eps0)


def test_bound_level_full_set_and_edges():
    """Tests the full sublevel set, zero and negative arguments."""
    assert bound_level(0.1, reachable_only=False) == pytest.approx(1.05)
    assert bound_level(0.0) == 0.0
    with pytest.raises(OutOfRangeError):
        bound_level(-1e-3)


def test_ultimate_bound_small_constants(gains):
    """Tests ``eps0 = (c_omega + c_v) / alpha_n`` and a sub-unit level."""
    bound = ultimate_bound(0.01, 0.01, gains, gamma_omega=0.9, gamma_v=0.8)
    assert bound.alpha_n == pytest.approx(1.0)
    assert bound.eps0 == pytest.approx(0.02)
    assert 0.02 < bound.M < 0.021
    assert bound.gamma == pytest.approx(0.8)


def test_ultimate_bound_warns_on_half_turn(gains, caplog):
    """Tests the warning when the level reaches 1."""
    with caplog.at_level(logging.WARNING, logger="backend.src.controller"):
        bound = ultimate_bound(1.0, 0.0, gains, gamma_omega=0.9, gamma_v=0.9)
    assert bound.M == pytest.approx(1.5)
    assert "half-turn" in caplog.text


@pytest.mark.parametrize(
    "c_omega,c_v,gamma",
    [(-0.1, 0.0, 0.9), (0.0, -0.1, 0.9), (0.1, 0.1, 0.0), (0.1, 0.1, 1.5)],
)
def test_ultimate_bound_rejects_invalid_arguments(gains, c_omega, c_v, gamma):
    with pytest.raises(OutOfRangeError):
        ultimate_bound(c_omega, c_v, gains, gamma_omega=gamma, gamma_v=0.9)


def test_gain_schedule_is_forwarded(rng: np.random.Generator, gains):
    """Tests that a valid schedule changes the command and a bad one raises."""
    err = error_between(Pose.identity(), random_pose(rng, max_angle=2.0))
    rho = np.array([1.0, 0.0, 0.0])
    stiff = gains.with_schedule(lambda r: (4.0 * np.eye(3), 4.0 * np.eye(3)))
    base = nominal_control(err, Twist.zero(), gains, rho)
    scheduled = nominal_control(err, Twist.zero(), stiff, rho)
    np.testing.assert_allclose(scheduled.v_cmd, 2.0 * base.v_cmd, atol=1e-12)

    weak = gains.with_schedule(lambda r: (0.5 * np.eye(3), 2.0 * np.eye(3)))
    with pytest.raises(OutOfRangeError):
        nominal_control(err, Twist.zero(), weak, rho)
    # without a scheduling variable the constant gains apply
    nominal_control(err, Twist.zero(), weak)
