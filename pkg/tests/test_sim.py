import math
from dataclasses import replace

import numpy as np
import pytest

from tactile_vla import rng as rngmod
from tactile_vla import sim
from tactile_vla.rollout import ExpertController, run_episodes

CIRCLE3 = sim.TASKS["circle3"]


def test_reset_deterministic_and_in_range():
    a, oa = sim.reset(CIRCLE3, 7)
    b, ob = sim.reset(CIRCLE3, 7)
    assert a == b
    np.testing.assert_array_equal(oa.rgb, ob.rgb)
    for s in range(1000):
        st, _ = sim.reset(CIRCLE3, s)
        assert abs(st.x - CIRCLE3.hole_x) <= 8.0 and abs(st.theta) <= 0.15
        assert abs(st.hole_x - CIRCLE3.hole_x) <= CIRCLE3.placement_jitter


def test_reset_starts_in_free_space():
    st, obs = sim.reset(CIRCLE3, 0)
    assert st.contact is sim.Contact.NONE and st.z > 0
    np.testing.assert_array_equal(obs.tactile, sim.TACTILE_REFERENCE)


def test_task_invariants():
    for t in sim.TASKS.values():
        assert t.aperture == pytest.approx(t.peg_width + sum(t.clearances))
    with pytest.raises(ValueError):
        sim.TaskSpec("bad", sim.PegShape.CIRCLE, 0.0)
    with pytest.raises(ValueError):
        sim.get_task("triangle")


def test_free_space_motion_is_exact():
    st = sim.initial_state(CIRCLE3, x=3.0, z=20.0)
    new, _, info = sim.step(st, [1.5, -1.0, 0.02])
    assert (new.x, new.z, new.theta) == (4.5, 19.0, 0.02)
    assert info.contact_force == 0.0
    new, _, _ = sim.step(st, [5.0, -5.0, 1.0])
    assert (new.x, new.z, new.theta) == (5.0, 18.0, 0.05)


def test_zero_action_only_advances_time():
    st = sim.initial_state(CIRCLE3, x=3.0, z=20.0, theta=0.1)
    new, _, info = sim.step(st, [0, 0, 0])
    assert replace(new, time=0) == st and new.time == 1 and info.contact_force == 0


def test_static_penetration_force():
    st = sim.initial_state(CIRCLE3, x=20.0, z=0.0)
    new, obs, info = sim.step(st, [0.0, -1.0, 0.0])
    assert new.z == 0.0
    assert info.contact_force == pytest.approx(500 * 0.001, abs=1e-12)
    assert info.contact in (sim.Contact.RIM_LEFT, sim.Contact.RIM_RIGHT)
    assert not np.array_equal(obs.tactile, sim.TACTILE_REFERENCE)


def test_step_after_done_raises():
    st = sim.initial_state(CIRCLE3, x=0.0, z=0.0)
    for _ in range(10):
        st, _, _ = sim.step(st, [0, -2, 0])
        if st.done:
            break
    assert st.done
    with pytest.raises(sim.SimError):
        sim.step(st, [0, 0, 0])


def test_no_teleportation_and_force_consistency():
    g = np.random.default_rng(0)
    for seed in range(10):
        st, _ = sim.reset(CIRCLE3, seed)
        while not st.done:
            a = g.uniform(-3, 3, 3) * [1, 1, 0.03]
            a[1] -= 0.8
            new, obs, info = sim.step(st, a)
            assert abs(new.x - st.x) <= 2.0 + sim.PROJECTION_CAP + 1e-9
            assert abs(new.z - st.z) <= 2.0 + sim.PROJECTION_CAP + 1e-9
            assert abs(new.theta - st.theta) <= 0.05 + 1e-12
            assert info.contact_force >= 0
            assert (info.contact_force > 0) == (not np.array_equal(obs.tactile, sim.TACTILE_REFERENCE))
            st = new


def test_render_rgb_properties():
    a = sim.initial_state(CIRCLE3, x=0.0, z=10.0)
    b = sim.initial_state(CIRCLE3, x=6.0, z=10.0)
    ia, ib = sim.render_rgb(a), sim.render_rgb(b)
    assert ia.shape == (48, 48, 3) and ia.min() >= 0 and ia.max() <= 1
    np.testing.assert_array_equal(ia, sim.render_rgb(a))
    assert not np.array_equal(ia, ib)


def test_render_rgb_hides_true_hole():
    a = sim.initial_state(CIRCLE3, x=0.0, z=10.0, hole_x=0.0)
    b = sim.initial_state(CIRCLE3, x=0.0, z=10.0, hole_x=3.0)
    np.testing.assert_array_equal(sim.render_rgb(a), sim.render_rgb(b))


def test_tactile_mirror_symmetry():
    left = sim.tactile_blob(sim.PegShape.CIRCLE, 8.0, -3.0, 0.0, 0.0)
    right = sim.tactile_blob(sim.PegShape.CIRCLE, 8.0, 3.0, 0.0, 0.0)
    np.testing.assert_allclose(left, right[:, ::-1], atol=1e-12)
    np.testing.assert_array_equal(sim.TACTILE_REFERENCE, sim.TACTILE_REFERENCE[:, ::-1])


def test_tactile_saturation():
    a = sim.tactile_blob(sim.PegShape.SQUARE, 20.0, 0.0, 0.3, 0.1)
    b = sim.tactile_blob(sim.PegShape.SQUARE, 35.0, 0.0, 0.3, 0.1)
    np.testing.assert_array_equal(a, b)
    assert a.max() <= 1.0 and a.max() > 0.95
    assert np.all(sim.tactile_blob(sim.PegShape.SQUARE, 0.0, 0.0, 0.0, 0.0) == 0)


def test_camera_degradation():
    ones = np.ones((48, 48, 3))
    np.testing.assert_allclose(sim.degrade_camera(ones, "Dim80", None, None), 0.2)

    class Freeze:
        def random(self):
            return 0.9

    last = np.zeros((48, 48, 3))
    assert sim.degrade_camera(ones, "Freeze50", Freeze(), last) is last
    assert sim.degrade_camera(ones, "Freeze50", Freeze(), None) is ones
    g = rngmod.stream(0, "camera")
    delivered = sum(sim.degrade_camera(ones, "Freeze50", g, last) is ones for _ in range(10_000))
    assert abs(delivered / 10_000 - 0.5) <= 0.02


def _expert_run(task, state, noise=0.0, seed=0):
    mem, info = sim.ExpertMemory(), None
    g = rngmod.stream(seed, "expert")
    states, infos = [state], []
    while not state.done:
        a = sim.scripted_expert(state, task, noise, g, mem, info)
        state, _, info = sim.step(state, a)
        states.append(state)
        infos.append(info)
    return sim.episode_outcome(states, infos, task.insertion_depth_required)


def test_aligned_expert_inserts_directly():
    task = replace(CIRCLE3, placement_jitter=0.0)
    out = _expert_run(task, sim.initial_state(task, x=0.0))
    assert out.success and out.direct and out.max_force == 0.0 and out.contact_steps == 0


def test_clearance_monotonicity():
    c2, c3 = sim.TASKS["circle2"], sim.TASKS["circle3"]
    for seed in range(20):
        hole = sim.reset(c3, seed)[0].hole_x
        s2 = _expert_run(c2, sim.initial_state(c2, x=5.0, hole_x=hole)).success
        s3 = _expert_run(c3, sim.initial_state(c3, x=5.0, hole_x=hole)).success
        assert s3 or not s2


def test_expert_monte_carlo():
    traces = run_episodes(CIRCLE3, range(200), ExpertController(0.3), keep_frames=False)
    outs = [t.outcome for t in traces]
    assert np.mean([o.success for o in outs]) >= 0.98
    assert any(o.direct for o in outs) and any(o.success and not o.direct for o in outs)
    peaks = [o.max_force for o in outs if o.contact_steps]
    assert 1.0 < np.median(peaks) < 15.0


def _trace(zs, forces):
    states = [sim.initial_state(CIRCLE3, 0.0, z) for z in zs]
    infos = [sim.StepInfo(f, f > 0, max(0.0, -z)) for z, f in zip(zs[1:], forces)]
    return states, infos


def test_outcome_direct():
    states, infos = _trace([5, 0, -5, -10], [0, 0, 0])
    out = sim.episode_outcome(states, infos, 10.0)
    assert out.success and out.direct and out.label == "Direct" and out.steps == 3


def test_outcome_recovered():
    states, infos = _trace([5, 0, 2, 0, -5, -10], [3.0, 0, 0, 0, 0])
    out = sim.episode_outcome(states, infos, 10.0)
    assert out.success and not out.direct and out.retreats == 1 and out.max_force == 3.0


def test_outcome_failure_time():
    zs = [5.0] + [-9.0] * 300
    states, infos = _trace(zs, [0.0] * 300)
    out = sim.episode_outcome(states, infos, 10.0)
    assert not out.success and out.label == "Failure" and math.isclose(out.time_s, 30.0)


def test_determinism_of_traces():
    a = run_episodes(CIRCLE3, [3, 4], ExpertController(0.3))
    b = run_episodes(CIRCLE3, [3, 4], ExpertController(0.3))
    for ta, tb in zip(a, b):
        assert ta.states == tb.states and ta.infos == tb.infos
        assert all(np.array_equal(x, y) for x, y in zip(ta.rgb, tb.rgb))
