import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aquadem.envs import (
    DIAGONAL,
    RIGHT,
    UP,
    DemoDataset,
    DiscretizedEnv,
    GridDemonstrator,
    GridWorld,
    PlayGridWorld,
    bang_bang_candidates,
    discretized_step,
    generate_demos,
    generate_play_demos,
)
from aquadem.errors import InputError, NumericalError, StructuralError
from aquadem.quantizer import FixedCandidates, random_candidates

unit = st.floats(0.0, 1.0)
direction = st.tuples(st.floats(-1, 1), st.floats(-1, 1))


def test_reset_inside_start_and_seeded():
    env = GridWorld()
    s1 = env.reset(np.random.default_rng(3))
    s2 = GridWorld().reset(np.random.default_rng(3))
    np.testing.assert_array_equal(s1, s2)
    assert env.in_start(s1) and env.t == 0


def test_reset_is_uniform_over_start_square():
    env = GridWorld()
    rng = np.random.default_rng(0)
    pts = np.array([env.reset(rng) for _ in range(10_000)])
    # 2% of the centre coordinate 0.05
    np.testing.assert_allclose(pts.mean(axis=0), [0.05, 0.05], atol=0.001)


def test_step_examples():
    env = GridWorld()
    nxt, r, reached = env.transition(np.array([0.05, 0.05]), np.array([1.0, 0.0]))
    np.testing.assert_allclose(nxt, [0.10, 0.05], atol=1e-15)
    assert r == 0.0 and not reached
    nxt, _, _ = env.transition(np.array([0.99, 0.5]), np.array([1.0, 0.0]))
    np.testing.assert_array_equal(nxt, [1.0, 0.5])
    env.state, env.t = np.array([0.88, 0.88]), 0
    nxt, r, done = env.step(np.array([1.0, 1.0]))
    assert env.in_goal(nxt) and r == 1.0 and done


def test_zero_action_does_not_move_and_bad_actions_fail():
    env = GridWorld()
    s = np.array([0.3, 0.4])
    np.testing.assert_array_equal(env.move(s, np.zeros(2)), s)
    with pytest.raises(NumericalError):
        env.move(s, np.array([np.nan, 0.0]))
    with pytest.raises(StructuralError):
        env.move(s, np.zeros(3))
    with pytest.raises(StructuralError):
        GridWorld().step(np.ones(2))


def test_episode_times_out():
    env = GridWorld()
    env.reset(np.random.default_rng(0))
    done, steps = False, 0
    while not done:
        _, r, done = env.step(np.array([-1.0, 0.0]))
        steps += 1
    assert steps == 200 and r == 0.0


@settings(max_examples=200, deadline=None)
@given(unit, unit, direction)
def test_states_stay_in_bounds_and_reward_iff_goal(x, y, a):
    env = GridWorld()
    nxt, r, reached = env.transition(np.array([x, y]), np.array(a))
    assert np.all(nxt >= 0.0) and np.all(nxt <= 1.0)
    assert (r == 1.0) == env.in_goal(nxt) == reached
    assert r in (0.0, 1.0)
    moved = np.linalg.norm(nxt - [x, y])
    assert moved <= 0.05 + 1e-12


# -- demonstrator ---------------------------------------------------------------


def test_demonstrator_rules():
    demo, rng = GridDemonstrator(), np.random.default_rng(0)
    np.testing.assert_array_equal(demo.action(np.array([0.5, 0.5]), rng), DIAGONAL)
    np.testing.assert_array_equal(demo.action(np.array([0.5, 1.0]), rng), RIGHT)
    np.testing.assert_array_equal(demo.action(np.array([1.0, 0.5]), rng), UP)


def test_demonstrator_coin_flip_in_bottom_left():
    demo, rng = GridDemonstrator(), np.random.default_rng(1)
    draws = np.array([demo.action(np.array([0.05, 0.05]), rng) for _ in range(10_000)])
    right = np.mean(np.all(draws == RIGHT, axis=1))
    up = np.mean(np.all(draws == UP, axis=1))
    assert right + up == 1.0
    assert abs(right - 0.5) < 0.02


@settings(max_examples=200, deadline=None)
@given(unit, unit, st.integers(0, 1000))
def test_demonstrator_directions_are_unit(x, y, seed):
    a = GridDemonstrator().action(np.array([x, y]), np.random.default_rng(seed))
    assert abs(np.linalg.norm(a) - 1.0) < 1e-12


def test_generated_demos_succeed_and_replay():
    env = GridWorld()
    demos = generate_demos(env, GridDemonstrator(), 25, seed=0)
    assert len(demos.episodes) == 25
    lengths = [len(ep) for ep in demos.episodes]
    assert 20 <= min(lengths) and max(lengths) <= 40
    for ep in demos.episodes:
        assert ep.rewards[-1] == 1.0 and ep.dones[-1] and not ep.dones[:-1].any()
        assert env.in_start(ep.states[0])
        for t in range(len(ep) - 1):
            nxt, _, _ = env.transition(ep.states[t], ep.actions[t])
            np.testing.assert_allclose(nxt, ep.states[t + 1], rtol=0, atol=1e-12)
        nxt, r, _ = env.transition(ep.states[-1], ep.actions[-1])
        assert r == 1.0


def test_all_three_modes_appear():
    demos = generate_demos(GridWorld(), GridDemonstrator(), 25, seed=0)
    _, actions = demos.arrays()
    for mode in (RIGHT, UP, DIAGONAL):
        assert np.any(np.all(np.isclose(actions, mode), axis=1))


def test_demo_file_is_byte_stable_and_round_trips(tmp_path):
    a = generate_demos(GridWorld(), GridDemonstrator(), 3, seed=5)
    b = generate_demos(GridWorld(), GridDemonstrator(), 3, seed=5)
    assert a.to_text() == b.to_text()
    a.save(tmp_path / "d.jsonl")
    back = DemoDataset.load(tmp_path / "d.jsonl")
    assert back.to_text() == a.to_text()
    for e1, e2 in zip(a.episodes, back.episodes):
        np.testing.assert_array_equal(e1.states, e2.states)
        np.testing.assert_array_equal(e1.actions, e2.actions)
    header = json.loads(a.to_text().splitlines()[0])
    assert header["metadata"]["seed"] == 5 and header["metadata"]["env"] == "gridworld"


def test_demo_file_validation():
    with pytest.raises(InputError):
        DemoDataset.from_text("")
    with pytest.raises(InputError):
        DemoDataset.from_text(json.dumps({"format": "other", "version": 1}) + "\n")


def test_generate_demos_needs_a_successful_policy():
    class Lazy:
        def reset(self, rng):
            pass

        def action(self, state, rng):
            return np.zeros(2)

    with pytest.raises(RuntimeError):
        generate_demos(GridWorld(), Lazy(), 1, 0)
    with pytest.raises(InputError):
        generate_demos(GridWorld(), GridDemonstrator(), 0, 0)


# -- play -----------------------------------------------------------------------


def test_play_env_task_rewards():
    env = PlayGridWorld(task=1)
    corner = np.array([0.02, 0.97])
    assert env.in_goal(corner) and not env.in_goal(corner, task=0)
    assert not PlayGridWorld().in_goal(corner)  # no task, no reward
    with pytest.raises(InputError):
        PlayGridWorld(task=7)


def test_play_demos_visit_several_goals_without_rewards():
    env = PlayGridWorld()
    demos = generate_play_demos(env, 10, seed=0)
    visited = set()
    for ep in demos.episodes:
        assert np.all(np.isnan(ep.rewards))
        for s in ep.states:
            for g in range(env.n_tasks):
                if env.in_goal(s, g):
                    visited.add(g)
    assert len(visited) == env.n_tasks


# -- discretisation -----------------------------------------------------------


def test_bang_bang_sizes_and_guard():
    bb2 = bang_bang_candidates(2, 2)
    assert sorted(map(tuple, bb2.table)) == [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    bb3 = bang_bang_candidates(3, 2)
    assert bb3.K == 9 and any(np.all(row == 0) for row in bb3.table)
    assert bang_bang_candidates(5, 5).K == 3125
    with pytest.raises(InputError):
        bang_bang_candidates(5, 9)
    with pytest.raises(InputError):
        bang_bang_candidates(1, 2)


def test_discretized_step_examples():
    four = FixedCandidates(np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]), "bangbang")
    denv = DiscretizedEnv(GridWorld(), four)
    nxt, _, _ = discretized_step(denv, np.array([0.5, 0.5]), 0)
    np.testing.assert_allclose(nxt, [0.55, 0.5])
    with pytest.raises(StructuralError):
        discretized_step(denv, np.array([0.5, 0.5]), 4)
    diag = DiscretizedEnv(GridWorld(), FixedCandidates(np.array([[1.0, 1.0]]), "bangbang"))
    state = diag.reset(np.random.default_rng(0))
    done = False
    while not done:
        prev = state
        state, _, done = diag.step(0)
        np.testing.assert_allclose(state - prev, DIAGONAL * 0.05, atol=1e-12)


def test_discretized_step_is_two_stage_composition():
    gen = random_candidates(2, 2, 4, seed=0, trunk_hidden=8, head_hidden=8)
    env = GridWorld()
    denv = DiscretizedEnv(env, gen)
    rng = np.random.default_rng(0)
    for _ in range(100):
        s = rng.uniform(0, 1, 2)
        k = int(rng.integers(4))
        got = discretized_step(denv, s, k)
        want = env.transition(s, gen.actions(s)[k])
        np.testing.assert_array_equal(got[0], want[0])
        assert got[1:] == want[1:]


def test_discretized_env_reproducible_from_seed():
    def run(seed):
        denv = DiscretizedEnv(GridWorld(), bang_bang_candidates(3, 2))
        rng = np.random.default_rng(seed)
        out = [denv.reset(rng)]
        for _ in range(30):
            out.append(denv.step(int(rng.integers(denv.K)))[0])
        return np.array(out)

    np.testing.assert_array_equal(run(4), run(4))


def test_discretized_env_dimension_check():
    with pytest.raises(StructuralError):
        DiscretizedEnv(GridWorld(), FixedCandidates(np.zeros((2, 3)), "bangbang"))
