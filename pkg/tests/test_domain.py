import json
import math

import numpy as np
import pytest

from needleplan.domain import (
    APPROACH_GATE, CONNECT_GATES, MOVE_TO_EXIT, PASS_THROUGH_GATE,
    ActionLabel, Control, Demonstration, Gate, Level, NeedleState, TraceHistory,
    action_feature_rows, action_features, check_valid, demo_from_dict, demo_to_dict,
    eval_predicates, feature_names, gate_features, generate_level, level_from_dict,
    level_to_dict, load_demo, load_level, polygon_is_simple, rollout_primitives,
    save_demo, save_level, score, step, wrap_angle, _grid_path_exists,
)
from needleplan.errors import GenerationError, InvalidArgumentError, ParseError


def simple_level(**kw):
    defaults = dict(width=40.0, height=20.0, gates=(), start_x=1.0, start_y=10.0,
                    start_theta=0.0, level_id="test")
    defaults.update(kw)
    return Level(**defaults)


class TestStep:
    def test_null_control(self):
        s = step(NeedleState(0, 0, 0), Control(0, 0))
        assert (s.x, s.y, s.theta) == (0, 0, 0)

    def test_unit_forward(self):
        s = step(NeedleState(0, 0, 0), Control(0, 1))
        assert (s.x, s.y, s.theta) == (1, 0, 0)

    def test_rotation_after_translation(self):
        # translation uses pre-update heading
        s = step(NeedleState(0, 0, 0), Control(math.pi / 2, 1))
        assert s.x == pytest.approx(1.0)
        assert s.y == pytest.approx(0.0)
        assert s.theta == pytest.approx(math.pi / 2)

    def test_theta_always_wrapped(self, rng):
        s = NeedleState(0, 0, 0)
        for _ in range(500):
            s = step(s, Control(rng.uniform(-0.5, 0.5), rng.uniform(0, 1)))
            assert -math.pi < s.theta <= math.pi


class TestRolloutPrimitives:
    def test_single_segment(self):
        states, controls = rollout_primitives(NeedleState(0, 0, 0), [(0.0, 1.0, 3.0)])
        assert np.allclose(states, [[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
        assert np.allclose(controls, [[0, 1]] * 3)

    def test_zero_durations(self):
        states, controls = rollout_primitives(NeedleState(2, 3, 0.5),
                                              [(0.1, 0.5, 0.0), (0.2, 0.7, 0.4)])
        assert states.shape == (1, 3)
        assert controls.shape == (0, 2)

    def test_matches_manual_step_chain(self, rng):
        segs = [(rng.uniform(-0.3, 0.3), rng.uniform(0, 1), rng.integers(0, 6))
                for _ in range(4)]
        states, controls = rollout_primitives(NeedleState(1, 2, 0.3), segs)
        s = NeedleState(1, 2, 0.3)
        manual = [[s.x, s.y, s.theta]]
        for u, v, t in segs:
            for _ in range(int(round(t))):
                s = step(s, Control(u, v))
                manual.append([s.x, s.y, s.theta])
        assert np.allclose(states, manual, atol=1e-9)

    def test_negative_duration_rejected(self):
        with pytest.raises(InvalidArgumentError):
            rollout_primitives(NeedleState(0, 0, 0), [(0.0, 1.0, -1.0)])

    def test_gate_stop_matches_segmentation_boundary(self):
        g = Gate(5.0, 0.0, 0.0, 2.0, 4.0)
        states, _ = rollout_primitives(NeedleState(0, 0, 0), [(0.0, 1.0, 20.0)],
                                       width=1e9, stop_gate=g, gate_stop="enter")
        # terminal state is the first one inside the gate
        assert g.contains(states[-1, 0], states[-1, 1])
        assert not g.contains(states[-2, 0], states[-2, 1])
        states2, _ = rollout_primitives(NeedleState(*states[-1]), [(0.0, 1.0, 20.0)],
                                        width=1e9, stop_gate=g, gate_stop="exit")
        assert not g.contains(states2[-1, 0], states2[-1, 1])
        assert g.contains(states2[-2, 0], states2[-2, 1])


class TestGateFeatures:
    def test_coincident_pose(self):
        g = Gate(3.0, 4.0, 0.7, 2.0, 4.0)
        f = gate_features(NeedleState(3.0, 4.0, 0.7), g)
        assert np.allclose(f, 0.0, atol=1e-12)

    def test_3_4_5_triangle(self):
        g = Gate(0.0, 0.0, 0.0, 2.0, 4.0)
        f = gate_features(NeedleState(3.0, 4.0, math.pi), g)
        assert np.allclose(f, [3.0, 4.0, 5.0, math.pi], atol=1e-12)

    def test_rotation_matrix_oracle(self, rng):
        for _ in range(30):
            g = Gate(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-3, 3), 2.0, 4.0)
            s = NeedleState(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-3, 3))
            f = gate_features(s, g)
            rel = np.array([s.x - g.x, s.y - g.y])
            c, si = math.cos(-g.theta), math.sin(-g.theta)
            local = np.array([[c, -si], [si, c]]) @ rel
            assert np.allclose(f[:2], local, atol=1e-12)
            assert f[2] == pytest.approx(np.linalg.norm(rel), abs=1e-12)
            assert f[2] == pytest.approx(np.hypot(*f[:2]), abs=1e-12)
            assert 0.0 <= f[3] <= math.pi

    def test_rigid_transform_invariance(self, rng):
        for _ in range(30):
            g = Gate(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-3, 3), 2.0, 4.0)
            s = NeedleState(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-3, 3))
            f0 = gate_features(s, g)
            rot = rng.uniform(-3, 3)
            dx, dy = rng.uniform(-4, 4, 2)
            c, si = math.cos(rot), math.sin(rot)
            def move(x, y, th):
                return (c * x - si * y + dx, si * x + c * y + dy, wrap_angle(th + rot))
            gx, gy, gth = move(g.x, g.y, g.theta)
            sx, sy, sth = move(s.x, s.y, s.theta)
            f1 = gate_features(NeedleState(sx, sy, sth),
                               Gate(gx, gy, gth, g.width, g.height))
            assert np.allclose(f0, f1, atol=1e-9)


class TestActionFeatures:
    def layout_oracle(self, label):
        """Independent schema enumeration: per-entity blocks of 4 gate
        entries (1 for the exit action), |u|, differences of all of those,
        then the tissue flag."""
        blocks = {APPROACH_GATE: 1, PASS_THROUGH_GATE: 1, CONNECT_GATES: 2,
                  MOVE_TO_EXIT: 0}[label.kind]
        base = blocks * 4 if label.kind != MOVE_TO_EXIT else 1
        return base + 1 + (base + 1) + 1

    def test_connect_layout_length(self):
        label = ActionLabel(CONNECT_GATES, (0, 1))
        # 2*(4) + 2 + (2*4+1) entries
        assert self.layout_oracle(label) == 2 * 4 + 2 + (2 * 4 + 1) == 19
        assert len(feature_names(label)) == 19

    @pytest.mark.parametrize("kind,gates,expected", [
        (APPROACH_GATE, (0,), 11), (PASS_THROUGH_GATE, (0,), 11),
        (CONNECT_GATES, (0, 1), 19), (MOVE_TO_EXIT, (), 5),
    ])
    def test_all_layout_lengths(self, kind, gates, expected):
        label = ActionLabel(kind, gates)
        assert self.layout_oracle(label) == expected
        assert len(feature_names(label)) == expected

    def test_first_step_deltas_zero(self, rng):
        level = generate_level(2, 0, seed=5, level_id="t")
        label = ActionLabel(APPROACH_GATE, (0,))
        states = rng.normal(size=(6, 3))
        controls = rng.normal(size=(6, 2))
        rows = action_feature_rows(states, controls, level, label)
        d = len(feature_names(label))
        n_core = (d - 1) // 2
        assert np.array_equal(rows[0, n_core:2 * n_core], np.zeros(n_core))
        assert not np.allclose(rows[1, n_core:2 * n_core], 0.0)

    def test_straight_motion_u_and_tissue_zero(self):
        level = generate_level(1, 0, seed=5, level_id="t")
        label = ActionLabel(APPROACH_GATE, (0,))
        states, controls = rollout_primitives(level.start_state, [(0.0, 0.8, 5.0)])
        rows = action_feature_rows(states[:-1], controls, level, label)
        names = feature_names(label)
        assert np.allclose(rows[:, names.index("abs_u")], 0.0)
        assert np.allclose(rows[:, names.index("in_tissue")], 0.0)

    def test_single_row_matches_batch(self, rng):
        level = generate_level(2, 0, seed=5, level_id="t")
        label = ActionLabel(CONNECT_GATES, (0, 1))
        states = rng.normal(size=(4, 3)) + [10, 10, 0]
        controls = rng.normal(size=(4, 2))
        rows = action_feature_rows(states, controls, level, label)
        single = action_features(0, NeedleState(*states[0]), Control(*controls[0]),
                                 level, label)
        assert np.allclose(single, rows[0], atol=1e-12)

    def test_bad_gate_reference(self):
        level = generate_level(1, 0, seed=5, level_id="t")
        with pytest.raises(InvalidArgumentError):
            action_feature_rows(np.zeros((2, 3)), np.zeros((2, 2)), level,
                                ActionLabel(APPROACH_GATE, (4,)))


class TestPredicates:
    def test_initial_state_nothing_true(self):
        level = generate_level(2, 0, seed=3, level_id="t")
        hist = TraceHistory(level)
        preds = eval_predicates(level.start_state, level, hist)
        assert preds.needle_in_gate is None
        assert not preds.has_prev_gate
        assert not preds.at_exit
        assert all(preds.gate_open)
        assert not any(preds.gate_closed)

    def test_at_exit_boundary(self):
        level = simple_level()
        hist = TraceHistory(level)
        assert eval_predicates(NeedleState(40.0 + 1e-9, 5, 0), level, hist).at_exit
        hist2 = TraceHistory(level)
        assert not eval_predicates(NeedleState(40.0, 5, 0), level, hist2).at_exit

    def test_closed_open_exclusive(self):
        level = generate_level(2, 0, seed=3, level_id="t")
        hist = TraceHistory(level)
        for x in np.linspace(1, 39, 120):
            preds = eval_predicates(NeedleState(x, 10, 0), level, hist)
            for c, o in zip(preds.gate_closed, preds.gate_open):
                assert c != o

    def test_hand_traced_two_gate_scenario(self):
        # gate 0 at x=10, gate 1 at x=20, both axis-aligned; walk straight
        # through gate 0 only
        g0 = Gate(10.0, 10.0, 0.0, 2.0, 4.0)
        g1 = Gate(20.0, 10.0, 0.0, 2.0, 4.0)
        level = simple_level(gates=(g0, g1))
        hist = TraceHistory(level)
        last = None
        for x in np.arange(1.0, 13.5, 0.5):
            last = eval_predicates(NeedleState(x, 10.0, 0.0), level, hist)
        assert last.gate_closed[0] and not last.gate_closed[1]
        assert last.gate_open[1]
        assert last.has_prev_gate

    def test_in_gate_detection(self):
        g0 = Gate(10.0, 10.0, 0.0, 2.0, 4.0)
        level = simple_level(gates=(g0,))
        hist = TraceHistory(level)
        preds = eval_predicates(NeedleState(10.0, 10.5, 0.0), level, hist)
        assert preds.needle_in_gate == 0


class TestCheckValid:
    def test_straight_across_empty_level(self):
        level = simple_level()
        states, controls = rollout_primitives(level.start_state, [(0.0, 1.0, 45.0)])
        assert check_valid(states, controls, level).valid

    def test_deep_tissue_fatal(self):
        level = simple_level(deep_tissues=([(5, 8), (9, 8), (9, 12), (5, 12)],))
        states, controls = rollout_primitives(level.start_state, [(0.0, 1.0, 10.0)])
        v = check_valid(states, controls, level)
        assert not v.valid
        assert v.reason_name == "deep_tissue"

    def test_out_of_bounds_except_right(self):
        level = simple_level()
        up = rollout_primitives(NeedleState(5, 19, math.pi / 2), [(0.0, 1.0, 4.0)])
        assert not check_valid(*up, level).valid
        right = rollout_primitives(NeedleState(39, 10, 0), [(0.0, 1.0, 4.0)])
        assert check_valid(*right, level).valid

    def test_control_bounds(self):
        level = simple_level()
        states = np.array([[1, 10, 0], [2, 10, 0]])
        bad_u = np.array([[0.5, 1.0]])
        assert check_valid(states, bad_u, level).reason_name == "control_bounds"
        bad_v = np.array([[0.0, 1.5]])
        assert check_valid(states, bad_v, level).reason_name == "control_bounds"

    def test_damage_budget_cumulative_sum_oracle(self):
        tissue = [(0, 0), (40, 0), (40, 20), (0, 20)]  # whole level is tissue
        level = simple_level(tissues=(tissue,), damage_rate=1.0, damage_budget=0.9)
        # rotate hard while creeping forward: |u| = 0.3 per step
        states, controls = rollout_primitives(NeedleState(5, 10, 0), [(0.3, 0.01, 10.0)])
        v = check_valid(states, controls, level)
        # oracle: cumulative damage crosses 0.9 at step index 3 (0.3*4 = 1.2 > 0.9)
        acc = np.cumsum(np.abs(controls[:, 0]) * level.damage_rate)
        oracle_idx = int(np.argmax(acc > level.damage_budget))
        assert not v.valid
        assert v.reason_name == "tissue_damage"
        assert v.first_bad == oracle_idx == 3

    def test_prefix_monotone(self, rng):
        level = generate_level(2, 2, seed=11, level_id="t")
        for _ in range(10):
            segs = [(rng.uniform(-0.3, 0.3), rng.uniform(0.1, 1.0), rng.integers(1, 15))
                    for _ in range(3)]
            states, controls = rollout_primitives(level.start_state, segs)
            if check_valid(states, controls, level).valid:
                for cut in range(1, states.shape[0]):
                    assert check_valid(states[:cut + 1], controls[:cut], level).valid


class TestScore:
    def test_straight_through_single_gate(self):
        g = Gate(10.0, 10.0, 0.0, 2.0, 4.0)
        level = simple_level(gates=(g,))
        states, _ = rollout_primitives(level.start_state, [(0.0, 1.0, 45.0)],
                                       width=level.width, stop_at_exit=True)
        m = score(states, level)
        assert (m.gates_entered, m.gates_cleared, m.gates_broken, m.finished) == (1, 1, 0, 1)

    def test_bar_hit_breaks(self):
        g = Gate(10.0, 10.0, 0.0, 2.0, 4.0)  # bars cover |ly| in [1, 2]
        level = simple_level(gates=(g,))
        states, _ = rollout_primitives(NeedleState(1, 11.5, 0), [(0.0, 1.0, 45.0)],
                                       width=level.width, stop_at_exit=True)
        m = score(states, level)
        assert m.gates_broken == 1
        assert m.gates_cleared == 0

    def test_out_of_order_reference_scorer(self):
        g0 = Gate(10.0, 14.0, 0.0, 2.0, 4.0)
        g1 = Gate(20.0, 6.0, 0.0, 2.0, 4.0)
        level = simple_level(gates=(g0, g1))
        # hand-built trace: cross gate 1 first, then gate 0, then exit
        path = [(1, 6), (10, 6), (16, 6), (20, 6), (24, 6), (24, 14), (16, 14),
                (8, 14), (10, 14), (13, 14), (41, 14)]
        states = []
        for i in range(len(path) - 1):
            a, b = np.array(path[i], float), np.array(path[i + 1], float)
            n = max(int(np.linalg.norm(b - a) / 0.5), 1)
            for t in np.linspace(0, 1, n, endpoint=False):
                p = a + t * (b - a)
                states.append([p[0], p[1], 0.0])
        states.append([41.0, 14.0, 0.0])
        m = score(np.array(states), level)
        # gate 1 (order-1) was traversed before gate 0 closed: not cleared
        assert m.gates_entered == 2
        assert m.gates_cleared == 1
        assert m.finished == 1

    def test_entered_monotone_under_append(self, rng):
        level = generate_level(2, 0, seed=9, level_id="t")
        states, _ = rollout_primitives(level.start_state, [(0.05, 0.8, 60.0)])
        prev = 0
        for cut in range(1, states.shape[0], 5):
            m = score(states[:cut], level)
            assert m.gates_entered >= prev
            prev = m.gates_entered


class TestGenerateLevel:
    def test_deterministic_byte_identical(self, tmp_path):
        a = generate_level(2, 2, seed=42, level_id="x")
        b = generate_level(2, 2, seed=42, level_id="x")
        pa, pb = tmp_path / "a.json", tmp_path / "b.json"
        save_level(a, pa)
        save_level(b, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_no_obstacles(self):
        level = generate_level(2, 0, seed=1, level_id="x")
        assert level.deep_tissues == ()

    def test_gate_count_and_order(self):
        level = generate_level(3, 1, seed=2, level_id="x")
        assert len(level.gates) == 3
        xs = [g.x for g in level.gates]
        assert xs == sorted(xs)

    def test_min_one_gate(self):
        with pytest.raises(InvalidArgumentError):
            generate_level(0, 0, seed=1)

    def test_feasibility_oracle_100_seeds(self):
        for seed in range(100):
            level = generate_level(2, 2, seed=seed, level_id=f"s{seed}")
            assert _grid_path_exists(level), f"seed {seed} infeasible"

    def test_angles_within_45_degrees(self):
        for seed in range(30):
            level = generate_level(2, 2, seed=seed)
            for g in level.gates:
                assert abs(g.theta) <= math.pi / 4 + 1e-12


class TestPolygonSimple:
    def test_square_simple(self):
        assert polygon_is_simple([(0, 0), (1, 0), (1, 1), (0, 1)])

    def test_bowtie_rejected(self):
        assert not polygon_is_simple([(0, 0), (1, 1), (1, 0), (0, 1)])
        with pytest.raises(InvalidArgumentError):
            simple_level(deep_tissues=([(0, 0), (1, 1), (1, 0), (0, 1)],))


class TestFiles:
    def test_level_round_trip(self, tmp_path):
        level = generate_level(2, 2, seed=5, n_tissues=1, level_id="rt")
        p = tmp_path / "level.json"
        save_level(level, p)
        r = load_level(p)
        assert level_to_dict(r) == level_to_dict(level)

    def test_demo_round_trip(self, tmp_path, demo_pairs):
        demo, _ = demo_pairs[0]
        p = tmp_path / "demo.json"
        save_demo(demo, p)
        r = load_demo(p)
        assert np.array_equal(r.states, demo.states)
        assert np.array_equal(r.controls, demo.controls)
        assert r.level_id == demo.level_id

    def test_corrupt_field_named(self, tmp_path):
        level = generate_level(1, 0, seed=5, level_id="rt")
        obj = level_to_dict(level)
        obj["gates"][0]["theta"] = "sideways"
        with pytest.raises(ParseError) as e:
            level_from_dict(obj)
        assert "gates[0]" in str(e.value)

    def test_fuzzed_field_removal(self, tmp_path):
        level = generate_level(1, 1, seed=6, level_id="rt")
        base = level_to_dict(level)
        for key in ("width", "height", "u_max", "v_max", "gates", "start",
                    "damage_rate", "damage_budget", "version", "format"):
            obj = json.loads(json.dumps(base))
            del obj[key]
            with pytest.raises(ParseError) as e:
                level_from_dict(obj)
            assert key in str(e.value) or e.value.field == key

    def test_demo_dynamics_revalidated(self, demo_pairs):
        demo, _ = demo_pairs[0]
        obj = demo_to_dict(demo)
        obj["trace"][3][1] += 0.5  # corrupt x mid-trace
        with pytest.raises(ParseError):
            demo_from_dict(obj)

    def test_demo_empty_trace(self):
        with pytest.raises(ParseError):
            demo_from_dict({"format": "needle-demo", "version": 1,
                            "level_id": "x", "trace": []})
