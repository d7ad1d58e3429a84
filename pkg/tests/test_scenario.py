import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from radloc.model import SensorPose, SourceParams, expected_intensity
from radloc.scenario import (
    Environment,
    PriorPointSet,
    Scenario,
    ScenarioError,
    bundled_path,
    bundled_scenario,
    cell_pitch,
    generate_measurements,
    grid_scenario,
    lawnmower_trajectory,
    load_prior_points,
    load_scenario,
    parse_scenario,
    read_measurements,
    room_surface_points,
    save_scenario,
    scenario_to_dict,
    stream,
    write_measurements,
    write_prior_points,
)

ENV10 = Environment(2, ((0, 1000), (0, 1000)))


def small_scenario(sources, seed=0, dwell_s=10.0, background=2.0, rows=5, cols=5):
    env = Environment(2, ((0, 1000), (0, 1000)), background=background)
    return Scenario(env, sources, lawnmower_trajectory(env, rows, cols), seed, dwell_s)


class TestEnvironment:
    def test_bad_bounds(self):
        with pytest.raises(ValueError):
            Environment(2, ((0, 0), (0, 10)))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            Environment(3, ((0, 1), (0, 1)))

    def test_scenario_rejects_out_of_bounds_source(self):
        with pytest.raises(ValueError):
            Scenario(ENV10, [SourceParams((2000, 0), 1.0)], lawnmower_trajectory(ENV10, 2, 2))


class TestLawnmower:
    def test_ten_by_ten(self):
        assert len(lawnmower_trajectory(ENV10, 10, 10)) == 100

    def test_single_pose_at_center(self):
        (p,) = lawnmower_trajectory(ENV10, 1, 1)
        assert p.position == (500.0, 500.0)

    def test_serpentine_adjacency(self):
        poses = lawnmower_trajectory(ENV10, 10, 10)
        steps = np.diff([p.position for p in poses], axis=0)
        # exactly one axis moves by exactly one pitch
        assert np.all(np.sort(np.abs(steps), axis=1) == [0.0, 100.0])

    def test_rejects_zero_rows(self):
        with pytest.raises(ValueError):
            lawnmower_trajectory(ENV10, 0, 3)

    def test_constant_height(self):
        assert {p.height for p in lawnmower_trajectory(ENV10, 4, 7, height=80.0)} == {80.0}

    def test_three_d_layers(self):
        env = Environment(3, ((0, 800), (0, 600), (0, 300)))
        poses = lawnmower_trajectory(env, 6, 8, 50.0, [50.0, 150.0, 250.0])
        assert len(poses) == 144
        assert sorted({p.position[2] for p in poses}) == [50.0, 150.0, 250.0]
        # the second layer starts where the first ended
        assert poses[48].position[:2] == poses[47].position[:2]

    @given(
        st.floats(-5000, 5000),
        st.floats(-5000, 5000),
        st.floats(1, 5000),
        st.floats(1, 5000),
        st.integers(1, 25),
        st.integers(1, 25),
    )
    @settings(max_examples=200)
    def test_poses_inside_bounds(self, x0, y0, w, h, rows, cols):
        env = Environment(2, ((x0, x0 + w), (y0, y0 + h)))
        poses = lawnmower_trajectory(env, rows, cols)
        assert len(poses) == rows * cols
        assert all(env.contains(p.position) for p in poses)

    def test_cell_pitch(self):
        scn = grid_scenario(1, 0)
        assert cell_pitch(scn) == 200.0


class TestGenerateMeasurements:
    def test_no_sources_no_background(self):
        ms = generate_measurements(small_scenario([], background=0.0))
        assert [m.count for m in ms] == [0] * 25

    def test_deterministic(self):
        scn = small_scenario([SourceParams((300, 300), 20.0)], seed=5)
        assert generate_measurements(scn) == generate_measurements(scn)

    def test_time_steps_redraw_noise(self):
        scn = small_scenario([SourceParams((300, 300), 20.0)], seed=5)
        a, b = generate_measurements(scn, 0), generate_measurements(scn, 1)
        assert [m.count for m in a] != [m.count for m in b]
        assert {m.time_step for m in b} == {1}

    def test_frozen_counts_are_floor_of_rate(self):
        scn = small_scenario([SourceParams((300, 300), 20.0)])
        for m in generate_measurements(scn, 3, freeze=True):
            assert m.count == int(np.floor(expected_intensity(m.pose, scn.truth_sources)))

    def test_near_source_beats_far_corner(self):
        src = SourceParams((100, 100), 20.0)
        near = far = 0.0
        for seed in range(100):
            ms = generate_measurements(small_scenario([src], seed=seed))
            d = [np.hypot(m.pose.position[0] - 100, m.pose.position[1] - 100) for m in ms]
            near += ms[int(np.argmin(d))].count
            far += ms[int(np.argmax(d))].count
        assert near > far

    def test_unit_dwell_sample_mean(self):
        # with a one-second dwell the reading is a plain Poisson count
        scn = small_scenario([SourceParams((400, 600), 0.5)], dwell_s=1.0)
        lam = np.array([expected_intensity(p, scn.truth_sources) for p in scn.trajectory])
        counts = np.array(
            [[m.count for m in generate_measurements(dataclasses.replace(scn, seed=s))] for s in range(200)]
        )
        assert np.all(np.abs(counts.mean(axis=0) - lam) <= 4 * np.sqrt(lam) / np.sqrt(200))

    def test_truncated_rate_sample_mean(self):
        # default dwell: reading = floor(Poisson(rate * dwell) / dwell); oracle from the exact pmf
        scn = small_scenario([SourceParams((400, 600), 0.5)])
        dwell = scn.dwell_s
        lam = np.array([expected_intensity(p, scn.truth_sources) for p in scn.trajectory])
        k = np.arange(0, 20000)
        mean = np.array([np.sum(np.floor(k / dwell) * stats.poisson.pmf(k, l * dwell)) for l in lam])
        var = np.array([np.sum(np.floor(k / dwell) ** 2 * stats.poisson.pmf(k, l * dwell)) for l in lam]) - mean**2
        counts = np.array(
            [[m.count for m in generate_measurements(dataclasses.replace(scn, seed=s))] for s in range(200)]
        )
        assert np.all(np.abs(counts.mean(axis=0) - mean) <= 4 * np.sqrt(var) / np.sqrt(200))


class TestScenarioFiles:
    def test_round_trip(self, tmp_path):
        scn = grid_scenario(3, 11)
        save_scenario(scn, tmp_path / "s.json")
        back = load_scenario(tmp_path / "s.json")
        assert back == scn
        assert back.trajectory == scn.trajectory

    def test_round_trip_explicit_dipole_full_precision(self, tmp_path):
        env = Environment(2, ((0, 1000.1), (0, 999.7)), background=1.234567890123)
        poses = [SensorPose((1 / 3, 2 / 7), 97.123456789, 0.9, 1.5), SensorPose((500.5, 10.25))]
        scn = Scenario(env, [SourceParams((100 / 3, 200 / 7), 11.1, (0.1, -7 / 9))], poses, 42, 3.5)
        save_scenario(scn, tmp_path / "e.json")
        back = load_scenario(tmp_path / "e.json")
        assert back == scn

    def test_missing_bounds_names_field(self):
        text = json.dumps({"dimension": 2, "sources": [], "trajectory": {"type": "lawnmower", "rows": 1, "cols": 1}})
        with pytest.raises(ScenarioError, match="bounds"):
            parse_scenario(text)

    def test_bad_field_names_line(self):
        d = scenario_to_dict(grid_scenario(1, 0))
        d["dimension"] = 4
        text = json.dumps(d, indent=2)
        with pytest.raises(ScenarioError, match=r"dimension.*line 2"):
            parse_scenario(text)

    def test_malformed_json_reports_line(self):
        with pytest.raises(ScenarioError, match="line 3"):
            parse_scenario('{\n "dimension": 2,\n "bounds": [,\n}')

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(ScenarioError, match="nope.json"):
            load_scenario(tmp_path / "nope.json")

    def test_meters_converted(self):
        text = json.dumps(
            {
                "dimension": 2,
                "units": "m",
                "bounds": [[0, 10], [0, 10]],
                "sources": [{"position": [2, 3], "strength_uCi": 5}],
                "trajectory": {"type": "lawnmower", "rows": 2, "cols": 2, "height_cm": 1},
            }
        )
        scn = parse_scenario(text)
        assert scn.environment.bounds == ((0.0, 1000.0), (0.0, 1000.0))
        assert scn.truth_sources[0].position == (200.0, 300.0)
        assert scn.trajectory[0].height == 100.0

    def test_fig5_bundle(self):
        scn = bundled_scenario("fig5_3src")
        assert len(scn.truth_sources) == 3
        assert len(scn.trajectory) == 100

    def test_run_section_validated(self):
        d = scenario_to_dict(grid_scenario(1, 0))
        d["run"] = {"particles": "many"}
        with pytest.raises(ScenarioError, match="run"):
            parse_scenario(json.dumps(d))
        d["run"] = {"colour": 1}
        with pytest.raises(ScenarioError, match="colour"):
            parse_scenario(json.dumps(d))

    def test_bundled_prior_path_resolved(self):
        scn = bundled_scenario("room_3d")
        assert scn.run_defaults["prior"] == str(bundled_path("room_3d_prior.csv"))

    def test_measurement_csv_round_trip(self, tmp_path):
        ms = generate_measurements(grid_scenario(2, 3))
        write_measurements(ms, tmp_path / "m.csv")
        assert read_measurements(tmp_path / "m.csv") == ms
        header = (tmp_path / "m.csv").read_text().splitlines()[0]
        assert header == "time_step,x_cm,y_cm,height_cm,efficiency,background_cps,count_cps"


class TestPriorPoints:
    def test_three_columns(self, tmp_path):
        pts = np.random.default_rng(0).uniform(0, 100, (57, 3))
        np.savetxt(tmp_path / "p.csv", pts, delimiter=",")
        prior = load_prior_points(tmp_path / "p.csv", 3)
        assert prior.points.shape == (57, 3)
        assert prior.weights is None

    def test_header_and_weights_round_trip(self, tmp_path):
        prior = PriorPointSet(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([0.25, 0.75]))
        write_prior_points(prior, tmp_path / "p.csv")
        back = load_prior_points(tmp_path / "p.csv")
        np.testing.assert_array_equal(back.points, prior.points)
        np.testing.assert_array_equal(back.weights, prior.weights)

    def test_under_sampling_is_deterministic(self, tmp_path):
        np.savetxt(tmp_path / "p.csv", np.random.default_rng(1).uniform(0, 1, (100_000, 3)), delimiter=",")
        a = load_prior_points(tmp_path / "p.csv", 3, n_samples=2000, seed=4)
        b = load_prior_points(tmp_path / "p.csv", 3, n_samples=2000, seed=4)
        assert len(a) == 2000
        np.testing.assert_array_equal(a.points, b.points)

    def test_empty_file_is_an_error(self, tmp_path):
        (tmp_path / "p.csv").write_text("")
        with pytest.raises(ScenarioError):
            load_prior_points(tmp_path / "p.csv", 3)

    def test_dimension_mismatch(self, tmp_path):
        np.savetxt(tmp_path / "p.csv", np.ones((4, 2)), delimiter=",")
        with pytest.raises(ScenarioError, match="3-D"):
            load_prior_points(tmp_path / "p.csv", 3)

    def test_room_surface_points_lie_on_surfaces(self):
        env = Environment(3, ((0, 800), (0, 600), (0, 300)))
        prior = room_surface_points(env, 3000, stream(1), tops=[(450, 650, 350, 500, 80)])
        p = prior.points
        assert len(prior) == 3000
        on_floor = p[:, 2] == 0
        on_wall = (p[:, 0] == 0) | (p[:, 0] == 800) | (p[:, 1] == 0) | (p[:, 1] == 600)
        on_table = (p[:, 2] == 80) & (p[:, 0] >= 450) & (p[:, 0] <= 650) & (p[:, 1] >= 350) & (p[:, 1] <= 500)
        assert np.all(on_floor | on_wall | on_table)
        assert all(env.contains(q) for q in p)

    def test_bundled_room_prior_matches_environment(self):
        scn = bundled_scenario("room_3d")
        prior = load_prior_points(scn.run_defaults["prior"], scn.environment.dimension)
        assert len(prior) == 2000
        assert all(scn.environment.contains(q) for q in prior.points)
