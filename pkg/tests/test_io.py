import numpy as np
import pytest

from conftest import make_state
from flockctl import io
from flockctl.ensemble import SimParams, simulate
from flockctl.errors import InputError
from flockctl.surrogate import Dataset, NetworkSpec, forward, init_network


@pytest.fixture
def run(rng):
    return simulate(make_state(rng, 3, 2), lambda s: -0.3 * s.velocities, SimParams(horizon=0.2, dt=0.01))


class TestCsv:
    def test_trajectory_roundtrip(self, run, tmp_path):
        traj, _ = run
        back = io.read_trajectory_csv(io.write_trajectory_csv(tmp_path / "t.csv", traj))
        for name in ("times", "positions", "velocities", "controls"):
            np.testing.assert_array_equal(getattr(back, name), getattr(traj, name))

    def test_trajectory_header(self, run, tmp_path):
        path = io.write_trajectory_csv(tmp_path / "t.csv", run[0])
        head = path.read_text().splitlines()[0].split(",")
        assert head[:3] == ["t", "x1_1", "x1_2"] and head[-1] == "u3_2" and len(head) == 19

    def test_trajectory_needs_empty_last_controls(self, run, tmp_path):
        path = io.write_trajectory_csv(tmp_path / "t.csv", run[0])
        lines = path.read_text().splitlines()
        lines[-1] = lines[-1].rstrip(",") + ",0" * 6
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(InputError):
            io.read_trajectory_csv(path)

    def test_moments_roundtrip(self, run, tmp_path):
        m = run[1]
        back = io.read_moments_csv(io.write_moments_csv(tmp_path / "m.csv", m))
        np.testing.assert_array_equal(back.times, m.times)
        np.testing.assert_array_equal(back.mean_velocity, m.mean_velocity)
        np.testing.assert_array_equal(back.variance, m.variance)
        assert np.all(np.isnan(back.variance_about_mean))

    def test_bounds_roundtrip(self, rng, tmp_path):
        cols = [rng.normal(size=7) for _ in range(4)]
        back = io.read_bounds_csv(io.write_bounds_csv(tmp_path / "b.csv", *cols))
        for name, col in zip(("t", "lower", "upper", "sigma2"), cols):
            np.testing.assert_array_equal(back[name], col)

    def test_columns(self, tmp_path):
        cols = {"t": [0.0, 0.1], "a": [1 / 3, np.pi]}
        back = io.read_columns_csv(io.write_columns_csv(tmp_path / "c.csv", cols))
        assert list(back) == ["t", "a"]
        np.testing.assert_array_equal(back["a"], cols["a"])
        with pytest.raises(InputError):
            io.write_columns_csv(tmp_path / "d.csv", {"t": [0.0], "a": [1.0, 2.0]})

    def test_dataset_roundtrip(self, rng, tmp_path):
        ds = Dataset(rng.normal(size=(5, 12)), rng.normal(size=(5, 6)), rng.normal(size=5),
                     rng.normal(size=(5, 12)), 3, 2)
        back = io.read_dataset_csv(io.write_dataset_csv(tmp_path / "d.csv", ds), dim=2)
        assert (back.n_agents, back.dim) == (3, 2)
        for name in ("states", "u", "V", "gradV"):
            np.testing.assert_array_equal(getattr(back, name), getattr(ds, name))
        with pytest.raises(InputError):
            io.read_dataset_csv(tmp_path / "d.csv", dim=4)


class TestModelFiles:
    @pytest.mark.parametrize("spec", [
        NetworkSpec(4, (5, 3), 2, ("tanh", "sigmoid")),
        NetworkSpec(8, (6,), 1, structure="consensus", agent_dim=2),
    ])
    def test_roundtrip_is_bit_exact(self, spec, rng, tmp_path):
        net = init_network(spec, seed=2)
        net.biases = [rng.normal(size=b.shape) for b in net.biases]
        net.metadata["loss_history"] = [0.5, np.float64(0.25)]
        back = io.load_model(io.save_model(tmp_path / "m.json", net))
        assert back.spec == net.spec and back.metadata["loss_history"] == [0.5, 0.25]
        for a, b in zip(back.weights + back.biases, net.weights + net.biases):
            np.testing.assert_array_equal(a, b)
        Z = rng.normal(size=(3, spec.input_dim))
        np.testing.assert_array_equal(forward(back, Z), forward(net, Z))

    def test_json_converts_numpy(self, tmp_path):
        obj = {"a": np.arange(3), "b": np.float64(1.5), 2: (tmp_path, np.int64(4))}
        assert io.read_json(io.write_json(tmp_path / "o.json", obj)) == {
            "a": [0, 1, 2], "b": 1.5, "2": [str(tmp_path), 4]}
