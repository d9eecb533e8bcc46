import json

import numpy as np
import pytest

from hamflow.core import PhaseState, RngStream, state_concat
from hamflow.datagen import (
    DatasetSpec,
    KS_CRITICAL_1PCT,
    RenderSpec,
    add_observation_noise,
    dataset_trajectories,
    default_render_spec,
    generate_trajectory,
    ks_statistic_uniform,
    read_dataset,
    render_frame,
    sample_initial_state,
    scene_positions,
    system_energy,
    write_dataset,
    _generate_batch,
)
from hamflow.images import read_ppm
from hamflow.integrators import reference_rollout
from hamflow.systems import MassSpringParams, mass_spring_hamiltonian

MASS_SPRING = mass_spring_hamiltonian(MassSpringParams())


class TestSampleInitialState:
    def test_mass_spring_on_radius_circle(self):
        rng = RngStream(seed=50)
        for _ in range(200):
            s = sample_initial_state("mass_spring", (0.1, 1.0), rng)
            r = np.hypot(s.q[0], s.p[0])
            assert 0.1 <= r <= 1.0

    def test_pendulum_radius_range(self):
        rng = RngStream(seed=51)
        for _ in range(200):
            s = sample_initial_state("pendulum", (1.3, 2.3), rng)
            r = np.hypot(s.q[0], s.p[0])
            assert 1.3 <= r <= 2.3

    def test_degenerate_range_hits_circle_exactly(self):
        rng = RngStream(seed=52)
        for _ in range(50):
            s = sample_initial_state("mass_spring", (1.0, 1.0), rng)
            assert np.hypot(s.q[0], s.p[0]) == pytest.approx(1.0, abs=1e-12)

    def test_nbody_norm_and_zero_momentum(self):
        rng = RngStream(seed=53)
        for _ in range(100):
            s = sample_initial_state("two_body", (0.5, 1.5), rng)
            assert 0.5 <= np.linalg.norm(state_concat(s)) <= 1.5 + 1e-12
            total_p = s.p.reshape(2, 2).sum(axis=0)
            assert np.abs(total_p).max() < 1e-12

    def test_radii_uniform_by_ks(self):
        rng = RngStream(seed=54)
        radii = np.array(
            [
                np.linalg.norm(state_concat(sample_initial_state("mass_spring", (0.1, 1.0), rng)))
                for _ in range(10_000)
            ]
        )
        stat = ks_statistic_uniform(radii, 0.1, 1.0)
        assert stat < KS_CRITICAL_1PCT / np.sqrt(len(radii))


class TestGenerateTrajectory:
    def test_energy_conserved(self):
        # Oracle: evaluate H along the reference rollout.
        s0 = PhaseState(q=[0.8], p=[0.3])
        traj = generate_trajectory(MASS_SPRING, s0, 30, 0.125)
        e0 = MASS_SPRING.energy(s0)
        drift = max(abs(MASS_SPRING.energy(s) - e0) for s in traj.states)
        assert drift / abs(e0) < 1e-8

    def test_pendulum_fixed_point(self):
        h = system_energy("pendulum")
        traj = generate_trajectory(h, PhaseState(q=[0.0], p=[0.0]), 10, 0.125)
        for s in traj.states:
            assert s == PhaseState(q=[0.0], p=[0.0])

    def test_time_reversal(self):
        s0 = PhaseState(q=[0.5], p=[-0.7])
        fwd = generate_trajectory(MASS_SPRING, s0, 20, 0.125)
        back = generate_trajectory(MASS_SPRING, fwd.states[-1], 20, -0.125)
        assert np.abs(state_concat(back.states[-1]) - state_concat(s0)).max() < 1e-6

    def test_batch_matches_per_state_path(self):
        rng = RngStream(seed=55)
        S0 = np.stack(
            [
                state_concat(sample_initial_state("mass_spring", (0.1, 1.0), rng))
                for _ in range(5)
            ]
        )
        batch = _generate_batch(MASS_SPRING, S0, 10, 0.125)
        for i in range(5):
            traj = reference_rollout(MASS_SPRING, PhaseState(q=S0[i, :1], p=S0[i, 1:]), 10, 0.125)
            assert np.array_equal(batch[i], traj.as_array())

    def test_batch_matches_per_state_nbody(self):
        h = system_energy("two_body", softening=1e-2)
        rng = RngStream(seed=56)
        S0 = np.stack(
            [state_concat(sample_initial_state("two_body", (0.5, 1.5), rng)) for _ in range(3)]
        )
        batch = _generate_batch(h, S0, 5, 0.125)
        for i in range(3):
            traj = reference_rollout(h, PhaseState(q=S0[i, :4], p=S0[i, 4:]), 5, 0.125)
            assert np.allclose(batch[i], traj.as_array(), rtol=0, atol=1e-13)


class TestObservationNoise:
    def test_zero_noise_is_identity(self):
        traj = generate_trajectory(MASS_SPRING, PhaseState(q=[0.5], p=[0.1]), 5, 0.125)
        noisy = add_observation_noise(traj, 0.0, RngStream(seed=57))
        assert noisy.as_array() is not None
        assert np.array_equal(noisy.as_array(), traj.as_array())

    def test_empirical_noise_std(self):
        # Oracle: direct estimator over 1e5 coordinates.
        rng = RngStream(seed=58)
        traj = generate_trajectory(MASS_SPRING, PhaseState(q=[0.5], p=[0.1]), 30, 0.125)
        diffs = []
        for _ in range(1700):
            noisy = add_observation_noise(traj, 0.1, rng)
            diffs.append(noisy.as_array() - traj.as_array())
        diffs = np.concatenate([d.ravel() for d in diffs])
        assert len(diffs) >= 100_000
        assert abs(diffs.std() - 0.1) / 0.1 < 0.02


class TestRenderFrame:
    def test_center_body_peaks_at_center_with_monotone_falloff(self):
        spec = RenderSpec(image_size=32, radius_px=4.0, blur_px=1.0, half_extent=1.5)
        # Align the body with the center of pixel (16, 16); the frame center
        # itself sits on the seam between four pixels.
        offset = 0.5 / spec.scale
        frame = render_frame(spec, np.array([[offset, -offset]]))
        lum = frame.sum(axis=2).astype(float)
        center = np.unravel_index(np.argmax(lum), lum.shape)
        assert center == (16, 16)
        mid = lum[16, 16:]
        assert all(a >= b for a, b in zip(mid, mid[1:]))

    def test_empty_scene_is_black(self):
        spec = RenderSpec(image_size=16)
        frame = render_frame(spec, np.empty((0, 2)))
        assert frame.sum() == 0

    def test_rendering_deterministic(self):
        spec = RenderSpec(image_size=32)
        a = render_frame(spec, np.array([[0.3, -0.2]]))
        b = render_frame(spec, np.array([[0.3, -0.2]]))
        assert np.array_equal(a, b)

    def test_one_pixel_translation_moves_peak_by_one(self):
        spec = RenderSpec(image_size=32, radius_px=4.0, blur_px=1.0, half_extent=1.5)
        shift = 1.0 / spec.scale  # one pixel in scene units
        a = render_frame(spec, np.array([[0.0, 0.0]]))
        b = render_frame(spec, np.array([[shift, 0.0]]))
        pa = np.unravel_index(np.argmax(a.sum(axis=2)), (32, 32))
        pb = np.unravel_index(np.argmax(b.sum(axis=2)), (32, 32))
        assert pb[0] == pa[0] and pb[1] == pa[1] + 1

    def test_out_of_frame_clipping_counted(self):
        spec = RenderSpec(image_size=16, half_extent=1.0)
        render_frame(spec, np.array([[5.0, 5.0]]))
        assert spec.clipped_count == 1

    def test_pendulum_scene_positions(self):
        s = PhaseState(q=[0.0], p=[0.0])
        pos = scene_positions("pendulum", s)
        assert np.allclose(pos, [[0.0, -1.0]])


class TestWriteDataset:
    def test_layout_and_sizes(self, tmp_path):
        spec = DatasetSpec(system="mass_spring", n_train=2, n_test=1, n_steps=3, seed=7)
        manifest = write_dataset(spec, tmp_path / "ds")
        assert manifest["n_train"] == 2
        raw = (tmp_path / "ds" / "train" / "states_clean.f64").read_bytes()
        assert len(raw) == 2 * 4 * 2 * 8  # trajectories x states x 2n x 8 bytes
        raw = (tmp_path / "ds" / "test" / "states_clean.f64").read_bytes()
        assert len(raw) == 1 * 4 * 2 * 8
        assert not (tmp_path / "ds" / ".incomplete").exists()
        frame = read_ppm(tmp_path / "ds" / "train" / "frames" / "traj000000" / "step000.ppm")
        assert frame.shape == (64, 64, 3)

    def test_regeneration_is_byte_identical(self, tmp_path):
        spec = DatasetSpec(system="mass_spring", n_train=3, n_test=2, n_steps=4, seed=11)
        write_dataset(spec, tmp_path / "a")
        write_dataset(spec, tmp_path / "b")
        for rel in (
            "train/states_clean.f64",
            "train/states_noisy.f64",
            "test/states_clean.f64",
            "test/states_noisy.f64",
            "train/frames/traj000001/step002.ppm",
        ):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
        ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
        mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
        ma.pop("created_at")
        mb.pop("created_at")
        assert ma == mb

    def test_threaded_generation_is_byte_identical(self, tmp_path):
        spec = DatasetSpec(
            system="two_body", n_train=6, n_test=2, n_steps=4, seed=13, render=False
        )
        write_dataset(spec, tmp_path / "a", threads=1)
        write_dataset(spec, tmp_path / "b", threads=3)
        for rel in ("train/states_clean.f64", "test/states_noisy.f64"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_loader_round_trip(self, tmp_path):
        spec = DatasetSpec(
            system="pendulum", n_train=2, n_test=1, n_steps=5, seed=3, render=False
        )
        write_dataset(spec, tmp_path / "ds")
        data = read_dataset(tmp_path / "ds")
        assert data["train_clean"].shape == (2, 6, 2)
        trajs = dataset_trajectories(data, "train")
        assert len(trajs) == 2
        assert np.array_equal(trajs[0].as_array(), data["train_clean"][0])
        # Clean trajectories conserve the ground-truth energy.
        h = system_energy("pendulum")
        for traj in trajs:
            e = [h.energy(s) for s in traj.states]
            assert max(e) - min(e) < 1e-8 * max(1.0, abs(e[0]))

    def test_noisy_differs_from_clean(self, tmp_path):
        spec = DatasetSpec(system="mass_spring", n_train=1, n_test=1, n_steps=3, seed=5, render=False)
        write_dataset(spec, tmp_path / "ds")
        data = read_dataset(tmp_path / "ds")
        assert not np.array_equal(data["train_clean"], data["train_noisy"])

    def test_three_body_generation_finite(self, tmp_path):
        spec = DatasetSpec(
            system="three_body", n_train=4, n_test=1, n_steps=10, seed=17, render=False
        )
        write_dataset(spec, tmp_path / "ds")
        data = read_dataset(tmp_path / "ds")
        assert np.all(np.isfinite(data["train_clean"]))


def test_ks_statistic_sanity():
    rng = RngStream(seed=59)
    uniform = rng.uniform(5000, 2.0, 3.0)
    assert ks_statistic_uniform(uniform, 2.0, 3.0) < KS_CRITICAL_1PCT / np.sqrt(5000)
    skewed = np.square(rng.uniform(5000, 0.0, 1.0))
    assert ks_statistic_uniform(skewed, 0.0, 1.0) > KS_CRITICAL_1PCT / np.sqrt(5000)
