import math

import numpy as np
import pytest

from prophetwm import microworld as mw


def fine_euler_oracle(state, action, dt, dt_sub=1e-5):
    """Independent fine-step Euler integration used as the kinematics oracle."""
    n = int(round(dt / dt_sub))
    x, y, th = state.x, state.y, state.heading
    v = action.speed
    dth = (v / state.wheelbase) * math.tan(action.steering)
    for _ in range(n):
        x += v * math.cos(th) * dt_sub
        y += v * math.sin(th) * dt_sub
        th += dth * dt_sub
    return x, y, th


class TestStepKinematics:
    def test_straight_line(self):
        s = mw.step_kinematics(mw.CarState(0, 0, 0, 1.0), mw.ActionRecord(2.0, 0.0), 0.5)
        assert s.x == pytest.approx(1.0)
        assert s.y == pytest.approx(0.0, abs=1e-12)
        assert s.heading == pytest.approx(0.0, abs=1e-12)

    def test_axis_symmetry(self):
        s = mw.step_kinematics(mw.CarState(0, 0, math.pi / 2, 1.0),
                               mw.ActionRecord(1.0, 0.0), 1.0)
        assert s.x == pytest.approx(0.0, abs=1e-12)
        assert s.y == pytest.approx(1.0)
        assert s.heading == pytest.approx(math.pi / 2)

    def test_steering_heading_oracle(self):
        s = mw.step_kinematics(mw.CarState(0, 0, 0, 1.0), mw.ActionRecord(1.0, 0.1),
                               1.0, substeps=100)
        assert s.heading == pytest.approx(0.10033, abs=1e-3)

    def test_matches_fine_oracle(self, world_config):
        # 1 s horizons (4 steps of dt) under the world's own action profiles
        cfg = world_config
        for seed in range(20):
            rng = np.random.default_rng(seed)
            profile = mw._action_profile(cfg, rng)
            state = mw.CarState(rng.uniform(0, 100), rng.uniform(-1, 1),
                                rng.uniform(-0.3, 0.3), cfg.wheelbase)
            ox, oy, oth = state.x, state.y, state.heading
            for k in range(4):
                action = mw.ActionRecord(float(profile[k, 0]), float(profile[k, 1]))
                state = mw.step_kinematics(state, action, cfg.dt, cfg.substeps)
                ox, oy, oth = fine_euler_oracle(
                    mw.CarState(ox, oy, oth, cfg.wheelbase), action, cfg.dt)
            assert state.x == pytest.approx(ox, abs=1e-3)
            assert state.y == pytest.approx(oy, abs=1e-3)
            assert state.heading == pytest.approx(mw.wrap_angle(oth), abs=1e-3)

    def test_zero_steering_conserves_y_and_heading(self):
        state = mw.CarState(0, 2.0, 0.0, 2.5)
        for _ in range(100):
            state = mw.step_kinematics(state, mw.ActionRecord(8.0, 0.0), 0.25)
        assert state.y == pytest.approx(2.0, abs=1e-9)
        assert state.heading == pytest.approx(0.0, abs=1e-9)

    def test_arc_length_equals_speed_times_time(self):
        rng = np.random.default_rng(5)
        state = mw.CarState(0, 0, 0.3, 2.5)
        total = 0.0
        expected = 0.0
        for _ in range(30):
            action = mw.ActionRecord(rng.uniform(1, 10), rng.uniform(-0.3, 0.3))
            # accumulate substep chord lengths: the Euler path's arc length
            h = 0.25 / 50
            x, y, th = state.x, state.y, state.heading
            dth = (action.speed / state.wheelbase) * math.tan(action.steering)
            for _ in range(50):
                nx = x + action.speed * math.cos(th) * h
                ny = y + action.speed * math.sin(th) * h
                total += math.hypot(nx - x, ny - y)
                x, y, th = nx, ny, th + dth * h
            expected += action.speed * 0.25
            state = mw.step_kinematics(state, action, 0.25)
        assert total == pytest.approx(expected, rel=1e-6)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            mw.step_kinematics(mw.CarState(0, 0, 0, 1.0), mw.ActionRecord(1.0, 0.0), 0.0)
        with pytest.raises(ValueError):
            mw.ActionRecord(float("nan"), 0.0)
        with pytest.raises(ValueError):
            mw.ActionRecord(-1.0, 0.0)
        with pytest.raises(ValueError):
            mw.CarState(0, 0, 0, 0.0)

    def test_heading_wrapped(self):
        s = mw.CarState(0, 0, 3 * math.pi, 1.0)
        assert -math.pi < s.heading <= math.pi
        assert s.heading == pytest.approx(math.pi)


class TestRenderFrame:
    def test_determinism_and_range(self, world_config):
        scene = world_config.scene
        state = mw.CarState(12.0, 0.5, 0.02, 2.5)
        a = mw.render_frame(state, scene)
        b = mw.render_frame(state, scene)
        assert np.array_equal(a, b)
        assert a.shape == (scene.height, scene.width, 3)
        assert a.min() >= 0.0 and a.max() <= 1.0

    def test_dash_period_translation_aligns_road(self, world_config):
        scene = world_config.scene
        s1 = mw.CarState(10.0, 0.0, 0.0, 2.5)
        s2 = mw.CarState(10.0 + scene.dash_period, 0.0, 0.0, 2.5)
        a = mw.render_frame(s1, scene)
        b = mw.render_frame(s2, scene)
        h, w = scene.height, scene.width
        band_a = a[3 * h // 4:, 2 * w // 5:3 * w // 5]
        band_b = b[3 * h // 4:, 2 * w // 5:3 * w // 5]
        assert np.abs(band_a - band_b).mean() < 0.01

    def test_motion_changes_pixels(self, world_config):
        scene = world_config.scene
        a = mw.render_frame(mw.CarState(10.0, 0.0, 0.0, 2.5), scene)
        b = mw.render_frame(mw.CarState(11.0, 0.0, 0.0, 2.5), scene)
        assert np.abs(a - b).max() > 0

    def test_hud_bar_length_tracks_fraction(self, world_config):
        scene = world_config.scene
        state = mw.CarState(10.0, 0.0, 0.0, 2.5)
        n_rows = max(1, round(scene.hud_height_frac * scene.height))
        lengths = []
        for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
            img = mw.render_frame(state, scene, hud_frac=frac)
            strip = img[-n_rows:]
            # bar pixels are bright, background dark: count by brightness
            lengths.append((strip.mean(axis=(0, 2)) > 0.3).sum())
            assert np.array_equal(strip, np.broadcast_to(strip[:1], strip.shape))
        assert lengths == sorted(lengths)
        assert lengths[0] == 0 and lengths[-1] == scene.width

    def test_hud_fractional_pixel_continuous(self, world_config):
        scene = world_config.scene
        state = mw.CarState(10.0, 0.0, 0.0, 2.5)
        a = mw.render_frame(state, scene, hud_frac=0.500)
        b = mw.render_frame(state, scene, hud_frac=0.505)
        diff = np.abs(a - b)
        assert 0 < diff.max() < 0.25

    def test_no_hud_by_default(self, world_config):
        scene = world_config.scene
        state = mw.CarState(10.0, 0.0, 0.0, 2.5)
        plain = mw.render_frame(state, scene)
        hud = mw.render_frame(state, scene, hud_frac=0.5)
        n_rows = max(1, round(scene.hud_height_frac * scene.height))
        assert np.array_equal(plain[:-n_rows], hud[:-n_rows])
        assert not np.array_equal(plain[-n_rows:], hud[-n_rows:])


class TestGenerateEpisode:
    def test_length_contract(self):
        cfg = mw.WorldConfig(scene=mw.SceneConfig(width=32, height=32), episode_len=16)
        ep = mw.generate_episode(cfg, 11)
        assert len(ep.frames) == 16
        assert len(ep.actions) == 15
        assert len(ep.states) == 16

    def test_determinism(self, world_config):
        a = mw.generate_episode(world_config, 42)
        b = mw.generate_episode(world_config, 42)
        assert mw.episodes_equal(a, b)

    def test_states_follow_kinematics_exactly(self, world_config):
        ep = mw.generate_episode(world_config, 3)
        state = mw.CarState(*ep.states[0], wheelbase=ep.wheelbase)
        for k, (speed, steering) in enumerate(ep.actions):
            state = mw.step_kinematics(state, mw.ActionRecord(speed, steering),
                                       ep.dt, world_config.substeps)
            assert state.x == ep.states[k + 1, 0]
            assert state.y == ep.states[k + 1, 1]
            assert state.heading == ep.states[k + 1, 2]

    def test_smoothness_bound_exhaustive(self, world_config):
        # profile-level scan over 1000 seeds plus full-episode spot checks
        cfg = world_config
        bound_v = cfg.max_accel * cfg.dt + 1e-12
        bound_s = cfg.max_steer_rate * cfg.dt + 1e-12
        for seed in range(1000):
            profile = mw._action_profile(cfg, np.random.default_rng(seed))
            assert np.abs(np.diff(profile[:, 0])).max() <= bound_v
            assert np.abs(np.diff(profile[:, 1])).max() <= bound_s
            assert profile[:, 0].min() >= 0 and profile[:, 0].max() <= cfg.max_speed
            assert np.abs(profile[:, 1]).max() <= cfg.max_steer
        for seed in (0, 1, 2):
            ep = mw.generate_episode(cfg, seed)
            assert np.abs(np.diff(ep.actions[:, 0])).max() <= bound_v

    def test_frames_show_commanded_speed(self, world_config):
        cfg = world_config
        ep = mw.generate_episode(cfg, 21)
        n_rows = max(1, round(cfg.scene.hud_height_frac * cfg.scene.height))
        strips = ep.frames[:-1, -n_rows:]
        bar_px = (strips.mean(axis=(1, 3)) > 0.3).sum(axis=1)
        expected = ep.actions[:, 0] / cfg.max_speed * cfg.scene.width
        assert np.abs(bar_px - expected).max() <= 1.0

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            mw.WorldConfig(episode_len=1)
        with pytest.raises(ValueError):
            mw.WorldConfig(dt=0.0)
        with pytest.raises(ValueError):
            mw.SceneConfig(hud_height_frac=0.9)


class TestEpisodeIO:
    def test_round_trip(self, world_config, tmp_path):
        ep = mw.generate_episode(world_config, 9)
        mw.save_episode(ep, tmp_path / "ep")
        loaded = mw.load_episode(tmp_path / "ep")
        assert mw.episodes_equal(ep, loaded)

    def test_manifest_matches_content(self, world_config, tmp_path):
        import json
        ep = mw.generate_episode(world_config, 10)
        mw.save_episode(ep, tmp_path / "ep")
        manifest = json.loads((tmp_path / "ep" / "manifest.json").read_text())
        assert manifest["n_frames"] == len(ep.frames)
        assert manifest["n_actions"] == len(ep.actions)
        assert manifest["dt"] == ep.dt
        assert manifest["seed"] == ep.seed

    def test_truncated_frames_names_index(self, world_config, tmp_path):
        ep = mw.generate_episode(world_config, 12)
        mw.save_episode(ep, tmp_path / "ep")
        np.savez_compressed(tmp_path / "ep" / "frames.npz", frames=ep.frames[:7])
        with pytest.raises(mw.EpisodeFormatError, match="frame 7"):
            mw.load_episode(tmp_path / "ep")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="manifest"):
            mw.load_episode(tmp_path / "nope")

    def test_schema_version_mismatch(self, world_config, tmp_path):
        import json
        ep = mw.generate_episode(world_config, 13)
        mw.save_episode(ep, tmp_path / "ep")
        mpath = tmp_path / "ep" / "manifest.json"
        manifest = json.loads(mpath.read_text())
        manifest["schema_version"] = 99
        mpath.write_text(json.dumps(manifest))
        with pytest.raises(mw.EpisodeFormatError, match="expected 1, got 99"):
            mw.load_episode(tmp_path / "ep")
