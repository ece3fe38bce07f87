"""Deterministic synthetic driving environment.

Generates episodes of ego-view frames plus low-level driving actions
(speed, steering) from a kinematic bicycle model, with byte-deterministic
flat-shaded rendering. Serves as the data source for codec pretraining and
world-model training, and carries an exact kinematics oracle for tests.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

EPISODE_SCHEMA_VERSION = 1

TWO_PI = 2.0 * math.pi


class EpisodeFormatError(RuntimeError):
    """Episode directory exists but its content does not match the schema."""


def wrap_angle(a):
    """Wrap an angle (scalar or array) to (-pi, pi]."""
    return (a - math.pi) % (-TWO_PI) + math.pi


@dataclass(frozen=True)
class CarState:
    x: float
    y: float
    heading: float
    wheelbase: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.heading, self.wheelbase)):
            raise ValueError("CarState fields must be finite")
        if self.wheelbase <= 0:
            raise ValueError(f"wheelbase must be > 0, got {self.wheelbase}")
        object.__setattr__(self, "heading", float(wrap_angle(self.heading)))


@dataclass(frozen=True)
class ActionRecord:
    speed: float      # m/s, >= 0
    steering: float   # rad

    def __post_init__(self):
        if not (math.isfinite(self.speed) and math.isfinite(self.steering)):
            raise ValueError("ActionRecord fields must be finite")
        if self.speed < 0:
            raise ValueError(f"speed must be >= 0, got {self.speed}")


@dataclass(frozen=True)
class SceneConfig:
    """Rendering geometry. All flat-shaded, no anti-aliasing: byte deterministic."""
    width: int = 64
    height: int = 64
    camera_height: float = 1.4           # m above ground
    focal_rel: float = 0.7               # focal length in units of image width
    road_half_width: float = 3.5         # m
    edge_line_width: float = 0.25        # m, solid white edge lines
    dash_half_width: float = 0.15        # m, center dash lateral half extent
    dash_period: float = 4.0             # m
    dash_length: float = 2.0             # m
    max_draw_distance: float = 60.0      # m, ground beyond renders as far-road/grass
    n_blocks: int = 30                   # seeded roadside blocks
    block_region: float = 400.0          # m of road length populated with blocks
    block_seed: int = 7
    hud_height_frac: float = 0.25        # dashboard strip height, fraction of H

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("frame size must be positive")
        if self.road_half_width <= 0 or self.dash_period <= 0:
            raise ValueError("invalid scene geometry")
        if not 0.0 < self.hud_height_frac < 0.5:
            raise ValueError("hud_height_frac must be in (0, 0.5)")


@dataclass(frozen=True)
class WorldConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    episode_len: int = 40          # number of frames per episode
    dt: float = 0.25               # s between frames
    substeps: int = 50             # Euler substeps per frame transition
    wheelbase: float = 2.5         # m
    max_speed: float = 15.0        # m/s
    max_steer: float = 0.5         # rad
    max_accel: float = 3.0         # m/s^2, hard per-step speed-change bound
    max_steer_rate: float = 0.6    # rad/s, hard per-step steering-change bound
    # Ramp-and-hold action profile parameters. Each channel ramps toward a
    # random target at a constant per-step rate, holds, then retargets.
    # Ranges are gentle (v^2 tan(delta) of order 1) so the forward Euler
    # integration at dt/substeps stays within 1e-3 of a much finer oracle.
    speed_target_range: tuple = (2.0, 6.0)
    steer_target_range: tuple = (-0.015, 0.015)
    speed_rate_frac: tuple = (0.2, 0.45)   # ramp rate as a fraction of max_accel*dt
    steer_rate_frac: tuple = (0.006, 0.018)  # fraction of max_steer_rate*dt
    hold_range: tuple = (2, 4)             # steps spent holding a reached target

    def __post_init__(self):
        if self.episode_len < 2:
            raise ValueError("episode_len must be >= 2")
        if self.dt <= 0 or self.substeps < 1:
            raise ValueError("dt must be > 0 and substeps >= 1")
        if self.max_speed <= 0 or self.max_steer <= 0:
            raise ValueError("action bounds must be positive")
        if self.max_accel <= 0 or self.max_steer_rate <= 0:
            raise ValueError("rate bounds must be positive")
        if self.wheelbase <= 0:
            raise ValueError("wheelbase must be > 0")


@dataclass
class Episode:
    """One generated driving sequence.

    frames: (T, H, W, 3) float32 in [0, 1]
    actions: (T-1, 2) float64, columns (speed, steering); actions[k] drives
        the transition from frame k to frame k+1
    states: (T, 3) float64, columns (x, y, heading)
    """
    frames: np.ndarray
    actions: np.ndarray
    states: np.ndarray
    dt: float
    seed: int
    wheelbase: float

    def __post_init__(self):
        t = len(self.frames)
        if len(self.actions) != t - 1 or len(self.states) != t:
            raise ValueError(
                f"length invariant violated: {t} frames, {len(self.actions)} actions, "
                f"{len(self.states)} states"
            )
        if not (np.isfinite(self.actions).all() and np.isfinite(self.states).all()):
            raise ValueError("episode contains non-finite values")

    def __len__(self):
        return len(self.frames)

    def action_records(self):
        return [ActionRecord(float(s), float(d)) for s, d in self.actions]

    def car_states(self):
        return [CarState(float(x), float(y), float(h), self.wheelbase) for x, y, h in self.states]


# ---------------------------------------------------------------------------
# Kinematics
# ---------------------------------------------------------------------------

def step_kinematics(state: CarState, action: ActionRecord, dt: float, substeps: int = 50) -> CarState:
    """Advance the kinematic bicycle model by dt using forward Euler substeps.

    x' = v cos(theta), y' = v sin(theta), theta' = (v / L) tan(delta).
    Pure function of its inputs.
    """
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    if substeps < 1:
        raise ValueError(f"substeps must be >= 1, got {substeps}")
    h = dt / substeps
    x, y, th = state.x, state.y, state.heading
    v = action.speed
    dth = (v / state.wheelbase) * math.tan(action.steering)
    for _ in range(substeps):
        x += v * math.cos(th) * h
        y += v * math.sin(th) * h
        th += dth * h
    return CarState(x, y, th, state.wheelbase)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

_SKY_TOP = np.array([0.45, 0.62, 0.85], dtype=np.float32)
_SKY_BOTTOM = np.array([0.70, 0.80, 0.92], dtype=np.float32)
_GRASS = np.array([0.22, 0.45, 0.20], dtype=np.float32)
_ASPHALT = np.array([0.32, 0.32, 0.34], dtype=np.float32)
_ASPHALT_FAR = np.array([0.40, 0.40, 0.42], dtype=np.float32)
_EDGE_LINE = np.array([0.92, 0.92, 0.92], dtype=np.float32)
_DASH = np.array([0.90, 0.78, 0.25], dtype=np.float32)
_HUD_BG = np.array([0.10, 0.10, 0.12], dtype=np.float32)
_HUD_BAR = np.array([0.95, 0.55, 0.15], dtype=np.float32)


def _block_table(scene: SceneConfig) -> np.ndarray:
    """Seeded roadside blocks: columns (x, y, half_w, height, r, g, b)."""
    rng = np.random.default_rng(scene.block_seed)
    n = scene.n_blocks
    bx = np.sort(rng.uniform(-20.0, scene.block_region, size=n))
    side = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    by = side * (scene.road_half_width + rng.uniform(2.0, 6.0, size=n))
    half_w = rng.uniform(0.8, 2.0, size=n)
    height = rng.uniform(1.5, 4.5, size=n)
    color = rng.uniform(0.35, 0.85, size=(n, 3))
    return np.column_stack([bx, by, half_w, height, color])


def render_frame(state: CarState, scene: SceneConfig, hud_frac: float = None) -> np.ndarray:
    """Render the ego view as (H, W, 3) float32 in [0, 1]. Deterministic.

    hud_frac, if given, draws a dashboard strip along the bottom rows with a
    horizontal speed bar filling that fraction of the frame width (the
    fractional end pixel is blended, so the bar varies continuously).
    """
    H, W = scene.height, scene.width
    f = scene.focal_rel * W
    img = np.empty((H, W, 3), dtype=np.float32)

    rows = np.arange(H, dtype=np.float64)
    cols = np.arange(W, dtype=np.float64)
    v = rows - (H / 2.0 - 0.5)   # >0 below optical center
    u = cols - (W / 2.0 - 0.5)

    # Sky: everything at or above the horizon row.
    sky_rows = v <= 0.5
    frac = (rows / max(H - 1, 1)).astype(np.float32)[:, None]
    sky = (_SKY_TOP[None, None, :] * (1 - frac[sky_rows, :, None])
           + _SKY_BOTTOM[None, None, :] * frac[sky_rows, :, None])
    img[sky_rows] = np.broadcast_to(sky, (sky_rows.sum(), W, 3))

    # Ground: back-project each below-horizon pixel onto the z=0 plane.
    g_rows = ~sky_rows
    vg = v[g_rows]
    d = scene.camera_height * f / vg                      # forward distance, (Rg,)
    lat = u[None, :] * d[:, None] / f                     # rightward offset, (Rg, W)
    dist = d[:, None]
    cos_t, sin_t = math.cos(state.heading), math.sin(state.heading)
    px = state.x + dist * cos_t + lat * sin_t
    py = state.y + dist * sin_t - lat * cos_t

    far = dist > scene.max_draw_distance
    abs_y = np.abs(py)
    on_road = abs_y <= scene.road_half_width
    edge = on_road & (abs_y >= scene.road_half_width - scene.edge_line_width)
    dash = (np.abs(py) <= scene.dash_half_width) & (np.mod(px, scene.dash_period) < scene.dash_length)

    ground = np.where(on_road[..., None],
                      np.where(far[..., None], _ASPHALT_FAR, _ASPHALT),
                      _GRASS[None, None, :]).astype(np.float32)
    ground[edge & ~far] = _EDGE_LINE
    ground[dash & on_road & ~far] = _DASH
    img[g_rows] = ground

    # Roadside blocks, painter's algorithm far-to-near. Blocks live off-road,
    # so the central road band stays a pure function of (x mod dash_period, y, heading).
    blocks = _block_table(scene)
    dxb = blocks[:, 0] - state.x
    dyb = blocks[:, 1] - state.y
    zf = dxb * cos_t + dyb * sin_t           # camera-forward
    xr = dxb * sin_t - dyb * cos_t           # camera-right (sign flipped below)
    xr = -xr
    visible = (zf > 1.0) & (zf < scene.max_draw_distance)
    order = np.argsort(-zf)
    horizon = H / 2.0 - 0.5
    for i in order:
        if not visible[i]:
            continue
        z = zf[i]
        u0 = f * (xr[i] - blocks[i, 2]) / z + (W / 2.0 - 0.5)
        u1 = f * (xr[i] + blocks[i, 2]) / z + (W / 2.0 - 0.5)
        v_bot = f * scene.camera_height / z + horizon
        v_top = f * (scene.camera_height - blocks[i, 3]) / z + horizon
        c0, c1 = max(int(math.ceil(u0)), 0), min(int(math.floor(u1)) + 1, W)
        r0, r1 = max(int(math.ceil(v_top)), 0), min(int(math.floor(v_bot)) + 1, H)
        if c0 < c1 and r0 < r1:
            img[r0:r1, c0:c1] = blocks[i, 4:7].astype(np.float32)

    if hud_frac is not None:
        n_rows = max(1, int(round(scene.hud_height_frac * H)))
        strip = img[H - n_rows:]
        strip[:] = _HUD_BG
        bar = min(max(float(hud_frac), 0.0), 1.0) * W
        full = int(bar)
        strip[:, :full] = _HUD_BAR
        if full < W:
            frac = np.float32(bar - full)
            strip[:, full] = frac * _HUD_BAR + (1 - frac) * _HUD_BG

    np.clip(img, 0.0, 1.0, out=img)
    return img


# ---------------------------------------------------------------------------
# Episode generation
# ---------------------------------------------------------------------------

def _ramp_hold(n, rng, lo, hi, max_step, rate_frac, hold_range, bounce=False):
    """Piecewise-linear profile: ramp to a target at a constant per-step
    rate <= max_step, hold it for a few steps, retarget.

    With bounce=True the targets alternate between the range endpoints
    (triangle waves with a random per-ramp rate); otherwise each target is
    drawn uniformly from the range."""
    out = np.empty(n)
    v = rng.uniform(lo, hi)
    # bounce starts toward the farther endpoint (flipped on first use)
    target = lo if (hi - v) >= (v - lo) else hi
    k = 0
    while k < n:
        if bounce:
            target = lo if target == hi else hi
        else:
            target = rng.uniform(lo, hi)
        rate = rng.uniform(*rate_frac) * max_step
        while k < n and abs(target - v) > rate:
            v += math.copysign(rate, target - v)
            out[k] = v
            k += 1
        if k < n:
            v = target
            out[k] = v
            k += 1
        for _ in range(int(rng.integers(hold_range[0], hold_range[1] + 1))):
            if k >= n:
                break
            out[k] = v
            k += 1
    return out


def _action_profile(config: WorldConfig, rng: np.random.Generator) -> np.ndarray:
    """Ramp-and-hold (speed, steering) profile.

    Per-step changes never exceed max_accel*dt and max_steer_rate*dt, so the
    smoothness bound holds exactly for every seed. Ramps make short action
    windows informative: the local slope extrapolates the near future. Speed
    bounces between the range endpoints so a two-action window pins the
    whole ramp; steering retargets randomly.
    """
    n = config.episode_len - 1
    speed = _ramp_hold(n, rng, *config.speed_target_range,
                       max_step=config.max_accel * config.dt,
                       rate_frac=config.speed_rate_frac, hold_range=config.hold_range,
                       bounce=True)
    steer = _ramp_hold(n, rng, *config.steer_target_range,
                       max_step=config.max_steer_rate * config.dt,
                       rate_frac=config.steer_rate_frac, hold_range=config.hold_range)
    return np.column_stack([speed, steer])


def generate_episode(config: WorldConfig, seed: int) -> Episode:
    """Generate one episode. Pure function of (config, seed)."""
    rng = np.random.default_rng(seed)
    actions = _action_profile(config, rng)
    state = CarState(
        x=float(rng.uniform(0.0, 100.0)),
        y=float(rng.uniform(-1.0, 1.0)),
        heading=float(rng.uniform(-0.03, 0.03)),
        wheelbase=config.wheelbase,
    )
    states = [state]
    for speed, steering in actions:
        state = step_kinematics(state, ActionRecord(float(speed), float(steering)),
                                config.dt, config.substeps)
        states.append(state)
    # Frame t shows the speed commanded at t on the dashboard HUD, so the
    # visual future depends on the future actions, not just the geometry.
    frames = np.stack([
        render_frame(s, config.scene,
                     hud_frac=actions[min(t, len(actions) - 1), 0] / config.max_speed)
        for t, s in enumerate(states)])
    state_arr = np.array([[s.x, s.y, s.heading] for s in states], dtype=np.float64)
    return Episode(frames=frames, actions=actions.astype(np.float64), states=state_arr,
                   dt=config.dt, seed=seed, wheelbase=config.wheelbase)


# ---------------------------------------------------------------------------
# Disk format
# ---------------------------------------------------------------------------

def save_episode(ep: Episode, path) -> None:
    """Write an episode directory: manifest.json + frames.npz + trajectory.csv."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema_version": EPISODE_SCHEMA_VERSION,
        "seed": int(ep.seed),
        "dt": float(ep.dt),
        "wheelbase": float(ep.wheelbase),
        "n_frames": int(len(ep.frames)),
        "n_actions": int(len(ep.actions)),
        "height": int(ep.frames.shape[1]),
        "width": int(ep.frames.shape[2]),
        "pixel_mean": float(ep.frames.mean()),
        "pixel_std": float(ep.frames.std()),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    np.savez_compressed(path / "frames.npz", frames=ep.frames)
    with open(path / "trajectory.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "speed_mps", "steering_rad", "x", "y", "heading"])
        for t in range(len(ep.frames)):
            if t < len(ep.actions):
                act = [repr(float(ep.actions[t, 0])), repr(float(ep.actions[t, 1]))]
            else:
                act = ["", ""]  # final state has no outgoing action
            writer.writerow([t] + act + [repr(float(v)) for v in ep.states[t]])


def load_episode(path) -> Episode:
    """Load an episode directory, validating against its manifest."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no episode manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise EpisodeFormatError(f"corrupt manifest at {manifest_path}: {e}") from e
    version = manifest.get("schema_version")
    if version != EPISODE_SCHEMA_VERSION:
        raise EpisodeFormatError(
            f"episode schema version mismatch at {path}: "
            f"expected {EPISODE_SCHEMA_VERSION}, got {version}")

    n_frames = manifest["n_frames"]
    try:
        with np.load(path / "frames.npz") as npz:
            frames = npz["frames"]
    except (OSError, KeyError, ValueError) as e:
        raise EpisodeFormatError(f"unreadable frame data in {path}: {e}") from e
    if frames.shape[0] != n_frames:
        raise EpisodeFormatError(
            f"truncated frame data in {path}: missing frame {frames.shape[0]} "
            f"(expected {n_frames} frames, found {frames.shape[0]})")
    if frames.shape[1:] != (manifest["height"], manifest["width"], 3):
        raise EpisodeFormatError(
            f"frame shape mismatch in {path}: expected "
            f"({manifest['height']}, {manifest['width']}, 3), got {frames.shape[1:]}")

    actions = np.zeros((manifest["n_actions"], 2), dtype=np.float64)
    states = np.zeros((n_frames, 3), dtype=np.float64)
    with open(path / "trajectory.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["t", "speed_mps", "steering_rad", "x", "y", "heading"]:
            raise EpisodeFormatError(f"unexpected trajectory header in {path}: {header}")
        rows = list(reader)
    if len(rows) != n_frames:
        raise EpisodeFormatError(
            f"trajectory row count mismatch in {path}: expected {n_frames}, got {len(rows)}")
    for row in rows:
        t = int(row[0])
        if t < manifest["n_actions"]:
            actions[t] = [float(row[1]), float(row[2])]
        states[t] = [float(row[3]), float(row[4]), float(row[5])]
    return Episode(frames=frames, actions=actions, states=states,
                   dt=manifest["dt"], seed=manifest["seed"], wheelbase=manifest["wheelbase"])


def episodes_equal(a: Episode, b: Episode) -> bool:
    """Field-for-field equality with bit-exact pixels."""
    return (np.array_equal(a.frames, b.frames)
            and np.array_equal(a.actions, b.actions)
            and np.array_equal(a.states, b.states)
            and a.dt == b.dt and a.seed == b.seed and a.wheelbase == b.wheelbase)
