"""Closed-loop simulation: dynamics, PID, asynchronous Kalman filter and the multi-rate episode runner."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .rng import substream
from .worldgen import (FLIGHT_HEIGHT, LOOKAHEAD, CameraModel, LineWorld, TrackLost, cue_visible, render,
                       waypoint_label)

log = logging.getLogger(__name__)

CONTROL_HZ = 30
NETWORK_HZ = 8
END_TOLERANCE = 1e-6


# ---------------------------------------------------------------------------
# dynamics

@dataclass(frozen=True)
class DynamicsConfig:
    name: str = "train-sim"
    tau: float = 0.1             # actuator time constant (s)
    drag: float = 0.1            # linear drag (1/s)
    disturbance_std: float = 0.05  # stationary std of the gust acceleration (m/s^2)
    disturbance_tau: float = 0.5   # gust correlation time (s)
    max_speed: float = 1.0
    yaw_tau: float = 0.1

    @classmethod
    def profile(cls, name: str) -> DynamicsConfig:
        try:
            return PROFILES[name]
        except KeyError:
            raise ValueError(f"unknown dynamics profile {name!r}; choose from {sorted(PROFILES)}") from None

    def quiet(self) -> DynamicsConfig:
        return replace(self, disturbance_std=0.0)


PROFILES = {
    "train-sim": DynamicsConfig("train-sim", tau=0.1, drag=0.1, disturbance_std=0.05),
    # sluggish, draggier airframe with stronger gusts: the dynamics gap
    "deploy-proxy": DynamicsConfig("deploy-proxy", tau=0.3, drag=0.6, disturbance_std=0.25,
                                   disturbance_tau=1.0),
}


@dataclass
class DroneState:
    position: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, FLIGHT_HEIGHT]))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw: float = 0.0
    yaw_rate: float = 0.0
    gust: np.ndarray = field(default_factory=lambda: np.zeros(3))   # disturbance acceleration (m/s^2)

    @property
    def pose(self) -> tuple[float, float, float, float]:
        return (float(self.position[0]), float(self.position[1]), float(self.position[2]), float(self.yaw))

    def copy(self) -> DroneState:
        return DroneState(self.position.copy(), self.velocity.copy(), self.yaw, self.yaw_rate, self.gust.copy())


def body_to_world(vec, yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([c * vec[0] - s * vec[1], s * vec[0] + c * vec[1], vec[2]])


def world_to_body(vec, yaw: float) -> np.ndarray:
    return body_to_world(vec, -yaw)


def step_dynamics(state: DroneState, command, dt: float, config: DynamicsConfig,
                  rng: np.random.Generator | None = None) -> DroneState:
    """Advance one step.

    ``command`` is (vx, vy, vz, yaw_rate) in the body frame. Per axis
    dv/dt = (u - v)/tau - drag*v + gust, integrated exactly over ``dt`` with the
    command and gust held constant. The gust is an Ornstein-Uhlenbeck process.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    cmd = np.asarray(command, dtype=np.float64)
    u = body_to_world(cmd[:3], state.yaw)
    gust = state.gust
    if config.disturbance_std > 0 and rng is not None:
        a = math.exp(-dt / config.disturbance_tau)
        gust = a * gust + config.disturbance_std * math.sqrt(1 - a * a) * rng.standard_normal(3)
    v0 = state.velocity
    if config.tau <= 0:
        v1 = u.copy()
        dp = u * dt
    else:
        k = 1.0 / config.tau + config.drag
        v_inf = (u / config.tau + gust) / k
        e = math.exp(-k * dt)
        v1 = v_inf + (v0 - v_inf) * e
        dp = v_inf * dt + (v0 - v_inf) * (1 - e) / k
    speed = np.linalg.norm(v1)
    if speed > config.max_speed:
        v1 = v1 * (config.max_speed / speed)
    if config.yaw_tau <= 0:
        r1 = float(cmd[3])
        dyaw = r1 * dt
    else:
        e = math.exp(-dt / config.yaw_tau)
        r1 = float(cmd[3] + (state.yaw_rate - cmd[3]) * e)
        dyaw = cmd[3] * dt + (state.yaw_rate - cmd[3]) * config.yaw_tau * (1 - e)
    out = DroneState(state.position + dp, v1, state.yaw + dyaw, r1, np.array(gust, dtype=np.float64))
    if not (np.all(np.isfinite(out.position)) and np.all(np.isfinite(out.velocity))):
        raise FloatingPointError("non-finite drone state")
    return out


# ---------------------------------------------------------------------------
# PID

@dataclass(frozen=True)
class PIDGains:
    kp: float = 1.2
    ki: float = 0.1
    kd: float = 0.3
    integral_limit: float = 0.5
    max_speed: float = 1.0
    k_yaw: float = 1.5
    max_yaw_rate: float = 1.5


@dataclass
class PIDState:
    integral: np.ndarray = field(default_factory=lambda: np.zeros(3))
    prev_error: np.ndarray | None = None


def pid_update(error, state: PIDState, dt: float, gains: PIDGains = PIDGains()) -> tuple[np.ndarray, PIDState]:
    """Per-axis PID on a 3D position error; returns (velocity command, new state)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    e = np.asarray(error, dtype=np.float64)
    integral = np.clip(state.integral + e * dt, -gains.integral_limit, gains.integral_limit)
    deriv = np.zeros(3) if state.prev_error is None else (e - state.prev_error) / dt
    u = gains.kp * e + gains.ki * integral + gains.kd * deriv
    u = np.clip(u, -gains.max_speed, gains.max_speed)
    return u, PIDState(integral, e.copy())


def yaw_command(error, gains: PIDGains = PIDGains()) -> float:
    """Yaw rate turning the nose toward the horizontal bearing of ``error``."""
    if math.hypot(error[0], error[1]) < 0.05:
        return 0.0
    bearing = math.atan2(error[1], error[0])
    return float(np.clip(gains.k_yaw * bearing, -gains.max_yaw_rate, gains.max_yaw_rate))


# ---------------------------------------------------------------------------
# Kalman filter

class KalmanCV:
    """Constant-velocity position/velocity filter, predicted on demand, updated asynchronously."""

    def __init__(self, dim: int = 3, accel_std: float = 1.0, meas_std: float = 0.02,
                 init_pos=None, init_pos_std: float = 0.05, init_vel_std: float = 0.5):
        self.dim = dim
        self.q = accel_std ** 2
        self.r = meas_std ** 2
        self.x = np.zeros(2 * dim)
        if init_pos is not None:
            self.x[:dim] = init_pos
        self.p0 = np.diag([init_pos_std ** 2] * dim + [init_vel_std ** 2] * dim)
        self.P = self.p0.copy()
        self.resets = 0

    @property
    def position(self) -> np.ndarray:
        return self.x[:self.dim]

    @property
    def velocity(self) -> np.ndarray:
        return self.x[self.dim:]

    def _matrices(self, dt: float):
        d = self.dim
        F = np.eye(2 * d)
        F[:d, d:] = dt * np.eye(d)
        q = self.q
        Q = np.zeros((2 * d, 2 * d))
        Q[:d, :d] = q * dt ** 4 / 4 * np.eye(d)
        Q[:d, d:] = Q[d:, :d] = q * dt ** 3 / 2 * np.eye(d)
        Q[d:, d:] = q * dt ** 2 * np.eye(d)
        return F, Q

    def predict(self, dt: float) -> None:
        if dt <= 0:
            return
        F, Q = self._matrices(dt)
        self.x = F @ self.x
        self.P = F @ self.P @ F.T + Q
        self._guard()

    def update(self, z) -> None:
        d = self.dim
        H = np.hstack([np.eye(d), np.zeros((d, d))])
        R = self.r * np.eye(d)
        S = H @ self.P @ H.T + R
        K = np.linalg.solve(S, H @ self.P).T
        self.x = self.x + K @ (np.asarray(z, dtype=np.float64) - H @ self.x)
        IKH = np.eye(2 * d) - K @ H
        self.P = IKH @ self.P @ IKH.T + K @ R @ K.T   # Joseph form
        self._guard()

    def _guard(self) -> None:
        self.P = 0.5 * (self.P + self.P.T)
        try:
            np.linalg.cholesky(self.P)
        except np.linalg.LinAlgError:
            log.warning("kalman covariance lost positive definiteness; reset to prior")
            self.P = self.p0.copy()
            self.resets += 1


# ---------------------------------------------------------------------------
# policies

class OraclePolicy:
    """Ground-truth waypoints, or the expert's velocity command computed from them."""
    needs_image = False

    def __init__(self, mode: str = "waypoint"):
        if mode not in ("waypoint", "velocity"):
            raise ValueError(f"unknown policy mode {mode!r}")
        self.mode = mode

    def act(self, image, pose, world: LineWorld, expert_command=None) -> np.ndarray:
        if self.mode == "waypoint":
            return waypoint_label(pose, world)
        return np.asarray(expert_command, dtype=np.float64)


class ModelPolicy:
    """Feeds brightness-normalised camera images to a trained network."""
    needs_image = True

    def __init__(self, bundle):
        self.bundle = bundle
        self.mode = bundle.head_type

    def act(self, image, pose, world, expert_command=None) -> np.ndarray:
        from .augment import normalize_brightness
        from .autograd import no_grad
        img, _ = normalize_brightness(image)
        x = np.ascontiguousarray(img.transpose(2, 0, 1)[None], dtype=np.float32)
        with no_grad():
            out = self.bundle.predict_head(x)
        return out.data[0].astype(np.float64)


# ---------------------------------------------------------------------------
# episodes

@dataclass
class EpisodeResult:
    world_seed: int | None
    policy: str
    dynamics: str
    success: bool = False
    reason: str = ""
    duration: float = 0.0
    lost_time: float | None = None
    online_rmse: float = float("nan")
    cross_track_rmse: float = float("nan")
    timeout: float = 0.0
    trace: list[dict] = field(default_factory=list)   # one record per control tick
    ticks: list[dict] = field(default_factory=list)   # one record per network tick

    def network_ticks(self) -> list[dict]:
        return self.ticks

    def poses(self) -> np.ndarray:
        return np.array([r["pose"] for r in self.trace])

    def summary(self) -> dict:
        return {
            "world_seed": self.world_seed, "policy": self.policy, "dynamics": self.dynamics,
            "success": int(self.success), "reason": self.reason, "duration": round(self.duration, 6),
            "online_rmse": self.online_rmse, "cross_track_rmse": self.cross_track_rmse,
        }


class WaypointController:
    """PID + Kalman tracking of a world-fixed target refreshed at network rate."""

    def __init__(self, gains: PIDGains, kalman: KalmanCV):
        self.gains = gains
        self.kf = kalman
        self.pid = PIDState()
        self.target: np.ndarray | None = None

    def set_waypoint(self, w, yaw: float, anchor=None) -> None:
        origin = self.kf.position if anchor is None else np.asarray(anchor)
        self.target = origin + body_to_world(w, yaw)
        # restart the derivative so a setpoint jump does not kick
        self.pid = PIDState(self.pid.integral, None)

    def peek(self, yaw: float) -> np.ndarray:
        """Command the controller would issue now, without advancing its state."""
        if self.target is None:
            return np.zeros(4)
        err = world_to_body(self.target - self.kf.position, yaw)
        u = np.clip(self.gains.kp * err + self.gains.ki * self.pid.integral, -self.gains.max_speed,
                    self.gains.max_speed)
        return np.array([u[0], u[1], u[2], yaw_command(err, self.gains)])

    def command(self, yaw: float, dt: float) -> np.ndarray:
        if self.target is None:
            return np.zeros(4)
        err = world_to_body(self.target - self.kf.position, yaw)
        u, self.pid = pid_update(err, self.pid, dt, self.gains)
        return np.array([u[0], u[1], u[2], yaw_command(err, self.gains)])


def success_criterion(trace, world: LineWorld) -> tuple[bool, str]:
    """Success iff the cue was in view at every network tick and the line end was reached."""
    ticks = trace.ticks if isinstance(trace, EpisodeResult) else trace
    for t in ticks:
        if not t["visible"]:
            return False, f"track lost at t={t['time']:.3f}s"
    if ticks and max(t["s"] for t in ticks) >= world.final_partition - END_TOLERANCE:
        return True, "reached end"
    return False, "timeout"


def _schedule(control_hz: int, network_hz: int) -> tuple[int, int, int]:
    base = control_hz * network_hz // math.gcd(control_hz, network_hz)
    return base, base // control_hz, base // network_hz


def run_episode(world: LineWorld, policy, dynamics: DynamicsConfig | str = "train-sim", seed: int = 0,
                camera: CameraModel | None = None, control_hz: int = CONTROL_HZ, network_hz: int = NETWORK_HZ,
                timeout: float | None = None, start_offset: float = 0.0, start_yaw: float = 0.0,
                gains: PIDGains = PIDGains(), meas_std: float = 0.02, latency: float | None = None,
                ground=None, max_time: float = 60.0) -> EpisodeResult:
    """Fly one episode on a single-threaded discrete-event clock.

    The base clock runs at lcm(control_hz, network_hz). At a shared instant the
    network tick is handled before the control tick. Dynamics integrate at the
    base rate with the last command held.

    A network output becomes available ``latency`` seconds after its image was
    captured (default: one network period, i.e. inference takes the whole
    frame). Waypoints are anchored to the state estimate at capture time, so
    the controller compensates for the delay; velocity outputs are applied as is.
    ``ground`` (a GroundTexture) replaces the white background of camera views.
    """
    if isinstance(dynamics, str):
        dynamics = DynamicsConfig.profile(dynamics)
    camera = camera or CameraModel()
    if timeout is None:
        timeout = episode_timeout(world, dynamics, seed, camera, control_hz, network_hz, gains, meas_std, latency)
    base_hz, ctrl_every, net_every = _schedule(control_hz, network_hz)
    if latency is None:
        latency = 1.0 / network_hz
    delay_ticks = int(round(latency * base_hz))
    pending: list[tuple[int, np.ndarray, np.ndarray, float]] = []
    dt_base, dt_ctrl = 1.0 / base_hz, 1.0 / control_hz
    rng_dyn = substream(seed, "dynamics")
    rng_meas = substream(seed, "measurement")

    p0 = world.point_at(0.0)[0]
    t0 = world.tangent_at(0.0)[0]
    normal = np.array([-t0[1], t0[0]])
    start = p0 + start_offset * normal
    state = DroneState(position=np.array([start[0], start[1], camera.height]),
                       yaw=math.atan2(t0[1], t0[0]) + start_yaw)
    kf = KalmanCV(meas_std=meas_std, init_pos=state.position)
    ctrl = WaypointController(gains, kf)
    shadow = WaypointController(gains, kf)   # expert acting on true waypoints, for velocity labels
    mode = policy.mode
    held = np.zeros(4)
    expert_cmd = np.zeros(4)
    result = EpisodeResult(world.seed, f"{type(policy).__name__}:{mode}", dynamics.name, timeout=timeout)
    kf_time = 0.0
    w_pred = w_true = None
    tick = 0
    n_max = int(round(min(timeout, max_time) * base_hz))
    done = False
    while tick <= n_max and not done:
        t = tick * dt_base
        while pending and pending[0][0] <= tick:
            _, out, anchor, yaw_c = pending.pop(0)
            if mode == "waypoint":
                w_pred = out[:3]
                ctrl.set_waypoint(w_pred, yaw_c, anchor)
            else:
                held = out[:4]
        if tick % net_every == 0:
            kf.predict(t - kf_time)
            kf_time = t
            kf.update(state.position + meas_std * rng_meas.standard_normal(3))
            pose = state.pose
            cam = camera.at(pose)
            visible = cue_visible(world, cam)
            _, s_c, _ = world.project(np.array(pose[:2])[None])
            try:
                w_true = waypoint_label(pose, world)
            except TrackLost:
                w_true = None
            rec = {"time": t, "pose": list(pose), "s": float(s_c[0]), "visible": visible,
                   "w": None if w_true is None else w_true.tolist(), "v": expert_cmd.tolist()}
            if not visible or w_true is None:
                rec["visible"] = False
                result.ticks.append(rec)
                result.lost_time = t
                break
            shadow.set_waypoint(w_true, state.yaw)
            expert_cmd = shadow.peek(state.yaw)
            rec["v"] = expert_cmd.tolist()
            image = _camera_view(world, cam, ground) if policy.needs_image else None
            out = np.asarray(policy.act(image, pose, world, expert_command=expert_cmd), dtype=np.float64)
            rec["w_pred" if mode == "waypoint" else "v_pred"] = out.tolist()
            pending.append((tick + delay_ticks, out, kf.position.copy(), state.yaw))
            result.ticks.append(rec)
            if s_c[0] >= world.final_partition - END_TOLERANCE:
                done = True
                break
        if tick % ctrl_every == 0:
            kf.predict(t - kf_time)
            kf_time = t
            shadow.command(state.yaw, dt_ctrl)
            if mode == "waypoint":
                held = ctrl.command(state.yaw, dt_ctrl)
            result.trace.append({"tick": tick // ctrl_every, "time": t, "pose": list(state.pose),
                                 "command": held.tolist(),
                                 "w_pred": None if w_pred is None else w_pred.tolist(),
                                 "w": None if w_true is None else w_true.tolist()})
            # the end can also be crossed between network ticks
            _, s_now, _ = world.project(state.position[None, :2])
            if s_now[0] >= world.final_partition - END_TOLERANCE:
                result.ticks.append({"time": t, "pose": list(state.pose), "s": float(s_now[0]),
                                     "visible": cue_visible(world, camera.at(state.pose)), "w": None,
                                     "v": None, "final": True})
                done = True
                break
        state = step_dynamics(state, held, dt_base, dynamics, rng_dyn)
        tick += 1

    result.duration = tick * dt_base
    result.success, result.reason = success_criterion(result, world)
    if result.reason == "timeout" and tick * dt_base < timeout and not done:
        result.reason = "timeout (simulation cap)"
    result.online_rmse = _online_rmse(result.ticks, mode)
    xy = np.array([r["pose"][:2] for r in result.trace]) if result.trace else np.zeros((0, 2))
    result.cross_track_rmse = float(np.sqrt(np.mean(world.project(xy)[0] ** 2))) if len(xy) else float("nan")
    return result


def _camera_view(world: LineWorld, cam: CameraModel, ground) -> np.ndarray:
    image, mask = render(world, cam)
    if ground is None:
        return image
    from .augment import composite
    return composite(mask, image, ground.view(cam))


def _online_rmse(ticks: list[dict], mode: str) -> float:
    errs = []
    for r in ticks:
        if mode == "waypoint" and r.get("w_pred") is not None and r.get("w") is not None:
            errs.append(np.sum((np.asarray(r["w_pred"]) - np.asarray(r["w"])) ** 2))
        elif mode == "velocity" and r.get("v_pred") is not None:
            errs.append(np.sum((np.asarray(r["v_pred"]) - np.asarray(r["v"])) ** 2))
    return float(np.sqrt(np.mean(errs))) if errs else float("nan")


def episode_timeout(world: LineWorld, dynamics: DynamicsConfig, seed: int = 0, camera=None,
                    control_hz: int = CONTROL_HZ, network_hz: int = NETWORK_HZ, gains: PIDGains = PIDGains(),
                    meas_std: float = 0.02, latency: float | None = None, factor: float = 4.0) -> float:
    """``factor`` times the oracle's completion time on the same world and dynamics."""
    ref = run_episode(world, OraclePolicy("waypoint"), dynamics, seed, camera, control_hz, network_hz,
                      timeout=60.0, gains=gains, meas_std=meas_std, latency=latency)
    if ref.success:
        return factor * ref.duration
    nominal = world.length / (gains.kp * LOOKAHEAD)
    log.warning("oracle failed on world %s (%s); timeout from nominal speed", world.seed, ref.reason)
    return factor * nominal


# ---------------------------------------------------------------------------
# batches and outputs

def run_batch(worlds: list[LineWorld], policy, dynamics="train-sim", seed: int = 0, **kwargs) -> list[EpisodeResult]:
    out = []
    for i, world in enumerate(worlds):
        ep_seed = int(substream(seed, "episode", i).integers(2 ** 31))
        out.append(run_episode(world, policy, dynamics, ep_seed, **kwargs))
    return out


def write_trace(result: EpisodeResult, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in result.trace:
            fh.write(json.dumps(r) + "\n")


def write_summary(results: list[EpisodeResult], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [r.summary() for r in results]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["world_seed"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def plot_trajectories(world: LineWorld, results: list[EpisodeResult], path, labels=None) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(world.spline[:, 0], world.spline[:, 1], color="tab:red", lw=3, alpha=0.5, label="line")
    for i, r in enumerate(results):
        xy = r.poses()
        if len(xy):
            ax.plot(xy[:, 0], xy[:, 1], lw=1, label=labels[i] if labels else r.policy)
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def summarize(results: list[EpisodeResult]) -> dict:
    ok = [r.success for r in results]
    return {
        "episodes": len(results),
        "successes": int(sum(ok)),
        "success_rate": float(np.mean(ok)) if results else float("nan"),
        "online_rmse": float(np.nanmean([r.online_rmse for r in results])) if results else float("nan"),
        "cross_track_rmse": float(np.nanmean([r.cross_track_rmse for r in results])) if results else float("nan"),
    }


def config_dict(cfg: DynamicsConfig) -> dict:
    return asdict(cfg)
