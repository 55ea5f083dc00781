"""Deterministic simulated devices: planar arm, gripper, camera, teleop source.

The arm is a planar 3-DoF chain: the smallest model that exercises relative
end-effector control, damped-least-squares IK, joint limits, and bimanual
composition. All transition functions are pure, so identical command
sequences produce bit-identical trajectories.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .nodes import ApiMethod, NodeLogic, NodeSpec
from .registry import register

DEFAULT_LINKS = (0.3, 0.25, 0.15)
DEFAULT_LIMIT = 2.6  # rad, symmetric per joint
DEFAULT_MAX_VEL = 3.0  # rad/s
DEFAULT_DAMPING = 0.05

GRIPPER_MAX_WIDTH = 0.08  # m
GRIPPER_MAX_VEL = 0.15  # m/s

CAMERA_SHAPE = (64, 64, 3)

TELEOP_AMPLITUDE = 0.01  # m per command
TELEOP_FREQ_HZ = 0.2


def wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.remainder(theta, 2.0 * math.pi)
    if w <= -math.pi:
        w = math.pi
    return w


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.theta)):
            raise ValueError(f"non-finite pose ({self.x}, {self.y}, {self.theta})")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def offset(self, dx: float, dy: float, dtheta: float) -> "Pose2D":
        return Pose2D(self.x + dx, self.y + dy, wrap_angle(self.theta + dtheta))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])


@dataclass(frozen=True)
class SimArm:
    n_joints: int = 3
    joint_pos: np.ndarray = None
    joint_vel: np.ndarray = None
    target: np.ndarray = None
    link_lengths: np.ndarray = None
    joint_limits: np.ndarray = None  # (n, 2) [lo, hi]
    max_vel: float = DEFAULT_MAX_VEL

    def __post_init__(self):
        n = self.n_joints
        def default(value, fallback):
            return np.asarray(fallback, dtype=float) if value is None \
                else np.asarray(value, dtype=float)
        object.__setattr__(self, "joint_pos", default(self.joint_pos, np.zeros(n)))
        object.__setattr__(self, "joint_vel", default(self.joint_vel, np.zeros(n)))
        object.__setattr__(self, "target", default(self.target, np.zeros(n)))
        object.__setattr__(self, "link_lengths", default(self.link_lengths, DEFAULT_LINKS[:n]))
        limits = self.joint_limits
        if limits is None:
            limits = np.tile([-DEFAULT_LIMIT, DEFAULT_LIMIT], (n, 1))
        object.__setattr__(self, "joint_limits", np.asarray(limits, dtype=float))

    @property
    def reach(self) -> float:
        return float(self.link_lengths.sum())

    def with_target(self, target) -> "SimArm":
        target = np.clip(np.asarray(target, dtype=float),
                         self.joint_limits[:, 0], self.joint_limits[:, 1])
        return replace(self, target=target)


def arm_tick(arm: SimArm, dt: float) -> SimArm:
    """First-order tracking toward the target, rate- and limit-clamped:
    pos' = pos + clamp(target - pos, +-max_vel*dt)."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    step = np.clip(arm.target - arm.joint_pos, -arm.max_vel * dt, arm.max_vel * dt)
    pos = np.clip(arm.joint_pos + step, arm.joint_limits[:, 0], arm.joint_limits[:, 1])
    vel = (pos - arm.joint_pos) / dt
    return replace(arm, joint_pos=pos, joint_vel=vel)


def fk_components(joint_pos: np.ndarray, link_lengths: np.ndarray) -> tuple[float, float, float]:
    """(x, y, unwrapped chain angle) of the end effector."""
    cum = np.cumsum(joint_pos)
    x = float(np.sum(link_lengths * np.cos(cum)))
    y = float(np.sum(link_lengths * np.sin(cum)))
    return x, y, float(cum[-1])


def fk(arm: SimArm) -> Pose2D:
    x, y, theta = fk_components(arm.joint_pos, arm.link_lengths)
    return Pose2D(x, y, theta)


def jacobian(arm: SimArm) -> np.ndarray:
    """Analytic 3xN Jacobian of (x, y, theta) w.r.t. joint angles."""
    cum = np.cumsum(arm.joint_pos)
    lengths = arm.link_lengths
    n = arm.n_joints
    jac = np.zeros((3, n))
    for k in range(n):
        jac[0, k] = -float(np.sum(lengths[k:] * np.sin(cum[k:])))
        jac[1, k] = float(np.sum(lengths[k:] * np.cos(cum[k:])))
        jac[2, k] = 1.0
    return jac


def ik_step(arm: SimArm, target: Pose2D, damping: float = DEFAULT_DAMPING) -> np.ndarray:
    """One damped-least-squares update toward ``target``.

    dtheta = J^T (J J^T + lambda^2 I)^-1 e with e the (x, y, theta) error;
    positive damping keeps the solve well-posed at singularities. Returns new
    joint targets clipped to limits.
    """
    if damping <= 0:
        raise ValueError(f"damping must be positive, got {damping}")
    x, y, theta = fk_components(arm.joint_pos, arm.link_lengths)
    error = np.array([target.x - x, target.y - y, wrap_angle(target.theta - theta)])
    jac = jacobian(arm)
    gram = jac @ jac.T + (damping ** 2) * np.eye(3)
    dtheta = jac.T @ np.linalg.solve(gram, error)
    return np.clip(arm.joint_pos + dtheta, arm.joint_limits[:, 0], arm.joint_limits[:, 1])


def ee_delta_targets(arm: SimArm, delta: Pose2D, damping: float = DEFAULT_DAMPING) -> np.ndarray:
    """Joint targets that move the end effector by ``delta`` from its
    current pose (one damped IK step toward fk(arm) offset by delta)."""
    goal = fk(arm).offset(delta.x, delta.y, delta.theta)
    return ik_step(arm, goal, damping)


# --- camera -------------------------------------------------------------------

@dataclass(frozen=True)
class CameraFrame:
    index: int
    pixels: np.ndarray  # u8[H, W, 3]


def camera_pattern(index: int, shape=CAMERA_SHAPE) -> np.ndarray:
    """Deterministic test card; byte i of the u32 frame index lives in the
    red channel of pixel (0, i)."""
    h, w, _ = shape
    xs = np.linspace(0, 255, w, dtype=np.uint8)
    ys = np.linspace(0, 255, h, dtype=np.uint8)
    px = np.empty(shape, dtype=np.uint8)
    px[:, :, 0] = xs[None, :]
    px[:, :, 1] = ys[:, None]
    px[:, :, 2] = (index + xs[None, :].astype(np.int64) + ys[:, None].astype(np.int64)) % 256
    raw = int(index).to_bytes(4, "little")
    for i in range(4):
        px[0, i, 0] = raw[i]
    return px


def camera_frame(index: int, shape=CAMERA_SHAPE) -> CameraFrame:
    if index < 0:
        raise ValueError(f"frame index must be >= 0, got {index}")
    return CameraFrame(index=index, pixels=camera_pattern(index, shape))


def decode_frame_index(pixels: np.ndarray) -> int:
    return int.from_bytes(bytes(int(pixels[0, i, 0]) for i in range(4)), "little")


# --- scripted teleop ------------------------------------------------------------

def scripted_teleop(t: float, amplitude: float = TELEOP_AMPLITUDE,
                    freq_hz: float = TELEOP_FREQ_HZ) -> Pose2D:
    """Smooth sinusoidal end-effector delta; zero at t=0 for reproducibility."""
    wt = 2.0 * math.pi * freq_hz * t
    return Pose2D(amplitude * math.sin(wt), 0.5 * amplitude * math.sin(2.0 * wt), 0.0)


# --- node logic + registered specs ---------------------------------------------

class SimArmLogic(NodeLogic):
    def __init__(self, n_joints=3, link_lengths=None, max_vel=DEFAULT_MAX_VEL,
                 limit=DEFAULT_LIMIT, rate_hz=100.0, damping=DEFAULT_DAMPING):
        links = DEFAULT_LINKS[:n_joints] if link_lengths is None else link_lengths
        self.arm = SimArm(n_joints=n_joints, link_lengths=links, max_vel=max_vel,
                          joint_limits=np.tile([-limit, limit], (n_joints, 1)))
        self.dt = 1.0 / rate_hz
        self.damping = damping

    def publish(self):
        self.arm = arm_tick(self.arm, self.dt)
        pose = fk(self.arm)
        return {
            "joint_pos": self.arm.joint_pos,
            "joint_vel": self.arm.joint_vel,
            "ee_pose": np.array([pose.x, pose.y, 0.0, 0.0, 0.0, pose.theta]),
            "target": self.arm.target,
        }

    def handle(self, method, args):
        if method == "set_joint_target":
            self.arm = self.arm.with_target(args["target"])
            return {"ack": 1}
        if method == "set_ee_delta":
            dx, dy, dtheta = (float(v) for v in args["delta"])
            targets = ee_delta_targets(self.arm, Pose2D(dx, dy, dtheta), self.damping)
            self.arm = self.arm.with_target(targets)
            return {"target": targets}
        if method == "home":
            self.arm = self.arm.with_target(np.zeros(self.arm.n_joints))
            return {"ack": 1}
        raise ValueError(f"unknown method {method}")


@register("sim_arm")
def sim_arm_spec(name: str, n_joints: int = 3, rate_hz: float = 100.0,
                 **params) -> NodeSpec:
    zeros = np.zeros(n_joints)
    return NodeSpec(
        name=name, pattern="pubreq", make_logic=SimArmLogic, rate_hz=rate_hz,
        example_data={"joint_pos": zeros, "joint_vel": zeros,
                      "ee_pose": np.zeros(6), "target": zeros},
        api=(
            ApiMethod("set_joint_target", {"target": zeros}, {"ack": 0}),
            ApiMethod("set_ee_delta", {"delta": np.zeros(3)}, {"target": zeros}),
            ApiMethod("home", {}, {"ack": 0}),
        ),
        params={"n_joints": n_joints, "rate_hz": rate_hz, **params},
    )


class SimGripperLogic(NodeLogic):
    def __init__(self, max_width=GRIPPER_MAX_WIDTH, max_vel=GRIPPER_MAX_VEL,
                 rate_hz=100.0):
        self.width = 0.0
        self.target = 0.0
        self.max_width = max_width
        self.max_vel = max_vel
        self.dt = 1.0 / rate_hz

    def publish(self):
        step = max(-self.max_vel * self.dt,
                   min(self.max_vel * self.dt, self.target - self.width))
        self.width = min(max(self.width + step, 0.0), self.max_width)
        return {"width": self.width, "target": self.target}

    def handle(self, method, args):
        if method == "set_width":
            self.target = min(max(float(args["width"]), 0.0), self.max_width)
            return {"ack": 1}
        if method == "home":
            self.target = 0.0
            return {"ack": 1}
        raise ValueError(f"unknown method {method}")


@register("sim_gripper")
def sim_gripper_spec(name: str, rate_hz: float = 100.0, **params) -> NodeSpec:
    return NodeSpec(
        name=name, pattern="pubreq", make_logic=SimGripperLogic, rate_hz=rate_hz,
        example_data={"width": 0.0, "target": 0.0},
        api=(
            ApiMethod("set_width", {"width": 0.0}, {"ack": 0}),
            ApiMethod("home", {}, {"ack": 0}),
        ),
        params={"rate_hz": rate_hz, **params},
    )


class SimCameraLogic(NodeLogic):
    def __init__(self, height=64, width=64):
        self.shape = (height, width, 3)
        self.index = 0

    def publish(self):
        frame = camera_frame(self.index, self.shape)
        self.index += 1
        return {"index": frame.index, "pixels": frame.pixels}


@register("sim_camera")
def sim_camera_spec(name: str, rate_hz: float = 30.0, height: int = 64,
                    width: int = 64) -> NodeSpec:
    return NodeSpec(
        name=name, pattern="pub", make_logic=SimCameraLogic, rate_hz=rate_hz,
        example_data={"index": 0, "pixels": np.zeros((height, width, 3), np.uint8)},
        params={"height": height, "width": width},
    )


class ScriptedTeleopLogic(NodeLogic):
    def __init__(self, rate_hz=50.0, amplitude=TELEOP_AMPLITUDE,
                 freq_hz=TELEOP_FREQ_HZ):
        self.rate_hz = rate_hz
        self.amplitude = amplitude
        self.freq_hz = freq_hz
        self.tick = 0

    def publish(self):
        t = self.tick / self.rate_hz
        self.tick += 1
        delta = scripted_teleop(t, self.amplitude, self.freq_hz)
        return {"dx": delta.x, "dy": delta.y, "dtheta": delta.theta}


@register("scripted_teleop")
def scripted_teleop_spec(name: str, rate_hz: float = 50.0, **params) -> NodeSpec:
    return NodeSpec(
        name=name, pattern="pub", make_logic=ScriptedTeleopLogic, rate_hz=rate_hz,
        example_data={"dx": 0.0, "dy": 0.0, "dtheta": 0.0},
        params={"rate_hz": rate_hz, **params},
    )
