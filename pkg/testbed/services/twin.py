"""
The virtual testbed robot: nominal kinematics plus the learned residual,
noise-free, integrated the same way as the plant.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

from .bus import MessageBus, MsgType, Topics
from .control import EstimatedState, RobotController
from .core import MM_PER_PX, TICK_MS, ChassisGeometry, Pose2D, Timestamp, Twist2D, WheelSpeeds
from .kinematics import body_to_world, forward_kinematics, world_to_body
from .learning import ModelParams, read_snapshot
from .plant import CameraObservation, DelayQueue, command_queue
from ..exceptions import CursorLagged, StaleObservation

logger = logging.getLogger(__name__)

Command = Union[Twist2D, WheelSpeeds]


@dataclass(frozen=True)
class TwinState:
    pose: Pose2D = field(default_factory=Pose2D)
    twist: Twist2D = field(default_factory=Twist2D)   # world frame
    t: Timestamp = 0
    model_version: int = 0


def _body_command(command: Command, geometry: ChassisGeometry) -> Twist2D:
    if isinstance(command, WheelSpeeds):
        return forward_kinematics(command, geometry)
    return command


def twin_step(state: TwinState, command: Command, model: Optional[ModelParams], dt: int,
              geometry: ChassisGeometry = ChassisGeometry()) -> TwinState:
    """Advance the virtual robot by dt ms; no model means a zero residual"""
    if dt <= 0:
        raise ValueError("dt must be positive")
    dt_s = dt / 1000.0
    command = _body_command(command, geometry)

    body = command
    version = state.model_version
    if model is not None:
        # the stored twist was rotated by the heading at the start of the previous step
        heading = state.pose.theta - state.twist.omega * dt_s
        body = command + model.predict_residual(world_to_body(state.twist, heading), command)
        version = max(version, model.version)

    world = body_to_world(body, state.pose.theta)
    pose = Pose2D(
        state.pose.x + world.vx * dt_s,
        state.pose.y + world.vy * dt_s,
        state.pose.theta + world.omega * dt_s,
    )
    return TwinState(pose, world, state.t + dt, version)


def twin_rollout(state: TwinState, commands: Sequence[Command], model: Optional[ModelParams],
                 dt: int = TICK_MS, geometry: ChassisGeometry = ChassisGeometry()) -> List[TwinState]:
    if not commands:
        raise ValueError("twin_rollout needs at least one command")
    trajectory = [state]
    for command in commands:
        trajectory.append(twin_step(trajectory[-1], command, model, dt, geometry))
    return trajectory


def twin_sync(state: TwinState, observation: CameraObservation) -> TwinState:
    """Reset the pose to a camera observation, keeping the twist"""
    if observation.t < state.t:
        raise StaleObservation(f"Observation at {observation.t} ms is older than twin state at {state.t} ms")
    return TwinState(observation.pixel_pose.to_pose(), state.twist, observation.t, state.model_version)


def state_values(pose: Pose2D, twist: Twist2D):
    """plant.state / twin.state payload: (x px, y px, theta deg, vx, vy mm/s, omega deg/s)"""
    return (
        pose.x / MM_PER_PX, pose.y / MM_PER_PX, math.degrees(pose.theta),
        twist.vx, twist.vy, math.degrees(twist.omega),
    )


class VirtualRobot:
    """
    Twin of one physical robot, driven by its own controller over its own
    command link. Snapshots are picked up from the bus at tick boundaries.
    """

    def __init__(self, bus: MessageBus, controller: RobotController,
                 geometry: ChassisGeometry = ChassisGeometry(), initial_pose: Pose2D = Pose2D(),
                 robot_id: int = 1, model: Optional[ModelParams] = None,
                 follow_snapshots: bool = True, link: Optional[DelayQueue] = None):
        self.bus = bus
        self.controller = controller
        self.geometry = geometry
        self.robot_id = robot_id
        self.model = model
        self.follow_snapshots = follow_snapshots
        self.link = link or command_queue()
        self.state = TwinState(pose=initial_pose)
        self.applied = Twist2D()
        self._snapshot_cursor = 0
        self.controller.model = model
        self.controller.set_estimate(EstimatedState.from_pose(initial_pose))

    def refresh_model(self):
        if not self.follow_snapshots:
            return
        try:
            frames, self._snapshot_cursor = self.bus.consume_all(Topics.MODEL_SNAPSHOT, self._snapshot_cursor)
        except CursorLagged as e:
            frames, self._snapshot_cursor = self.bus.consume_all(Topics.MODEL_SNAPSHOT, e.oldest - 1)
        for frame in frames:
            snapshot = read_snapshot(self.bus, frame)
            if snapshot is not None and (self.model is None or snapshot.version > self.model.version):
                self.model = snapshot
        self.controller.model = self.model

    def sync(self, observation: CameraObservation):
        self.state = twin_sync(self.state, observation)
        self.controller.set_estimate(EstimatedState.from_pose(self.state.pose, self.state.twist, self.state.t))

    @property
    def complete(self) -> bool:
        return self.controller.complete

    def step(self, now: Timestamp, dt: int = TICK_MS) -> TwinState:
        """Apply commands delivered by `now` and advance one tick"""
        for command in self.link.pop(now):
            self.applied = command
        self.state = twin_step(self.state, self.applied, self.model, dt, self.geometry)
        self.bus.publish_values(Topics.TWIN_STATE, MsgType.TWIN_STATE, self.robot_id, self.state.t,
                                state_values(self.state.pose, self.state.twist))

        self.controller.set_estimate(EstimatedState.from_pose(self.state.pose, self.state.twist, self.state.t))
        if not self.controller.complete:
            _, body_command = self.controller.step(None, dt)
        else:
            body_command = Twist2D()
        self.link.push(body_command, self.state.t)
        return self.state
