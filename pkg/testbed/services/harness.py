"""
Experiment driver.

Wires plant, controller, virtual robot, learning server and bus into the three
experiments: A runs the plant with the waypoint controller alone, B feeds
plant telemetry to the learner so the twin follows the learned snapshots, and
C additionally routes every setpoint through the model-inversion corrector.
"""
import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

from django.conf import settings

from .bus import MessageBus, MsgType, Topics, persist_log
from .config import ExperimentConfig
from .control import EstimatedState, FusionGains, PidGains, RobotController, WaypointPlan
from .core import MM_PER_PX, TICK_MS, Pose2D, Twist2D, WheelSpeeds, to_mm
from .learning import LearningServer, ModelParams, snapshot_frame
from .plant import PlantSimulator, command_queue, observation_queue
from .twin import VirtualRobot, state_values
from ..exceptions import ConfigInvalid, IoFailure, LengthMismatch

logger = logging.getLogger(__name__)

PERSIST_EVERY = 1024
CSV_HEADER = ('t_ms', 'x_px', 'y_px', 'theta', 'setpoint_x', 'setpoint_y', 'error_px')
Point = Tuple[float, float]


def segment_distance(point: Point, start: Point, end: Point) -> float:
    """Euclidean distance from a point to the closed segment start-end"""
    dx, dy = end[0] - start[0], end[1] - start[1]
    length_sq = dx * dx + dy * dy
    if length_sq == 0.0:
        return math.hypot(point[0] - start[0], point[1] - start[1])
    s = ((point[0] - start[0]) * dx + (point[1] - start[1]) * dy) / length_sq
    s = max(0.0, min(1.0, s))
    return math.hypot(point[0] - (start[0] + s * dx), point[1] - (start[1] + s * dy))


class ReferenceTracker:
    """
    Active leg of the reference path: from where the robot accepted the
    previous waypoint to the current target. The last leg stays active once
    the plan completes.
    """

    def __init__(self, waypoints: Sequence[Point], start: Point):
        self.waypoints = [tuple(p) for p in waypoints]
        self.leg_start = tuple(start)
        self.index = 0

    def update(self, index: int, position: Point) -> Tuple[float, Point, Point]:
        if index != self.index:
            if index < len(self.waypoints):
                self.leg_start = tuple(position)
            self.index = index
        end = self.waypoints[min(index, len(self.waypoints) - 1)]
        return segment_distance(position, self.leg_start, end), self.leg_start, end


@dataclass(frozen=True)
class TickRecord:
    t: int
    x_px: float
    y_px: float
    theta: float
    setpoint_x: float
    setpoint_y: float
    error_px: float
    leg_start: Point = (0.0, 0.0)
    leg_end: Point = (0.0, 0.0)

    def csv_row(self) -> List:
        return [self.t, self.x_px, self.y_px, self.theta, self.setpoint_x, self.setpoint_y, self.error_px]

    def to_list(self) -> List:
        return self.csv_row() + [list(self.leg_start), list(self.leg_end)]

    @classmethod
    def from_list(cls, row: Sequence) -> 'TickRecord':
        return cls(int(row[0]), *map(float, row[1:7]), tuple(row[7]), tuple(row[8]))


@dataclass
class ExperimentReport:
    experiment: str
    seed: int
    records: List[TickRecord] = field(default_factory=list)
    twin_records: List[TickRecord] = field(default_factory=list)
    waypoints_reached: int = 0
    total_waypoints: int = 0
    snapshots_used: List[int] = field(default_factory=list)
    model: Optional[ModelParams] = None
    repeats: List['ExperimentReport'] = field(default_factory=list)
    outputs: Dict[str, str] = field(default_factory=dict)

    @property
    def tick_count(self) -> int:
        return len(self.records)

    @property
    def errors(self) -> List[float]:
        return [r.error_px for r in self.records]

    @property
    def max_error(self) -> float:
        return max(self.errors, default=0.0)

    @property
    def mean_error(self) -> float:
        errors = self.errors
        return sum(errors) / len(errors) if errors else 0.0

    @property
    def complete(self) -> bool:
        return self.waypoints_reached >= self.total_waypoints

    def twin_report(self) -> 'ExperimentReport':
        return ExperimentReport(self.experiment, self.seed, list(self.twin_records),
                                total_waypoints=self.total_waypoints)

    def summary(self) -> Dict:
        return {
            'experiment': self.experiment,
            'seed': self.seed,
            'ticks': self.tick_count,
            'max_error_px': round(self.max_error, 3),
            'mean_error_px': round(self.mean_error, 3),
            'waypoints_reached': self.waypoints_reached,
            'total_waypoints': self.total_waypoints,
            'snapshots_used': list(self.snapshots_used),
            'repeat_max_errors_px': [round(r.max_error, 3) for r in self.repeats],
        }

    def to_dict(self) -> Dict:
        return {
            **self.summary(),
            'records': [r.to_list() for r in self.records],
            'twin_records': [r.to_list() for r in self.twin_records],
            'model': self.model.to_dict() if self.model else None,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'ExperimentReport':
        return cls(
            experiment=data['experiment'],
            seed=int(data['seed']),
            records=[TickRecord.from_list(row) for row in data.get('records', [])],
            twin_records=[TickRecord.from_list(row) for row in data.get('twin_records', [])],
            waypoints_reached=int(data.get('waypoints_reached', 0)),
            total_waypoints=int(data.get('total_waypoints', 0)),
            snapshots_used=list(data.get('snapshots_used', [])),
            model=ModelParams.from_dict(data['model']) if data.get('model') else None,
        )


class TestbedSession:
    """
    One pass of the task: a physical robot, its virtual twin and optionally
    the learning server, all sharing one bus and one simulated clock.
    """

    def __init__(self, config: ExperimentConfig, bus: Optional[MessageBus] = None,
                 model: Optional[ModelParams] = None, learn: bool = False, correct: bool = False,
                 follow_snapshots: bool = False, stream: str = 'plant', robot_id: int = 1):
        self.config = config
        self.bus = bus or MessageBus()
        self.geometry = config.geometry
        self.robot_id = robot_id
        self.correct = correct

        u, v = config.waypoints[0]
        start = Pose2D(to_mm(u), to_mm(v), 0.0)
        self.start = start
        plan = WaypointPlan(config.waypoints, config.threshold, config.epsilon_p)

        self.plant = PlantSimulator(config.plant, self.geometry, start, config.seed, robot_id, stream)
        self.controller = RobotController(
            plan, self.geometry, config.limits,
            pid_gains=PidGains(output_limit=config.plant.wheel_speed_max),
            fusion=FusionGains(), initial=EstimatedState.from_pose(start), correct=correct,
        )
        self.controller.model = model
        self.twin = VirtualRobot(
            self.bus,
            RobotController(plan, self.geometry, config.limits, correct=correct,
                            initial=EstimatedState.from_pose(start)),
            self.geometry, start, robot_id, model=model, follow_snapshots=follow_snapshots,
        )
        self.learner = LearningServer(self.bus, config.train, config.seed, robot_id, model) if learn else None

        self.command_link = command_queue()
        self.camera_link = observation_queue()
        self.held_wheels = WheelSpeeds()
        self.held_twist = Twist2D()

        start_px = (config.waypoints[0][0], config.waypoints[0][1])
        self.plant_reference = ReferenceTracker(config.waypoints, start_px)
        self.twin_reference = ReferenceTracker(config.waypoints, start_px)
        self.records: List[TickRecord] = []
        self.twin_records: List[TickRecord] = []
        self.model_versions: List[int] = []

        if model is not None:
            self.bus.snapshots.store(model)
            self.bus.publish(Topics.MODEL_SNAPSHOT, snapshot_frame(model, 0, robot_id))

    @property
    def complete(self) -> bool:
        return self.controller.complete

    def _record(self, tracker: ReferenceTracker, pose: Pose2D, controller: RobotController,
                now: int) -> TickRecord:
        position = (pose.x / MM_PER_PX, pose.y / MM_PER_PX)
        error, leg_start, leg_end = tracker.update(controller.plan.index, position)
        setpoint = controller.setpoint_px
        return TickRecord(now, position[0], position[1], pose.theta,
                          setpoint[0], setpoint[1], error, leg_start, leg_end)

    def tick(self, now: int, step_learner: bool = True):
        dt = TICK_MS
        rid = self.robot_id

        # plant
        for wheels, twist in self.command_link.pop(now):
            self.held_wheels, self.held_twist = wheels, twist
        state = self.plant.step(self.held_wheels, dt)

        # sensors
        sensors = self.plant.sense(dt)
        observation = self.plant.observe()
        if observation is not None:
            self.camera_link.push(observation, now)

        # bus
        self.bus.publish_values(Topics.PLANT_COMMAND, MsgType.PLANT_COMMAND, rid, now,
                                (self.held_twist.vx, self.held_twist.vy, math.degrees(self.held_twist.omega)))
        self.bus.publish_values(Topics.PLANT_STATE, MsgType.PLANT_STATE, rid, now,
                                state_values(state.pose, state.twist))
        if observation is not None:
            pixel = observation.pixel_pose
            self.bus.publish_values(Topics.PLANT_CAMERA, MsgType.PLANT_CAMERA, rid, now,
                                    (pixel.u, pixel.v, math.degrees(pixel.theta)))

        # control
        delivered = self.camera_link.pop(now)
        self.controller.update_estimate(sensors, delivered[-1] if delivered else None, dt)
        wheels, twist = self.controller.step(sensors.encoders, dt)
        self.command_link.push((wheels, twist), now)
        setpoint = self.controller.setpoint_px
        velocity = self.controller.last_velocity
        self.bus.publish_values(Topics.CONTROL_SETPOINT, MsgType.CONTROL_SETPOINT, rid, now,
                                (setpoint[0], setpoint[1], velocity.vx, velocity.vy))

        # twin
        self.twin.refresh_model()
        twin_state = self.twin.step(now, dt)
        if self.twin.model is not None:
            self.model_versions.append(self.twin.model.version)

        # learning
        if self.learner is not None and step_learner:
            self.learner.step()

        self.records.append(self._record(self.plant_reference, state.pose, self.controller, now))
        self.twin_records.append(self._record(self.twin_reference, twin_state.pose, self.twin.controller, now))

    def run(self, log_path: Optional[str] = None) -> ExperimentReport:
        config = self.config
        threaded = self.learner is not None and not config.lockstep
        if threaded:
            self.learner.start()
        try:
            for k in range(1, config.tick_budget + 1):
                self.tick(k * TICK_MS, step_learner=not threaded)
                if log_path and k % PERSIST_EVERY == 0:
                    persist_log(self.bus, '*', log_path)
                if self.complete:
                    break
        finally:
            if threaded:
                self.learner.stop()
        if log_path:
            persist_log(self.bus, '*', log_path)

        if not self.complete:
            logger.warning(f"Tick budget {config.tick_budget} exhausted at waypoint "
                           f"{self.controller.plan.index}/{len(config.waypoints)}")
        return ExperimentReport(
            experiment=config.experiment,
            seed=config.seed,
            records=self.records,
            twin_records=self.twin_records,
            waypoints_reached=self.controller.plan.index,
            total_waypoints=len(config.waypoints),
            snapshots_used=sorted(set(self.model_versions)),
        )


def load_model(path: str) -> ModelParams:
    try:
        with open(path, 'r') as handle:
            data = json.load(handle)
    except OSError as e:
        raise IoFailure(f"Cannot read model snapshot {path}: {e}") from e
    try:
        return ModelParams.from_dict(data)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigInvalid(f"MODEL_PATH {path} is not a model snapshot: {e}") from e


def save_model(model: ModelParams, path: str) -> str:
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w') as handle:
            json.dump(model.to_dict(), handle, indent=2, sort_keys=True)
    except OSError as e:
        raise IoFailure(f"Cannot write model snapshot {path}: {e}") from e
    return path


def train_model(config: ExperimentConfig) -> ModelParams:
    """Training pass: the same task with learning on and no correction, then consolidation"""
    session = TestbedSession(config, learn=True, follow_snapshots=True, stream='training')
    session.run()
    model = session.learner.consolidate()
    logger.info(f"Training pass done: model v{model.version}, loss {model.train_loss:.3f} (mm/s)^2, "
                f"converged={model.converged}")
    return model


def run_experiment(config: ExperimentConfig, out_dir: Optional[str] = None,
                   model: Optional[ModelParams] = None) -> ExperimentReport:
    """
    Run one experiment and, when `out_dir` is given, persist the bus log,
    the model snapshot and the CSV report there.
    """
    logger.info(f"Experiment {config.experiment} starting (seed={config.seed})")
    if config.experiment != 'A' and model is None:
        model = load_model(config.model_path) if config.model_path else train_model(config)

    def log_path(name: str) -> Optional[str]:
        return os.path.join(out_dir, name) if out_dir else None

    if config.experiment == 'A':
        session = TestbedSession(config)
    elif config.experiment == 'B':
        session = TestbedSession(config, model=model, learn=True, follow_snapshots=True)
    else:
        session = TestbedSession(config, model=model, correct=True)
    report = session.run(log_path('bus.log'))

    if session.learner is not None:
        report.model = session.learner.params
    else:
        report.model = model
    if config.experiment == 'C':
        report.snapshots_used = [model.version]
        for i in range(1, config.repeats):
            repeat = TestbedSession(config, model=model, correct=True, stream=f'repeat{i}')
            extra = repeat.run(log_path(f'bus_repeat{i}.log'))
            extra.snapshots_used = [model.version]
            report.repeats.append(extra)
            logger.info(f"Repeat {i}: max error {extra.max_error:.1f} px")

    if out_dir:
        report.outputs['dir'] = out_dir
        report.outputs['log'] = log_path('bus.log')
        if report.model is not None:
            report.outputs['model'] = save_model(report.model, log_path('model.json'))
        report.outputs['csv'] = emit_report(report, log_path('report.csv'), 'csv')
        report.outputs['report'] = write_report_json(report, log_path('report.json'))

    logger.info(f"Experiment {config.experiment} done: {report.tick_count} ticks, "
                f"max error {report.max_error:.1f} px, mean {report.mean_error:.1f} px")
    return report


@dataclass(frozen=True)
class PvComparison:
    gaps: Tuple[float, ...]

    @property
    def max_gap(self) -> float:
        return max(self.gaps, default=0.0)

    @property
    def mean_gap(self) -> float:
        return sum(self.gaps) / len(self.gaps) if self.gaps else 0.0


def _records(report: Union[ExperimentReport, Sequence[TickRecord]]) -> Sequence[TickRecord]:
    return report.records if isinstance(report, ExperimentReport) else report


def compare_pv(plant_report, twin_report) -> PvComparison:
    """Per-tick Euclidean gap between two time-aligned trajectories, in pixels"""
    plant, twin = _records(plant_report), _records(twin_report)
    if len(plant) != len(twin):
        raise LengthMismatch(f"Trajectories have {len(plant)} and {len(twin)} ticks")
    gaps = []
    for p, q in zip(plant, twin):
        if p.t != q.t:
            raise LengthMismatch(f"Trajectories leave the tick grid at t={p.t}/{q.t}")
        gaps.append(math.hypot(p.x_px - q.x_px, p.y_px - q.y_px))
    return PvComparison(tuple(gaps))


def _plot_blocks(report: ExperimentReport) -> List[Tuple[str, Tuple[str, ...], List[List]]]:
    blocks = [
        ('plant', ('t_ms', 'x_px', 'y_px', 'theta'),
         [[r.t, r.x_px, r.y_px, r.theta] for r in report.records]),
        ('setpoint', ('t_ms', 'setpoint_x', 'setpoint_y'),
         [[r.t, r.setpoint_x, r.setpoint_y] for r in report.records]),
        ('error', ('t_ms', 'error_px'),
         [[r.t, r.error_px] for r in report.records]),
    ]
    if report.twin_records:
        blocks.append(('twin', ('t_ms', 'x_px', 'y_px', 'theta'),
                       [[r.t, r.x_px, r.y_px, r.theta] for r in report.twin_records]))
    return blocks


def emit_report(report: ExperimentReport, out_path: str, fmt: str = 'csv') -> str:
    """
    Write the report as CSV or as gnuplot data blocks (one block per series,
    separated by two blank lines so `index` selects them).
    """
    if fmt not in ('csv', 'plotdata'):
        raise ValueError(f"Unknown report format: {fmt}")
    try:
        os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
        with open(out_path, 'w', newline='') as handle:
            if fmt == 'csv':
                writer = csv.writer(handle, lineterminator='\n')
                writer.writerow(CSV_HEADER)
                for record in report.records:
                    writer.writerow(record.csv_row())
            else:
                handle.write(f"# experiment {report.experiment} seed {report.seed}\n")
                for i, (name, columns, rows) in enumerate(_plot_blocks(report)):
                    if i:
                        handle.write('\n\n')
                    handle.write(f"# series {name}\n# {' '.join(columns)}\n")
                    for row in rows:
                        handle.write(' '.join(repr(v) for v in row) + '\n')
    except OSError as e:
        logger.error(f"Failed to write report {out_path}: {e}")
        raise IoFailure(str(e)) from e
    return out_path


def read_plotdata(path: str) -> Dict[str, List[List[float]]]:
    """Parse plotdata blocks back into {series: rows}"""
    series: Dict[str, List[List[float]]] = {}
    current = None
    try:
        with open(path, 'r') as handle:
            for line in handle:
                line = line.strip()
                if line.startswith('# series '):
                    current = series.setdefault(line[len('# series '):], [])
                elif line and not line.startswith('#') and current is not None:
                    current.append([float(v) for v in line.split()])
    except OSError as e:
        raise IoFailure(str(e)) from e
    return series


def write_report_json(report: ExperimentReport, path: str) -> str:
    try:
        with open(path, 'w') as handle:
            json.dump(report.to_dict(), handle)
    except OSError as e:
        raise IoFailure(str(e)) from e
    return path


def read_report_json(path: str) -> ExperimentReport:
    try:
        with open(path, 'r') as handle:
            return ExperimentReport.from_dict(json.load(handle))
    except OSError as e:
        raise IoFailure(str(e)) from e
    except (KeyError, ValueError) as e:
        raise IoFailure(f"{path} is not an experiment report: {e}") from e


def default_output_dir(config: ExperimentConfig) -> str:
    root = str(getattr(settings, 'TESTBED_OUTPUT_DIR', 'runs'))
    return os.path.join(root, f"{config.experiment.lower()}_seed{config.seed}")
