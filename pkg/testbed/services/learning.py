"""
Learning server: fits the black-box residual dynamics model online.

The model predicts, per tick, the difference between the body twist the
plant actually reaches and the commanded body twist (the nominal kinematic
response). It is linear in eleven nonlinear features of (twist, command);
the sign and v|v| terms let it represent Coulomb-like and drag-like friction.
An optional tanh hidden layer can be added on top with the same interfaces.

Linear velocities are divided by `velocity_scale` (mm/s per model unit)
before featurizing so every feature has a comparable magnitude; angular rates
stay in rad/s. Reported MSE is in (mm/s)^2, the angular component counted in
mrad/s.
"""
import logging
import math
import threading
import zlib
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .bus import Frame, MessageBus, MsgType, Topics
from .core import Twist2D
from .kinematics import world_to_body
from ..exceptions import CursorLagged, Diverged, RankDeficient

logger = logging.getLogger(__name__)

FEATURE_DIM = 11
OUTPUT_DIM = 3
DIVERGENCE_LOSS = 1e6
CONVERGENCE_WINDOW = 5
WHITENING_RIDGE = 1e-8      # relative to the largest feature variance
FEATURE_NAMES = (
    'vx', 'vy', 'omega', 'ux', 'uy', 'uomega',
    'sign_vx', 'sign_vy', 'vx_abs_vx', 'vy_abs_vy', 'bias',
)


def featurize(twist: Twist2D, command: Twist2D) -> np.ndarray:
    vx, vy, omega = twist.as_tuple()
    return np.array([
        vx, vy, omega,
        command.vx, command.vy, command.omega,
        math.copysign(1.0, vx) if vx else 0.0,
        math.copysign(1.0, vy) if vy else 0.0,
        vx * abs(vx),
        vy * abs(vy),
        1.0,
    ])


def _scaled(twist: Twist2D, scale: float) -> Twist2D:
    return Twist2D(twist.vx / scale, twist.vy / scale, twist.omega)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """
    Versioned residual model.

    `weights` is the 3x11 linear map; `hidden_in` (H x 11) and `hidden_out`
    (3 x H) are present only for the hidden-layer variant.
    """
    weights: np.ndarray = field(default_factory=lambda: np.zeros((OUTPUT_DIM, FEATURE_DIM)))
    version: int = 0
    train_loss: float = float('inf')
    converged: bool = False
    velocity_scale: float = 1000.0
    hidden_in: Optional[np.ndarray] = None
    hidden_out: Optional[np.ndarray] = None

    def __post_init__(self):
        weights = np.array(self.weights, dtype=float)
        if weights.shape != (OUTPUT_DIM, FEATURE_DIM):
            raise ValueError(f"weights must be {OUTPUT_DIM}x{FEATURE_DIM}, got {weights.shape}")
        object.__setattr__(self, 'weights', weights)

    @property
    def hidden(self) -> bool:
        return self.hidden_in is not None

    def is_finite(self) -> bool:
        arrays = [self.weights] + ([self.hidden_in, self.hidden_out] if self.hidden else [])
        return all(np.all(np.isfinite(a)) for a in arrays)

    def predict_scaled(self, features: np.ndarray) -> np.ndarray:
        """Residuals in model units for one feature row or an N x 11 block"""
        out = features @ self.weights.T
        if self.hidden:
            out = out + np.tanh(features @ self.hidden_in.T) @ self.hidden_out.T
        return out

    def features(self, twist: Twist2D, command: Twist2D) -> np.ndarray:
        return featurize(_scaled(twist, self.velocity_scale), _scaled(command, self.velocity_scale))

    def predict_residual(self, twist: Twist2D, command: Twist2D) -> Twist2D:
        dvx, dvy, domega = self.predict_scaled(self.features(twist, command))
        return Twist2D(float(dvx) * self.velocity_scale, float(dvy) * self.velocity_scale, float(domega))

    def checksum(self) -> int:
        """15-bit CRC of the coefficients, carried in snapshot frames"""
        crc = zlib.crc32(self.weights.tobytes())
        if self.hidden:
            crc = zlib.crc32(self.hidden_out.tobytes(), zlib.crc32(self.hidden_in.tobytes(), crc))
        return crc & 0x7FFF

    def with_changes(self, **changes) -> 'ModelParams':
        return replace(self, **changes)

    def vx_gain(self) -> float:
        """Steady-state vx per unit of commanded vx implied by the linear part"""
        w = self.weights
        return (1.0 + w[0, 3]) / (1.0 - w[0, 0])

    def to_dict(self) -> Dict:
        data = {
            'version': self.version,
            'train_loss': self.train_loss if math.isfinite(self.train_loss) else None,
            'converged': self.converged,
            'velocity_scale': self.velocity_scale,
            'weights': self.weights.tolist(),
            'checksum': self.checksum(),
        }
        if self.hidden:
            data['hidden_in'] = self.hidden_in.tolist()
            data['hidden_out'] = self.hidden_out.tolist()
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'ModelParams':
        loss = data.get('train_loss')
        return cls(
            weights=np.array(data['weights'], dtype=float),
            version=int(data.get('version', 0)),
            train_loss=float('inf') if loss is None else float(loss),
            converged=bool(data.get('converged', False)),
            velocity_scale=float(data.get('velocity_scale', 1000.0)),
            hidden_in=np.array(data['hidden_in'], dtype=float) if 'hidden_in' in data else None,
            hidden_out=np.array(data['hidden_out'], dtype=float) if 'hidden_out' in data else None,
        )

    @classmethod
    def initial(cls, hidden_units: int = 0, seed: int = 0, velocity_scale: float = 1000.0) -> 'ModelParams':
        if hidden_units <= 0:
            return cls(velocity_scale=velocity_scale)
        rng = np.random.Generator(np.random.PCG64(seed))
        return cls(
            velocity_scale=velocity_scale,
            hidden_in=rng.normal(0.0, 0.3, (hidden_units, FEATURE_DIM)),
            hidden_out=np.zeros((OUTPUT_DIM, hidden_units)),
        )


@dataclass(frozen=True)
class Transition:
    twist: Twist2D        # body frame
    command: Twist2D      # body frame, as applied by the plant
    next_twist: Twist2D   # body frame


class ReplayBuffer:
    """Bounded FIFO of transitions"""

    def __init__(self, capacity: int = 4096):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        self._items: Deque[Transition] = deque(maxlen=capacity)

    def add(self, transition: Transition):
        self._items.append(transition)

    def extend(self, transitions):
        for transition in transitions:
            self.add(transition)

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def arrays(self, velocity_scale: float = 1000.0) -> Tuple[np.ndarray, np.ndarray]:
        """Design matrix (N x 11) and residual targets (N x 3) in model units"""
        rows, targets = [], []
        for item in self._items:
            twist = _scaled(item.twist, velocity_scale)
            command = _scaled(item.command, velocity_scale)
            nxt = _scaled(item.next_twist, velocity_scale)
            rows.append(featurize(twist, command))
            targets.append((nxt.vx - command.vx, nxt.vy - command.vy, nxt.omega - command.omega))
        if not rows:
            return np.zeros((0, FEATURE_DIM)), np.zeros((0, OUTPUT_DIM))
        return np.array(rows), np.array(targets)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.3
    batch_size: int = 32
    epochs_per_round: int = 5
    convergence_tol: float = 0.5      # (mm/s)^2 change in MSE between rounds
    retrain_every: int = 120
    replay_capacity: int = 4096
    hidden_units: int = 0
    consolidation_rounds: int = 200

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


def _mse_scaled(params: ModelParams, phi: np.ndarray, y: np.ndarray) -> float:
    error = params.predict_scaled(phi) - y
    return float(np.mean(error ** 2))


def mse_gradient(params: ModelParams, phi: np.ndarray, y: np.ndarray) -> Dict[str, np.ndarray]:
    """Analytic gradient of the scaled MSE with respect to every parameter block"""
    n = phi.shape[0]
    norm = 2.0 / (n * OUTPUT_DIM)
    if not params.hidden:
        error = phi @ params.weights.T - y
        return {'weights': norm * error.T @ phi}
    activation = np.tanh(phi @ params.hidden_in.T)
    error = phi @ params.weights.T + activation @ params.hidden_out.T - y
    back = (error @ params.hidden_out) * (1.0 - activation ** 2)
    return {
        'weights': norm * error.T @ phi,
        'hidden_out': norm * error.T @ activation,
        'hidden_in': norm * back.T @ phi,
    }


def evaluate_mse(params: ModelParams, dataset) -> float:
    """Mean squared residual-prediction error in (mm/s)^2"""
    phi, y = dataset.arrays(params.velocity_scale) if isinstance(dataset, ReplayBuffer) else dataset
    if len(phi) == 0:
        raise ValueError("evaluate_mse needs a non-empty dataset")
    return _mse_scaled(params, phi, y) * params.velocity_scale ** 2


def fit_least_squares(buffer: ReplayBuffer, velocity_scale: float = 1000.0) -> ModelParams:
    """Closed-form linear fit; the oracle the iterative trainer is checked against"""
    phi, y = buffer.arrays(velocity_scale)
    if phi.shape[0] < FEATURE_DIM:
        raise RankDeficient(f"{phi.shape[0]} transitions for {FEATURE_DIM} features")
    rank = np.linalg.matrix_rank(phi)
    if rank < FEATURE_DIM:
        raise RankDeficient(f"Design matrix rank {rank} < {FEATURE_DIM}; excite more motion")
    solution, *_ = np.linalg.lstsq(phi, y, rcond=None)
    params = ModelParams(weights=solution.T, velocity_scale=velocity_scale)
    return params.with_changes(train_loss=evaluate_mse(params, (phi, y)))


def _whitener(phi: np.ndarray) -> np.ndarray:
    """Inverse square root of the ridge-regularized feature covariance"""
    covariance = phi.T @ phi / phi.shape[0]
    eigenvalues, vectors = np.linalg.eigh(covariance)
    ridge = WHITENING_RIDGE * max(float(eigenvalues[-1]), 1e-12)
    return (vectors / np.sqrt(np.maximum(eigenvalues, 0.0) + ridge)) @ vectors.T


def sgd_epoch(params: ModelParams, buffer, config: TrainConfig,
              rng: np.random.Generator) -> ModelParams:
    """
    One shuffled pass of minibatch gradient descent on the scaled MSE.

    Twist and command features are strongly correlated in closed-loop data, so
    the linear block descends in whitened feature coordinates. Each step is
    shortened by the batch's curvature along those coordinates, which keeps
    high-leverage batches from overshooting. Hidden-layer blocks take plain
    gradient steps.
    """
    phi, y = buffer.arrays(params.velocity_scale) if isinstance(buffer, ReplayBuffer) else buffer
    n = phi.shape[0]
    if n == 0:
        raise ValueError("sgd_epoch needs a non-empty buffer")

    blocks = {'weights': params.weights.copy()}
    if params.hidden:
        blocks['hidden_in'] = params.hidden_in.copy()
        blocks['hidden_out'] = params.hidden_out.copy()
    half = _whitener(phi)
    preconditioner = half @ half

    order = rng.permutation(n)
    for start in range(0, n, config.batch_size):
        batch = order[start:start + config.batch_size]
        current = params.with_changes(**blocks)
        gradient = mse_gradient(current, phi[batch], y[batch])

        curvature = 2.0 / OUTPUT_DIM * np.linalg.norm(phi[batch] @ half, 2) ** 2 / len(batch)
        step = config.learning_rate / max(1.0, curvature)
        blocks['weights'] = blocks['weights'] - step * gradient.pop('weights') @ preconditioner
        for name, grad in gradient.items():
            blocks[name] = blocks[name] - config.learning_rate * grad

    updated = params.with_changes(**blocks)
    loss = _mse_scaled(updated, phi, y) * params.velocity_scale ** 2
    if not math.isfinite(loss) or loss > DIVERGENCE_LOSS:
        raise Diverged(f"Training loss {loss:.3g} exceeded {DIVERGENCE_LOSS:.0e}")
    return updated.with_changes(train_loss=loss)


def snapshot_frame(params: ModelParams, timestamp: int, robot_id: int = 0) -> Frame:
    """Header frame: version, loss (saturated), converged flag, coefficient checksum"""
    loss = params.train_loss if math.isfinite(params.train_loss) else 3276.7
    counts = (
        params.version,
        int(round(min(loss, 3276.7) * 10)),
        1 if params.converged else 0,
        params.checksum(),
    )
    return Frame.from_counts(MsgType.MODEL_SNAPSHOT, robot_id, timestamp, counts)


def read_snapshot(bus: MessageBus, frame: Frame) -> Optional[ModelParams]:
    """Resolve a snapshot header to the complete snapshot it announces"""
    version, _, _, checksum = frame.counts
    snapshot = bus.snapshots.get(version)
    if snapshot is None or snapshot.checksum() != checksum:
        return None
    return snapshot


class LearningServer:
    """
    Consumes plant telemetry from the bus, retrains every `retrain_every`
    transitions and publishes versioned snapshots.

    Call `step()` once per tick in lockstep mode, or `start()` to run it in a
    background thread that polls the bus.
    """

    def __init__(self, bus: MessageBus, config: TrainConfig = TrainConfig(), seed: int = 0,
                 robot_id: int = 1, initial: Optional[ModelParams] = None):
        self.bus = bus
        self.config = config
        self.robot_id = robot_id
        self.rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x1EA2])))
        self.buffer = ReplayBuffer(config.replay_capacity)
        self.params = initial or ModelParams.initial(config.hidden_units, seed)
        self.version = self.params.version
        self.converged = self.params.converged
        self.loss_history: List[float] = []
        self.published: List[ModelParams] = []
        self._state_cursor = 0
        self._command_cursor = 0
        self._pending_commands: Dict[int, Twist2D] = {}
        self._last_state: Optional[Tuple[int, float, Twist2D]] = None
        self._since_retrain = 0
        self._now = 0
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    # --- telemetry intake ---

    def _drain(self, topic: str, cursor: int) -> Tuple[List[Frame], int]:
        try:
            return self.bus.consume_all(topic, cursor)
        except CursorLagged as e:
            logger.warning(f"Learner fell behind on {topic}; resyncing at {e.oldest - 1}")
            return self.bus.consume_all(topic, e.oldest - 1)

    def ingest(self) -> int:
        """Turn newly published telemetry into transitions; returns how many were added"""
        # states first: a tick's command is always published before its state
        states, self._state_cursor = self._drain(Topics.PLANT_STATE, self._state_cursor)
        commands, self._command_cursor = self._drain(Topics.PLANT_COMMAND, self._command_cursor)
        for frame in commands:
            if frame.robot_id != self.robot_id:
                continue
            ux, uy, uomega_deg = frame.values
            self._pending_commands[frame.timestamp] = Twist2D(ux, uy, math.radians(uomega_deg))

        added = 0
        for frame in states:
            if frame.robot_id != self.robot_id:
                continue
            _, _, theta_deg, vx, vy, omega_deg = frame.values
            twist = Twist2D(vx, vy, math.radians(omega_deg))
            theta = math.radians(theta_deg)
            command = self._pending_commands.pop(frame.timestamp, None)
            if self._last_state is None:
                body = world_to_body(twist, theta)
            else:
                # the plant rotates a step's twist by the heading at the start of that step
                _, prev_theta, prev_body = self._last_state
                body = world_to_body(twist, prev_theta)
                if command is not None:
                    self.buffer.add(Transition(prev_body, command, body))
                    added += 1
            self._last_state = (frame.timestamp, theta, body)
            self._now = frame.timestamp
        for stale in [t for t in self._pending_commands if t <= self._now]:
            del self._pending_commands[stale]
        self._since_retrain += added
        return added

    # --- training ---

    def train_round(self) -> ModelParams:
        params = self.params
        for _ in range(self.config.epochs_per_round):
            params = sgd_epoch(params, self.buffer, self.config, self.rng)
        return params

    def _update_convergence(self, loss: float):
        self.loss_history.append(loss)
        recent = self.loss_history[-(CONVERGENCE_WINDOW + 1):]
        if len(recent) == CONVERGENCE_WINDOW + 1:
            deltas = [abs(b - a) for a, b in zip(recent, recent[1:])]
            if all(d < self.config.convergence_tol for d in deltas):
                if not self.converged:
                    logger.info(f"Residual model converged at loss {loss:.3f} (mm/s)^2")
                self.converged = True

    def publish_snapshot(self, params: ModelParams) -> Frame:
        """Version, store atomically, and announce a snapshot on model.snapshot"""
        if not params.is_finite():
            raise ValueError("Refusing to publish a non-finite model")
        self._update_convergence(params.train_loss)
        self.version += 1
        snapshot = params.with_changes(version=self.version, converged=self.converged)
        self.bus.snapshots.store(snapshot)
        frame = snapshot_frame(snapshot, self._now)
        self.bus.publish(Topics.MODEL_SNAPSHOT, frame)
        self.params = snapshot
        self.published.append(snapshot)
        logger.debug(f"Published snapshot v{snapshot.version} loss={snapshot.train_loss:.3f}")
        return frame

    def step(self) -> Optional[Frame]:
        """Lockstep hook: ingest, and retrain when enough new data arrived"""
        self.ingest()
        if self._since_retrain < self.config.retrain_every or len(self.buffer) == 0:
            return None
        self._since_retrain = 0
        return self.publish_snapshot(self.train_round())

    def consolidate(self) -> ModelParams:
        """Keep training on the final buffer until the converged flag is set"""
        rounds = 0
        while not self.converged and rounds < self.config.consolidation_rounds and len(self.buffer):
            self.publish_snapshot(self.train_round())
            rounds += 1
        if not self.converged:
            logger.warning(f"Model still not converged after {rounds} consolidation rounds")
        return self.params

    # --- free-run mode ---

    def start(self, poll_interval: float = 0.001):
        if self._thread is not None:
            return
        self._stop.clear()

        def loop():
            while not self._stop.is_set():
                self.step()
                self._stop.wait(poll_interval)

        self._thread = threading.Thread(target=loop, name='learning-server', daemon=True)
        self._thread.start()

    def stop(self):
        if self._thread is None:
            return
        self._stop.set()
        self._thread.join()
        self._thread = None
        self.step()
