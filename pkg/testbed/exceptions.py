"""
Errors raised by the testbed services.

Services raise these; management commands and API views catch them at the
boundary and report them.
"""


class TestbedError(Exception):
    """Base class for every testbed failure"""


class NonholonomicViolation(TestbedError):
    """Lateral velocity requested from a chassis that cannot translate sideways"""


class NonFiniteState(TestbedError):
    """Plant state overflowed; plant parameters are mis-tuned"""


class PlanExhausted(TestbedError):
    """All waypoints of the plan have been consumed"""


class ModelUnavailable(TestbedError):
    """No converged model snapshot to correct commands with"""


class StaleObservation(TestbedError):
    """Observation is older than the state it should update"""


class RankDeficient(TestbedError):
    """Normal equations are singular; the data lacks excitation"""


class Diverged(TestbedError):
    """Training loss blew up; the learning rate is too high"""


class ChecksumMismatch(TestbedError):
    """Frame checksum does not match its bytes"""


class MalformedFrame(TestbedError):
    """Hex frame has a bad length or bad characters"""


class FieldOverflow(TestbedError):
    """Payload value does not fit the 16-bit fixed-point field"""


class CursorLagged(TestbedError):
    """Consumer cursor points at a frame the ring already evicted"""

    def __init__(self, topic: str, cursor: int, oldest: int):
        super().__init__(f"cursor {cursor} on '{topic}' is behind oldest retained seq {oldest}")
        self.topic = topic
        self.cursor = cursor
        self.oldest = oldest


class IoFailure(TestbedError):
    """Disk log or report could not be written or read"""


class ConfigInvalid(TestbedError):
    """Experiment configuration has a bad or missing value"""


class LengthMismatch(TestbedError):
    """Two series that must be tick-aligned have different lengths"""
