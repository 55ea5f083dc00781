"""Exception types shared across the framework."""


class RioError(Exception):
    """Base class for all framework errors."""


# --- schema / codec ---------------------------------------------------------

class EmptyExample(RioError):
    """Schema inference got an example payload with no fields."""


class UnsupportedValue(RioError):
    """Example payload contains a value the codec cannot describe."""


class SchemaMismatch(RioError):
    """Payload does not conform to the declared schema."""


class SchemaInferenceError(RioError):
    """Node spec example data could not be turned into schemas."""


# --- storage structures -----------------------------------------------------

class Empty(RioError):
    """Read from a buffer that holds no samples."""


class NotEnoughSamples(RioError):
    """last_k asked for more samples than the buffer retains."""


class NoSampleBefore(RioError):
    """nearest(t) found no sample at or before t."""


class NonMonotoneTimestamp(RioError):
    """Ring put with a timestamp not greater than the last stored one."""


class QueueFull(RioError):
    """Request queue has no free entry; producer must back off."""


# --- middleware -------------------------------------------------------------

class BackendError(RioError):
    """Transport-level failure not covered by a more specific error."""


class AddressInUse(BackendError):
    """TCP listen address already bound."""


class ShmNamespaceCollision(BackendError):
    """A shared-memory segment for this topic/namespace already exists."""


class Disconnected(BackendError):
    """Peer endpoint is gone (node exited, socket closed, segment unlinked)."""


class Timeout(BackendError):
    """Blocking call did not complete within its deadline."""


class RemoteError(BackendError):
    """Request handler on the server side raised; message carries the cause."""


class ProtocolViolation(BackendError):
    """Peer sent a frame that does not follow the documented protocol."""


# --- nodes / station --------------------------------------------------------

class UserHookError(RioError):
    """A user-supplied node hook raised; fatal to the node."""


class ReadyTimeout(RioError):
    """Not every node signalled ready in time.

    ``stragglers`` lists the node names that never became ready.
    """

    def __init__(self, stragglers):
        self.stragglers = list(stragglers)
        super().__init__(f"nodes never became ready: {', '.join(self.stragglers)}")


class UnknownRole(RioError):
    """Station config references a node spec that is not registered."""


class NoMatch(RioError):
    """No embodiment accepts the available client roles."""


class AmbiguousMatch(RioError):
    """More than one embodiment matches and neither is more specific."""


class ActionShapeMismatch(RioError):
    """Flat action vector length does not match the embodiment arity."""


# --- recorder ---------------------------------------------------------------

class NonMonotoneTimestep(RioError):
    """Step appended with a timestep not greater than the previous one."""


class UnitViolation(RioError):
    """Recorded value is outside declared physical bounds (wrong units?)."""


class CorruptContainer(RioError):
    """Episode container failed magic/offset/length validation."""


class VersionMismatch(RioError):
    """Episode container was written by an incompatible format version."""


class IncompatibleVersions(RioError):
    """Datasets being mixed were exported by incompatible format versions."""


# --- policy runtime ---------------------------------------------------------

class PolicyError(RioError):
    """Policy interface failed to convert an observation or run inference."""


class Starved(RioError):
    """Async executor had no action available at a control tick."""


# --- bench ------------------------------------------------------------------

class TooFewPasses(RioError):
    """Latency benchmark needs at least 100 passes for the trimmed statistic."""
