"""Exception types shared across the package."""


class FogstreamError(Exception):
    """Base class for all package errors."""


class PastEvent(FogstreamError):
    """An event was scheduled before the current virtual time."""


class LinkDown(FogstreamError):
    """Send attempted over a link that is down; the message is dropped."""


class UnknownTarget(FogstreamError):
    """A fault script or message referenced a node/link that does not exist."""


class DuplicateId(FogstreamError):
    pass


class DanglingLink(FogstreamError):
    pass


class QuerySyntaxError(FogstreamError):
    """The query text does not conform to the dialect."""


class UnknownStream(FogstreamError):
    pass


class UnknownField(FogstreamError):
    pass


class UnknownOp(FogstreamError):
    pass


class TypeMismatch(FogstreamError):
    """Schema type error; message carries op id and field name."""


class Infeasible(FogstreamError):
    """No capacity-respecting placement exists."""


class NodeUnreachable(FogstreamError):
    pass


class ReplayGap(FogstreamError):
    """A needed sequence number was already truncated from an upstream log."""


class UnboundedSpeed(FogstreamError):
    """Skip-horizon math needs a max_speed bound that is missing."""


class NoSamples(FogstreamError):
    pass


class ScenarioError(FogstreamError):
    """Scenario file failed validation; message carries file and line."""
