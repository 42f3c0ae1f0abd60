"""Exception hierarchy shared by every layer of the library."""


class MRPError(Exception):
    """Base class for all library errors."""


# multicast API
class UnknownGroup(MRPError):
    pass


class PayloadTooLarge(MRPError):
    """Payload is empty or exceeds the configured maximum size."""


class NotConnected(MRPError):
    pass


class AlreadySubscribed(MRPError):
    pass


class Timeout(MRPError, TimeoutError):
    pass


class SubscriptionClosed(MRPError):
    pass


class ConcurrentConsumer(MRPError):
    """Two threads called next_delivery on the same subscription."""


# ring consensus
class NoLiveAcceptor(MRPError):
    pass


class NotCoordinator(MRPError):
    pass


class NoPromisedRange(MRPError):
    pass


class Preempted(MRPError):
    def __init__(self, ballot):
        super().__init__(f"preempted by ballot {ballot}")
        self.ballot = ballot


class StaleBallot(MRPError):
    pass


class Trimmed(MRPError):
    pass


class Undecided(MRPError):
    pass


# merge
class OutOfOrderInstance(MRPError):
    pass


# pacing
class NoSamples(MRPError):
    pass


# recovery
class StoreUnavailable(MRPError):
    pass


class SubscriptionMismatch(MRPError):
    pass


class ValidityViolated(MRPError):
    pass


# membership / transport
class DuplicateNode(MRPError):
    pass


class LinkDown(MRPError):
    pass


class RegistryUnreachable(MRPError):
    pass


class BindFailure(MRPError):
    pass


# harness
class HorizonExceeded(MRPError):
    pass


class InvalidScenario(MRPError):
    pass


class KeyNotFound(MRPError):
    pass


class FrameError(MRPError):
    """Malformed wire frame."""
