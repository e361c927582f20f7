"""Exception hierarchy shared by every colflow subsystem."""


class ColflowError(Exception):
    """Base class for all colflow errors."""


# -- columnar / relational ------------------------------------------------

class SchemaMismatch(ColflowError):
    pass


class IndexOutOfBounds(ColflowError):
    pass


class UnknownColumn(ColflowError):
    pass


class DuplicateResultName(ColflowError):
    pass


class KeyArityMismatch(ColflowError):
    pass


class KeyTypeMismatch(ColflowError):
    pass


class NonNumericAggregate(ColflowError):
    pass


class WrongType(ColflowError):
    pass


class UnsupportedCast(ColflowError):
    pass


class CastFailure(ColflowError):
    def __init__(self, msg, row=None):
        super().__init__(msg)
        self.row = row


# -- csv ------------------------------------------------------------------

class RaggedRow(ColflowError):
    pass


class UnclosedQuote(ColflowError):
    pass


class SinkFailure(ColflowError):
    pass


# -- communicator ---------------------------------------------------------

class CommError(ColflowError):
    pass


class RendezvousTimeout(CommError):
    pass


class RankCollision(CommError):
    pass


class VersionMismatch(CommError):
    pass


class PeerClosed(CommError):
    pass


class CommTimeout(CommError):
    pass


class LengthMismatch(CommError):
    pass


class OverflowFault(CommError):
    """Int64 SUM reduction left the 64-bit range."""


# -- distributed operators ------------------------------------------------

class ProbeTooLarge(ColflowError):
    pass


class DegenerateColumn(ColflowError):
    pass


# -- tensor bridge / training ---------------------------------------------

class NullInNumericBridge(ColflowError):
    pass


class ShapeMismatch(ColflowError):
    pass


class NonFiniteLoss(ColflowError):
    pass
