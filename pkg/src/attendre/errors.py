"""Exception hierarchy shared by every module."""


class AttendreError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(AttendreError, ValueError):
    pass


class EmptyInput(AttendreError, ValueError):
    pass


class OrderError(AttendreError, ValueError):
    pass


class CapacityError(AttendreError, ValueError):
    pass


class EmptyMemoryError(AttendreError, LookupError):
    pass


class AlignmentError(AttendreError, ValueError):
    pass


class ConfigError(AttendreError, ValueError):
    pass
