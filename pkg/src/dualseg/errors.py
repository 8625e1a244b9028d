"""Exception types shared across the package."""


class DualsegError(Exception):
    """Base class for all errors raised by dualseg."""


class ConfigError(DualsegError):
    """Invalid or inconsistent configuration."""


class DatasetError(DualsegError):
    """Dataset directory, manifest, or tile files are missing or corrupt."""


class UnknownIdError(DatasetError):
    """A tile id is not listed in the manifest."""


class ShapeError(DualsegError):
    """Array shapes do not match the declared contract."""


class DivergenceError(DualsegError):
    """Training produced a non-finite loss."""
