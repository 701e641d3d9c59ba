"""Exception hierarchy shared across the package."""


class BrickForgeError(Exception):
    pass


class OutOfBounds(BrickForgeError, ValueError):
    pass


class Collision(BrickForgeError, ValueError):
    pass


class EmptyInput(BrickForgeError, ValueError):
    pass


class Disconnected(BrickForgeError, ValueError):
    pass


class GenerationStuck(BrickForgeError, RuntimeError):
    pass


class TooLarge(BrickForgeError, ValueError):
    pass


class ParseError(BrickForgeError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(BrickForgeError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(FormatError):
    pass


class ShapeMismatch(BrickForgeError, ValueError):
    pass


class NotScalar(BrickForgeError, ValueError):
    pass


class BadImageSize(BrickForgeError, ValueError):
    pass


class TooManyBricks(BrickForgeError, ValueError):
    pass


class IndexOutOfRange(BrickForgeError, IndexError):
    pass


class LengthMismatch(BrickForgeError, ValueError):
    pass


class SizeMismatch(BrickForgeError, ValueError):
    pass


class DataError(BrickForgeError, ValueError):
    pass
