"""Exception hierarchy shared by every stage of the pipeline."""


class KddLoamError(Exception):
    """Base class for all errors raised by this package."""


# features / io
class InsufficientNeighbors(KddLoamError):
    pass


class FormatError(KddLoamError, ValueError):
    """A file on disk does not match its expected layout."""


class CountMismatch(FormatError):
    pass


class MalformedHeader(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class SizeNotMultipleOf16(FormatError):
    pass


class FieldCountMismatch(FormatError):
    def __init__(self, line: int, count: int):
        super().__init__(f"line {line}: expected 12 fields, got {count}")
        self.line = line
        self.count = count


class NonNumeric(FormatError):
    def __init__(self, line: int, token: str):
        super().__init__(f"line {line}: non-numeric field {token!r}")
        self.line = line
        self.token = token


class IoFailure(KddLoamError, OSError):
    pass


class ConfigError(KddLoamError, ValueError):
    pass


# matchability
class EmptyResult(KddLoamError):
    pass


class EmptyNegatives(KddLoamError, ValueError):
    pass


class EmptyCorrespondences(KddLoamError, ValueError):
    pass


class NonPositiveSigma(KddLoamError, ValueError):
    pass


class LengthMismatch(KddLoamError, ValueError):
    pass


# matching
class NoValidDescriptors(KddLoamError):
    pass


class DegenerateConfiguration(KddLoamError):
    pass


class TooFewCandidates(KddLoamError):
    pass


class NoConsensus(KddLoamError):
    pass


# voxelmap
class NotFull(KddLoamError):
    pass


class NoSuchVoxel(KddLoamError, KeyError):
    pass


# icp
class NonUnitNormal(KddLoamError, ValueError):
    pass


class SingularSystem(KddLoamError):
    pass


class NoCorrespondences(KddLoamError):
    pass


# odometry
class MissingSaliency(KddLoamError, ValueError):
    pass


# eval
class TooShort(KddLoamError, ValueError):
    pass


class EmptyPairList(KddLoamError, ValueError):
    pass
