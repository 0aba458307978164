"""Exception types shared across the package."""


class MaskSelectError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(MaskSelectError):
    pass


class LengthMismatch(MaskSelectError):
    pass


class EmptyInput(MaskSelectError):
    pass


class InvalidSize(MaskSelectError):
    pass


class ParseError(MaskSelectError):
    pass


class SchemaVersionMismatch(MaskSelectError):
    pass


class InvalidTemperature(MaskSelectError):
    pass


class InvalidHeadCount(MaskSelectError):
    pass


class MissingGradient(MaskSelectError):
    pass


class InvalidSchedule(MaskSelectError):
    pass


class NonFiniteEvaluation(MaskSelectError):
    pass


class EmptyProposalSet(MaskSelectError):
    pass


class IndexOutOfRange(MaskSelectError):
    pass


class ShapeMismatch(MaskSelectError):
    pass


class VersionMismatch(MaskSelectError):
    pass


class InvalidConfig(MaskSelectError):
    pass


class DataMissing(MaskSelectError):
    pass


class NonFiniteLoss(MaskSelectError):
    pass


class UnknownStrategy(MaskSelectError):
    pass


class CorpusTooSmall(MaskSelectError):
    pass


class InvalidTemplate(MaskSelectError):
    pass


class EmptyObjects(MaskSelectError):
    pass


class NoQuestionsFound(MaskSelectError):
    pass


class NoValidPairs(MaskSelectError):
    pass


class ProviderUnavailable(MaskSelectError):
    pass


class MalformedResponse(MaskSelectError):
    pass
