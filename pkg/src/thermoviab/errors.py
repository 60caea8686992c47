"""Exception taxonomy shared by the pipeline, CLI, and gateway.

Every error carries an ``exit_code`` used by the CLI: 1 usage, 3 data error,
4 model error (2 is reserved for the review-required signal, which is not an
exception).
"""


class ThermoviabError(Exception):
    exit_code = 3


class UsageError(ThermoviabError):
    exit_code = 1


class DataError(ThermoviabError):
    exit_code = 3


class ModelError(ThermoviabError):
    exit_code = 4


# case storage -----------------------------------------------------------

class MissingManifest(DataError):
    pass


class CorruptManifest(DataError):
    pass


class CorruptPayload(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class NonMonotonicTimestamps(DataError):
    pass


class InvalidTemperature(DataError):
    pass


class MissingAnnotation(DataError):
    pass


class InvalidAnnotation(DataError):
    pass


class DegeneratePolygon(DataError):
    pass


class IoFailure(DataError):
    pass


# registration -----------------------------------------------------------

class FlatImage(DataError):
    pass


class Diverged(DataError):
    def __init__(self, message, frame_index=None):
        super().__init__(message)
        self.frame_index = frame_index


class NonInvertibleWarp(DataError):
    pass


# segmentation -----------------------------------------------------------

class NoColdRegion(DataError):
    pass


class EmptyDataset(DataError):
    pass


class NonFiniteLoss(ModelError):
    pass


# features ---------------------------------------------------------------

class EmptyRegion(DataError):
    pass


class TooFewPairs(DataError):
    pass


class FeatureExtractionError(DataError):
    """Aggregates a family-level failure with the family name attached."""

    def __init__(self, family, cause):
        super().__init__(f"{family}: {cause}")
        self.family = family
        self.cause = cause


# learning ---------------------------------------------------------------

class DegenerateData(ModelError):
    pass


class SingleClass(ModelError):
    pass


class TooFewSamples(ModelError):
    pass


class MissingFamily(ModelError):
    pass


# metrics ----------------------------------------------------------------

class EmptyClass(DataError):
    pass


class TooFewCases(DataError):
    pass


# phantom ----------------------------------------------------------------

class InvalidSpec(UsageError):
    pass


# orchestration ----------------------------------------------------------

class StageOrderError(DataError):
    """A pipeline stage was requested before its prerequisites exist."""
