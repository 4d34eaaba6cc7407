"""Exception hierarchy.

Every error carries a ``category`` (the class name by default) so the CLI can
report a machine-readable failure reason.
"""


class SpoofAttrError(Exception):
    """Base class for all toolkit errors."""

    @property
    def category(self) -> str:
        return type(self).__name__


# dataio
class MagicMismatch(SpoofAttrError):
    pass


class DimensionMismatch(SpoofAttrError):
    pass


class NonFiniteValue(SpoofAttrError):
    pass


class DuplicateUtteranceId(SpoofAttrError):
    pass


class CountMismatch(SpoofAttrError):
    pass


class UnknownValueName(SpoofAttrError):
    pass


class MissingAttribute(SpoofAttrError):
    pass


class NoAttributeGroundTruth(SpoofAttrError):
    pass


class PartitionOverlap(SpoofAttrError):
    pass


class UnknownUtterance(SpoofAttrError):
    pass


class UnsupportedVersion(SpoofAttrError):
    pass


# nnet
class NonFiniteActivation(SpoofAttrError):
    pass


class NonFiniteLoss(SpoofAttrError):
    pass


class EmptyDataset(SpoofAttrError):
    pass


# attribank
class NoSpoofedData(SpoofAttrError):
    pass


class AttributeWithSingleValueInTrain(SpoofAttrError):
    pass


class DegenerateScorePool(SpoofAttrError):
    pass


# backends
class EmptyClass(SpoofAttrError):
    pass


class SchemaMismatch(SpoofAttrError):
    pass


class SingleClass(SpoofAttrError):
    pass


class EmptyData(SpoofAttrError):
    pass


class UnknownClass(SpoofAttrError):
    pass


# metrics
class EmptyPool(SpoofAttrError):
    pass


class EmptyClassRow(SpoofAttrError):
    pass


class AlignmentError(SpoofAttrError):
    pass


# explain
class TooManyFeatures(SpoofAttrError):
    pass


class EmptyBackground(SpoofAttrError):
    pass


class EmptyReportSet(SpoofAttrError):
    pass


class NonFiniteScore(SpoofAttrError):
    pass


# protogen
class MissingSpeaker(SpoofAttrError):
    pass


class UnknownAttack(SpoofAttrError):
    pass


class NonConvergenceWarning(UserWarning):
    """Iterative fit hit its iteration cap before reaching tolerance."""
