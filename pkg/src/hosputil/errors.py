"""Exception hierarchy shared by all hosputil modules."""


class HosputilError(Exception):
    """Base class for domain errors; the CLI maps these to exit code 1."""

    module = "hosputil"


# xport ------------------------------------------------------------------

class XportError(HosputilError):
    module = "xport"


class MalformedHeader(XportError):
    pass


class TruncatedFile(XportError):
    pass


class InconsistentNamestr(XportError):
    pass


class UnsupportedXportVersion(XportError):
    pass


class UnrepresentableName(XportError):
    pass


class UnrepresentableValue(XportError):
    pass


class DuplicateId(XportError):
    pass


# table ------------------------------------------------------------------

class TableError(HosputilError):
    module = "table"


class CycleMismatch(TableError):
    pass


class ColumnCollision(TableError):
    pass


class UnharmonizableVariable(TableError):
    pass


class MissingVariable(TableError):
    pass


class UnmappedLevel(TableError):
    pass


class TableFormatError(TableError):
    pass


# impute -----------------------------------------------------------------

class ImputeError(HosputilError):
    module = "impute"


class NoDonors(ImputeError):
    pass


class SingleLevel(ImputeError):
    pass


# glm --------------------------------------------------------------------

class FitError(HosputilError):
    module = "glm"


class EmptyDesign(FitError):
    pass


class ReferenceLevelUnobserved(FitError):
    pass


class RankDeficient(FitError):
    pass


class DidNotConverge(FitError):
    pass


class SingularSubcovariance(FitError):
    pass


class DegenerateSample(FitError):
    pass


class UnknownLevel(FitError):
    pass


# risk -------------------------------------------------------------------

class RiskError(HosputilError):
    module = "risk"


class InvalidSpec(RiskError):
    pass


class IoFailure(RiskError):
    pass


# serve ------------------------------------------------------------------

class ServeError(HosputilError):
    module = "serve"


class ChecksumMismatch(ServeError):
    pass


class UnsupportedVersion(ServeError):
    pass


class SplitTooSmall(ServeError):
    pass


class ManifestError(ServeError):
    pass


# warnings ---------------------------------------------------------------

class SeparationWarning(UserWarning):
    """Quasi-separation detected; estimates are ridge-stabilised."""


class ImputationWarning(UserWarning):
    pass
