"""Exception hierarchy shared by every stage of the pipeline."""


class DPUAError(Exception):
    """Base class for all engine errors."""


class DataError(DPUAError):
    pass


class MalformedRecord(DataError):
    def __init__(self, line, reason):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


class EmptyDataset(DataError):
    pass


class CountInvariantViolated(DataError):
    pass


class ZeroAnnotators(CountInvariantViolated):
    pass


class InvalidProfile(DataError):
    pass


class MissingReferenceRationale(DataError):
    pass


class ConfidenceOutOfRange(DPUAError, ValueError):
    pass


class InvalidDistribution(DPUAError, ValueError):
    pass


# policy
class PolicyError(DPUAError):
    pass


class SequenceTooLong(PolicyError):
    pass


class TokenOutOfVocabulary(PolicyError):
    pass


class InvalidTemperature(PolicyError, ValueError):
    pass


class NonFiniteGradient(PolicyError):
    pass


class ShapeMismatch(PolicyError):
    pass


class MalformedTarget(PolicyError):
    pass


class CorruptCheckpoint(PolicyError):
    pass


class VersionMismatch(PolicyError):
    pass


# losses / rewards
class EmptySpan(DPUAError, ValueError):
    pass


class IndexOutOfRange(DPUAError, IndexError):
    pass


class AgreementOutOfRange(DPUAError, ValueError):
    pass


class EmptyBatch(DPUAError, ValueError):
    pass


class LikertOutOfRange(DPUAError, ValueError):
    pass


class InputOutOfRange(DPUAError, ValueError):
    pass


class MissingJudgeScores(DPUAError):
    pass


class EmptyReference(DPUAError, ValueError):
    pass


class JudgeUnavailable(DPUAError):
    pass


class JudgeMalformedReply(DPUAError):
    pass


class GroupTooSmall(DPUAError, ValueError):
    pass


class NonFiniteReward(DPUAError, ValueError):
    pass


class ConfigError(DPUAError, ValueError):
    pass


# evaluation
class EmptyEvalSet(DPUAError, ValueError):
    pass


class DegenerateSeries(DPUAError, ValueError):
    pass
