"""Exception types shared across the package."""


class ProsimaError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(ProsimaError):
    pass


class ImageTooSmall(ProsimaError):
    pass


class MissingShard(ProsimaError):
    pass


class InconsistentShard(ProsimaError):
    pass


class InvalidDim(ProsimaError):
    pass


class EmptyLeaves(ProsimaError):
    pass


class IndexOutOfRange(ProsimaError):
    pass


class InvalidParams(ProsimaError):
    pass


class InvalidPolicyParam(ProsimaError):
    pass


class MissingMetadataKey(ProsimaError):
    pass


class MetadataTooLarge(ProsimaError):
    pass


class InvalidMetadata(ProsimaError):
    pass


class UnverifiedTransaction(ProsimaError):
    pass


class ChainCorrupt(ProsimaError):
    pass


class LedgerFormatError(ProsimaError):
    """Raised when serialized ledger or latent bytes cannot be parsed."""


class NotFound(ProsimaError):
    pass


class ConfigInvalid(ProsimaError):
    pass


class RankOutOfRange(ProsimaError):
    pass


class InvalidAlpha(ProsimaError):
    pass


class DegenerateData(ProsimaError):
    pass


class TamperedRecord(ProsimaError):
    def __init__(self, node_id: str, message: str = ""):
        self.node_id = node_id
        super().__init__(message or f"record for node {node_id!r} failed verification")


class ConfigError(ProsimaError):
    """Invalid experiment configuration (bad file, bad field, bad value)."""


class ConsensusAbort(ProsimaError):
    """Raised when a required consensus round fails to reach quorum."""
