"""Exception hierarchy shared across the package."""


class MoldaptError(Exception):
    """Base class for all package errors."""


# --- SMILES parsing ---

class SmilesError(MoldaptError):
    """Malformed SMILES input."""


class UnbalancedBranch(SmilesError):
    pass


class UnclosedRing(SmilesError):
    pass


class UnknownElement(SmilesError):
    pass


class ValenceViolation(SmilesError):
    pass


class MultiFragment(SmilesError):
    """Dot-disconnected SMILES are rejected rather than silently split."""


# --- features ---

class InsufficientData(MoldaptError):
    pass


class WidthMismatch(MoldaptError):
    pass


# --- clustering / splits ---

class TooFewClusters(MoldaptError):
    pass


# --- tokenizer ---

class EmptyCorpus(MoldaptError):
    pass


# --- encoder / objectives ---

class ShapeMismatch(MoldaptError):
    pass


class NoMaskedTokens(MoldaptError):
    pass


class ZeroVector(MoldaptError):
    pass


class EmptyDomainCorpus(MoldaptError):
    pass


# --- downstream ---

class DegenerateData(MoldaptError):
    pass


class ZeroVariance(MoldaptError):
    pass


class TokenizationFailure(MoldaptError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


# --- stats ---

class ZeroVarianceDifferences(MoldaptError):
    pass


class IncompleteTable(MoldaptError):
    pass
