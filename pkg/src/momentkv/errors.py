"""Exception taxonomy shared by all momentkv modules."""


class MomentKVError(Exception):
    """Base class for every error raised by this package."""


# --- cache pool errors ---

class AlreadyPrefilled(MomentKVError):
    """Prompt slots were written to a pool that already holds a prompt."""


class EmptyPrompt(MomentKVError):
    """A generation was started with zero prompt tokens."""


class NotPrefilled(MomentKVError):
    """Decode-phase operation attempted before the prompt was cached."""


class IndexOutOfRange(MomentKVError):
    """An eviction index does not refer to a live decode slot."""


class PrefillEvictionAttempt(MomentKVError):
    """Reserved: no public API can currently express a prompt-slot eviction,
    but the error code exists so future index schemes keep the guarantee."""


class DimensionMismatch(MomentKVError):
    """A slot's key/value vectors disagree with the pool's head layout."""


# --- policy errors ---

class LengthMismatch(MomentKVError):
    """An attention row's length disagrees with the cache it describes."""


class OverflowTooLarge(MomentKVError):
    """More victims were requested than the decode pool can supply."""


class BudgetTooSmall(MomentKVError):
    """A policy's reserved regions cannot fit inside its decode budget."""


class NoEvictableTokens(MomentKVError):
    """Every decode token is exempt, yet an eviction was required."""


# --- toy model errors ---

class TokenOutOfVocab(MomentKVError):
    """A token id is outside the configured vocabulary."""


# --- trace file errors ---

class BadMagic(MomentKVError):
    """The file does not start with the expected trace format tag."""


class TruncatedTrace(MomentKVError):
    """The file ended before the header-declared payload was complete."""


class NormalizationViolation(MomentKVError):
    """An attention row's weights do not sum to one within tolerance."""


class InvalidDipWindow(MomentKVError):
    """A synthetic attention dip lies outside the generated step range."""


class BadConcentration(MomentKVError):
    """Recency-burst concentration must lie in (0, 1]."""


# --- metrics errors ---

class RunTooShort(MomentKVError):
    """The run has no step with a full recency window to measure."""


class HorizonExceedsTrace(MomentKVError):
    """No eviction event has enough future trace steps for the oracle."""
