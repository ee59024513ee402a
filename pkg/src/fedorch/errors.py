"""Exception types raised across the federation stack.

All fedorch exceptions derive from FedorchError so callers can catch the
whole family at process boundaries while tests assert on the precise type.
"""


class FedorchError(Exception):
    """Base class for every error raised by this package."""


# --- tensor containers -------------------------------------------------------

class StructureMismatch(FedorchError):
    """Tensor maps disagree on entry names, order, or shapes."""


class EmptyUpdateSet(FedorchError):
    """Aggregation was asked to combine zero updates."""


class NonFiniteInput(FedorchError):
    """A NaN or infinity reached a tensor boundary."""


class MalformedEncoding(FedorchError):
    """A serialized tensor map is truncated, inconsistent, or non-finite."""


# --- trainer ------------------------------------------------------------------

class InvalidSpec(FedorchError):
    """Model specification violates its constraints."""


class DimensionMismatch(FedorchError):
    """Feature vector length disagrees with the model's input width."""


class EmptyBatch(FedorchError):
    """Loss/gradient requested on an empty batch."""


class NonFiniteLoss(FedorchError):
    """Scheduler observed a NaN or infinite validation loss."""


class EmptySplit(FedorchError):
    """Training requires nonempty train and validation splits."""


# --- datasets -----------------------------------------------------------------

class TooFewSamples(FedorchError):
    """Dataset too small to be split."""


class InvalidProfile(FedorchError):
    """Synthetic site profile violates its constraints."""


class DatasetParseError(FedorchError):
    """CSV dataset file is malformed; message names the offending row."""


class UnknownPreset(FedorchError):
    """Requested scenario preset does not exist."""


# --- metrics ------------------------------------------------------------------

class LengthMismatch(FedorchError):
    """Score and label sequences differ in length."""


class EmptyInput(FedorchError):
    """Metric requested on an empty sample."""


class SingleClass(FedorchError):
    """ROC-AUC is undefined when only one class is present."""


# --- wire protocol ------------------------------------------------------------

class OversizePayload(FedorchError):
    """Frame payload exceeds the configured cap."""


class UnknownMessageType(FedorchError):
    """Frame carries an undefined message-type code."""


class TruncatedFrame(FedorchError):
    """Byte stream ended before a complete frame."""


class MalformedPayload(FedorchError):
    """Frame payload does not match the documented layout."""


class NonceExpired(FedorchError):
    """Challenge nonce outlived its TTL."""


class NonceReused(FedorchError):
    """Challenge nonce unknown or already consumed."""


class BadProof(FedorchError):
    """HMAC proof does not match the registered token."""


class Unauthenticated(FedorchError):
    """Operation requires an authenticated session."""


# --- coordinator --------------------------------------------------------------

class WrongRound(FedorchError):
    """Update submitted for a round that is not currently open."""


class NotExpected(FedorchError):
    """Submitting node is not in the current round's expected set."""


class InsufficientNodes(FedorchError):
    """Fewer approved nodes than the configured minimum."""


class AlreadyRunning(FedorchError):
    """Federation start requested while a run is in progress."""


class CorruptCheckpoint(FedorchError):
    """Checkpoint file failed its checksum or layout validation."""


class Unauthorized(FedorchError):
    """Control-API request lacks a valid operator token."""


class Conflict(FedorchError):
    """Control-API command is invalid in the current state."""


# --- node agent / simulation ----------------------------------------------------

class FatalConfigError(FedorchError):
    """Node configuration is unusable; the agent must exit."""


class AuthRejected(FedorchError):
    """Coordinator rejected the node's credentials."""


class InvalidPlan(FedorchError):
    """Fault plan references impossible rounds or probabilities."""
