"""Exception hierarchy. Every user-facing failure maps to one named class."""


class VtpruneError(Exception):
    """Base class for all package errors."""


class ShapeError(VtpruneError, ValueError):
    pass


class MaskError(VtpruneError, ValueError):
    """A softmax mask leaves some row with no admissible entry."""


class LayoutError(VtpruneError, ValueError):
    """Token modalities are not in the [TextPre*, Visual*, TextInstr*] order."""


class ScoringError(VtpruneError, ValueError):
    pass


class MissingIndexError(ScoringError):
    """A strategy needs an index (CLS, last instruction) that is absent."""

    def __init__(self, field, detail=""):
        self.field = field
        msg = f"missing required index: {field}"
        super().__init__(f"{msg} ({detail})" if detail else msg)


class MissingInstructionError(MissingIndexError):
    def __init__(self, detail="sequence has no TextInstr tokens"):
        super().__init__("instr_last_index", detail)


class BudgetError(VtpruneError, ValueError):
    pass


class ScheduleError(VtpruneError, ValueError):
    pass


class MergeError(VtpruneError, ValueError):
    pass


class DumpFormatError(VtpruneError, ValueError):
    """Malformed ``.vdmp`` content."""


class BadMagicError(DumpFormatError):
    pass


class VersionMismatchError(DumpFormatError):
    pass


class TruncatedPayloadError(DumpFormatError):
    pass


class ManifestError(VtpruneError, ValueError):
    pass


class GridError(VtpruneError, ValueError):
    pass
