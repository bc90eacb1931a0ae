"""File-format errors shared by clip and checkpoint readers."""


class FormatError(ValueError):
    code = "format error"

    def __init__(self, detail: str = ""):
        super().__init__(f"{self.code}: {detail}" if detail else self.code)


class BadMagicError(FormatError):
    code = "bad magic"


class UnsupportedVersionError(FormatError):
    code = "unsupported version"


class TruncatedError(FormatError):
    code = "truncated payload"


class CorruptManifestError(FormatError):
    code = "corrupt manifest"


class ManifestMismatchError(FormatError):
    code = "manifest mismatch"
