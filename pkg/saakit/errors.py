from pathlib import Path


class SaakitError(Exception):
    pass


class ManifestError(SaakitError):
    def __init__(
        self,
        msg: str,
        path: Path | None = None,
        line_num: int | None = None,
    ):
        self.msg = msg
        self.path = path
        self.line_num = line_num
        where = ""
        if path is not None:
            where = f"{path}:{line_num}: " if line_num else f"{path}: "
        elif line_num is not None:
            where = f"line {line_num}: "
        super().__init__(f"{where}{msg}")


class SaaParseError(SaakitError):
    def __init__(self, msg: str, offset: int):
        self.msg = msg
        self.offset = offset
        super().__init__(f"offset {offset}: {msg}")


class EmptyReferenceError(SaakitError):
    pass


class AlignmentMismatchError(SaakitError):
    pass


class ClusterError(SaakitError):
    pass


class SynthesisError(SaakitError):
    pass


class AudioFormatError(SaakitError):
    pass


class MissingSpeakerError(SaakitError):
    def __init__(self, speaker_id: str, what: str = "id map"):
        self.speaker_id = speaker_id
        super().__init__(f"Speaker {speaker_id!r} missing from {what}")
