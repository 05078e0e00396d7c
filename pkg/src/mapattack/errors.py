"""Exception hierarchy.

CLI exit codes map onto these: ConfigError -> 3, ExternalServiceError -> 4,
anything else derived from MapAttackError -> 5.
"""

from __future__ import annotations


class MapAttackError(Exception):
    pass


class InvalidGeometryError(MapAttackError, ValueError):
    pass


class InsufficientPointsError(InvalidGeometryError):
    pass


class ConfigError(MapAttackError, ValueError):
    pass


class SceneFormatError(MapAttackError):
    pass


class SchemaVersionError(SceneFormatError):
    pass


class ChecksumError(SceneFormatError):
    pass


class ImageDecodeError(SceneFormatError):
    def __init__(self, camera_id: str, path: str, reason: str):
        super().__init__(f"camera {camera_id!r}: cannot decode {path}: {reason}")
        self.camera_id = camera_id
        self.path = path


class ExternalServiceError(MapAttackError):
    """Transport, auth or protocol failure talking to an external service."""

    def __init__(self, message: str, endpoint: str | None = None):
        if endpoint:
            message = f"{message} (endpoint: {endpoint})"
        super().__init__(message)
        self.endpoint = endpoint


class RefinementFailedError(ExternalServiceError):
    pass


class OracleUnavailableError(ExternalServiceError):
    pass


class WireDecodeError(MapAttackError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class MissingArtifactError(MapAttackError):
    def __init__(self, stage: str, path: str):
        super().__init__(f"stage {stage!r} artifact missing: {path} (re-run `mapattack {stage}`)")
        self.stage = stage
        self.path = path


class SceneFileMissingError(SceneFormatError, FileNotFoundError):
    pass


class PatchBoundsError(MapAttackError, IndexError):
    pass
