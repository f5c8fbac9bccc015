"""Exception hierarchy. Every error carries a machine-readable ``kind``
string that the HTTP service and CLI surface verbatim."""


class IsrfError(Exception):
    kind = "error"


class InvalidInputError(IsrfError):
    kind = "invalid_input"


class GeometryMismatchError(IsrfError):
    kind = "geometry_mismatch"


class DimensionMismatchError(IsrfError):
    kind = "dimension_mismatch"


class EmptySelectionError(IsrfError):
    kind = "empty_selection"


class EmptyHistoryError(IsrfError):
    kind = "empty_history"


class ArchiveError(IsrfError):
    kind = "archive_error"


class ArchiveVersionError(ArchiveError):
    kind = "version_mismatch"


class ArchiveShapeError(ArchiveError):
    kind = "shape_mismatch"


class ArchiveMissingFileError(ArchiveError):
    kind = "missing_file"


class DatasetError(IsrfError):
    kind = "dataset_error"
