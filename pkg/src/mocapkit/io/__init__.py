"""Archive format, configuration and synthetic scenes."""
from .archive import SCHEMA_VERSION, SequenceArchive, read_archive, write_archive

__all__ = ["SCHEMA_VERSION", "SequenceArchive", "read_archive", "write_archive"]
