"""featbridge: export intermediate CNN features as embedding files.

Runs a frozen torchvision backbone over an image manifest and writes the
multi-scale float32 embedding format consumed by the scoring engine. The
two packages share only that wire format; neither imports the other.
"""

from .errors import ConfigError, DataError
from .extract import ExtractorConfig, ExtractResult, extract
from .wire import EMBEDDING_MAGIC, EMBEDDING_VERSION, load_manifest, write_embeddings

__all__ = [
    "ConfigError",
    "DataError",
    "EMBEDDING_MAGIC",
    "EMBEDDING_VERSION",
    "ExtractorConfig",
    "ExtractResult",
    "extract",
    "load_manifest",
    "write_embeddings",
]
