class AtlasError(Exception):
    """Base class for atlas failures."""


class CorpusError(AtlasError):
    """Malformed or unusable corpus input."""


class ConfigError(AtlasError):
    """Invalid or inconsistent configuration."""


class GraphError(AtlasError):
    """Unknown vertex or malformed structure graph."""


class TrainingDiverged(AtlasError):
    """Loss became non-finite during optimization."""


class UnmappableContext(AtlasError):
    """Dialog context cannot be mapped to any graph vertex."""
