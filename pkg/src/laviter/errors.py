class LaviterError(Exception):
    """Base class for every error raised by laviter."""


class DimensionError(LaviterError):
    pass


class ContractError(LaviterError):
    pass


class VocabularyError(LaviterError):
    pass


class DegenerateInputError(LaviterError):
    pass


class ConfigError(LaviterError):
    pass


class OrchestrationError(LaviterError):
    pass


class CheckpointError(LaviterError):
    pass


class SamplingError(LaviterError):
    pass


class DatasetError(LaviterError):
    pass
