"""Few-shot image translation by distilling a GAN teacher pair into a student translator."""
from .exceptions import (
    ConfigurationError,
    ContractError,
    GPDError,
    IngestionError,
    TrainingDivergence,
)

__version__ = "0.1.0"
