"""Any-to-any voice conversion by fragment-level attention over target mel spectrograms."""

from .audio import AudioConfig
from .config import RunConfig, load_config
from .model import FragmentVC, ModelConfig
from .training import TrainConfig

__all__ = ["AudioConfig", "FragmentVC", "ModelConfig", "RunConfig", "TrainConfig", "load_config"]
