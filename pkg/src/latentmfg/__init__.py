"""Major-minor LQG mean field games with a latent-chain common process."""

from .model import ModelSpec, TimeGrid, load_bundled, load_model, validate

__version__ = "0.1.0"

__all__ = ["ModelSpec", "TimeGrid", "load_model", "load_bundled", "validate", "__version__"]
