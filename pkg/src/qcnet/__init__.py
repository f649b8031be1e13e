"""qcnet: volumetric deep-learning quality control for diffusion MRI."""

__version__ = "0.1.0"

from . import backend  # noqa: F401  (selects the conv backend at import)
