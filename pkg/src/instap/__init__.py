"""Instance-aware video-text pretraining on a synthetic shapes world."""

from .kernels import BACKEND
from .schema import Box, InstanceAnnotation, Sample, generate_dataset, read_dataset, write_dataset

__version__ = "0.1.0"

__all__ = ["BACKEND", "Box", "InstanceAnnotation", "Sample", "generate_dataset", "read_dataset", "write_dataset",
           "__version__"]
