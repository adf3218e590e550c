"""Two-phase masked-autoencoder pretraining and fine-tuning for OCT-like scans.

The package is self-contained: a float64 reverse-mode tensor engine, ViT /
Swin / SwinV2 encoders and decoders, a ResNet baseline, synthetic domains,
metrics and a cross-dataset evaluation harness.
"""

__version__ = "0.1.0"

from .errors import (CheckpointError, ConfigError, DataError, IntegrityError, NumericalError, OctsnError,
                     ShapeError, TransferError, UndefinedMetricError, UsageError)
