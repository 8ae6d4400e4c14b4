"""Progressive segmentation-guided scene text removal."""

from .model import (PSSTRNet, PSSTRNetConfig, IterationState, adaptive_fuse, compose_region,
                    merge_masks, parameter_count)

__version__ = "0.1.0"
