"""Edge agreement loss for instance-mask heads, with a desk-scale training harness."""
from .filters import FilterSet, Kernel, gaussian_kernel_3x3, get_filter_set
from .grid import InvalidInputError, PaddingMode, conv2d, conv2d_input_grad, elementwise
from .loss import (LossConfig, LossResult, combined_mask_loss, edge_agreement_loss, lp_loss,
                   mask_bce_loss, smooth_mask)

__version__ = "0.1.0"
