"""Multi-head selective-scan 3D segmentation network in pure numpy."""
from .autodiff import Tensor, backward, grad_check, no_grad
from .network import MHMambaNet, NetworkConfig, parameter_report

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "grad_check", "no_grad", "MHMambaNet", "NetworkConfig",
           "parameter_report", "__version__"]
