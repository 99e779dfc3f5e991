"""Input-adaptive redundancy reduction for 3-D video CNNs, on a small numpy autograd."""

__version__ = "0.1.0"

from .tensor import Tape, Tensor, precision  # noqa: E402
from .models import Model, ModelSpec, build_model, get_spec, model_flops  # noqa: E402

__all__ = ["Tape", "Tensor", "precision", "Model", "ModelSpec", "build_model", "get_spec", "model_flops",
           "__version__"]
