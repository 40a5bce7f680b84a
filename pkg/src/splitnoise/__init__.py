"""Privacy-preserving split inference with learned additive noise.

A frozen classifier is cut into an edge partition and a cloud partition;
an additive noise tensor at the cut is the only trainable object.  The
package trains such noise against an accuracy budget, collects the fitted
Laplace distributions with their order structure, resamples fresh noise
at inference time, and measures the information the transmitted
activation still carries about the input.
"""

from .tensor import Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "__version__"]
