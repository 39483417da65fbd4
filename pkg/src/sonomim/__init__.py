"""Self-supervised pretraining for ultrasound imagery at desk scale.

Two training signals share one encoder: masked-patch reconstruction and a
multi-level anatomy classifier whose scores are forced to respect the
part/organ/structure hierarchy. The package also ships the corpus curation
pipeline, a synthetic speckle-phantom generator, and a frozen-encoder
linear-probe harness.
"""

__version__ = "0.1.0"

from sonomim.kernels import BACKEND as kernel_backend  # noqa: F401
