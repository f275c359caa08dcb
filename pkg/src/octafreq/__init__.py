"""octafreq: frequency-domain enhancement and quantification of OCTA volumes.

The package combines a small reverse-mode autodiff kernel (:mod:`.tensor`,
:mod:`.spectral`), a dual-branch spatial/spectral restoration network
(:mod:`.blocks`, :mod:`.model`, :mod:`.training`), depth-wise tail-artifact
filtering (:mod:`.masf`), synthetic vascular phantoms (:mod:`.phantom`),
image-quality metrics (:mod:`.metrics`) and 3-D vessel quantification
(:mod:`.vessels`).  ``octafreq --help`` lists the command-line surface.
"""

__version__ = "0.1.0"

from .volume import Volume, read_volume, write_volume  # noqa: F401
