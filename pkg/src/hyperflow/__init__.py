"""Semantic correspondence with multi-layer hyperpixel features.

Subpackages split along the pipeline: feature stacks on disk
(``feature_io``), hyperimage assembly (``hyperimage``), regularized
Hough matching (``rhm``), dense flow and keypoint transfer (``flow``),
dataset evaluation (``evaluation``), layer-subset beam search
(``layersearch``), and the command line front end (``cli``).
"""

__version__ = "0.1.0"
