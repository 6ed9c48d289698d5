"""CNN feature-stack export and annotation conversion.

Runs ResNet backbones over image directories and writes each image's
multi-layer pre-ReLU activations, with image-space geometry, to the
HFM1 container consumed by the matching engine; also converts native
SPair-style pair annotations to the matcher's JSON-lines format.
"""

__version__ = "0.1.0"
