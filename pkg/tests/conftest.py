"""Shared builders for small feature stacks used across the test suite."""

import numpy as np

from hyperflow.feature_io import FeatureMap, FeatureStack, LayerGeometry


def geom(stride=4.0, offset=2.0, rf=16.0):
    return LayerGeometry(
        stride_y=stride, stride_x=stride, offset_y=offset, offset_x=offset, rf_size=rf
    )


def layer(layer_id, values, geometry=None):
    values = np.asarray(values, dtype=np.float32)
    return FeatureMap(
        layer_id=layer_id, values=values, geometry=geometry or geom()
    )


def stack(layers, image_dims=(64, 64), image_id="test"):
    return FeatureStack(
        image_id=image_id,
        image_height=image_dims[0],
        image_width=image_dims[1],
        layers=tuple(layers),
    )


def ramp(c, h, w, start=0.0):
    """Deterministic distinct values, (c, h, w) float32."""
    return (start + np.arange(c * h * w, dtype=np.float32)).reshape(c, h, w)
