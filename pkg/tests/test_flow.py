"""Flow formation, tie breaking, keypoint transfer, and the text table."""

import io

import numpy as np
import pytest

from hyperflow.feature_io import planted_pair
from hyperflow.flow import (
    Flow,
    form_flow,
    flow_table_lines,
    transfer_all,
    transfer_keypoint,
    write_flow_text,
)
from hyperflow.hyperimage import LayerSet, assemble
from hyperflow.rhm import ConfidenceTensor, RhmConfig, match

from conftest import geom, layer, ramp, stack


def small_pair(h=3, w=3, d=6):
    g = geom(stride=4.0, offset=2.0, rf=16.0)
    dims = (4 * h, 4 * w)
    src, tgt = planted_pair(5, ((0, d, h, w, g),), (0, 0), dims)
    return assemble(src, LayerSet(base=0)), assemble(tgt, LayerSet(base=0))


def ct(values, src_grid, tgt_grid):
    return ConfidenceTensor(
        np.asarray(values, np.float64), src_grid=src_grid, tgt_grid=tgt_grid
    )


def test_form_flow_picks_argmax_coordinates():
    a, b = small_pair(2, 2)
    vals = np.zeros((4, 4))
    vals[0, 3] = 1.0  # cell (0,0) -> target cell (1,1)
    vals[1, 0] = 2.0
    vals[2, 2] = 0.5
    vals[3, 1] = 0.25
    f = form_flow(ct(vals, (2, 2), (2, 2)), a, b)
    assert f.target_index.tolist() == [3, 0, 2, 1]
    assert f.tgt_coords[0].tolist() == [6.0, 6.0]
    assert f.tgt_coords[1].tolist() == [2.0, 2.0]
    assert f.confidence.tolist() == [1.0, 2.0, 0.5, 0.25]
    assert f.src_coords[3].tolist() == [6.0, 6.0]


def test_form_flow_tie_goes_to_first_index():
    a, _ = small_pair(1, 2)
    _, b = small_pair(2, 2)
    vals = np.array([[0.5, 0.7, 0.7, 0.1], [0.2, 0.2, 0.2, 0.2]])
    f = form_flow(ct(vals, (1, 2), (2, 2)), a, b)
    assert f.target_index.tolist() == [1, 0]


def test_form_flow_rejects_grid_mismatch():
    a, b = small_pair(2, 2)
    with pytest.raises(ValueError, match="source grid"):
        form_flow(ct(np.zeros((6, 4)), (2, 3), (2, 2)), a, b)
    with pytest.raises(ValueError, match="target grid"):
        form_flow(ct(np.zeros((4, 6)), (2, 2), (2, 3)), a, b)


def test_flow_arrays_read_only():
    a, b = small_pair(2, 2)
    f = form_flow(ct(np.eye(4), (2, 2), (2, 2)), a, b)
    with pytest.raises(ValueError):
        f.tgt_coords[0, 0] = 9.0


def test_identity_match_gives_identity_flow():
    a, b = small_pair(3, 3, d=8)
    f = form_flow(match(a, b, RhmConfig()), a, b)
    assert np.array_equal(f.tgt_coords, f.src_coords)
    assert f.target_index.tolist() == list(range(9))


def test_transfer_on_uniform_shift_is_exact():
    # flow that translates every cell by (+4, +8): any keypoint must move
    # by exactly that much regardless of which cells cover it
    a, b = small_pair(3, 3)
    n = 9
    src_c = form_flow(ct(np.eye(n), (3, 3), (3, 3)), a, b).src_coords
    shifted = src_c + np.array([4.0, 8.0])
    f = Flow(
        grid=(3, 3),
        src_coords=src_c.copy(),
        tgt_coords=shifted,
        confidence=np.ones(n),
        target_index=np.zeros(n, np.int64),
    )
    for kp in [(2.0, 2.0), (5.0, 3.5), (10.0, 10.0), (0.0, 0.0)]:
        p = transfer_keypoint(f, a, kp)
        assert p.coord[0] == pytest.approx(kp[0] + 4.0, abs=1e-12)
        assert p.coord[1] == pytest.approx(kp[1] + 8.0, abs=1e-12)
        assert p.neighbors >= 1


def test_transfer_neighbor_count():
    a, _ = small_pair(3, 3)
    n = 9
    f = Flow(
        grid=(3, 3),
        src_coords=np.zeros((n, 2)),
        tgt_coords=np.zeros((n, 2)),
        confidence=np.zeros(n),
        target_index=np.zeros(n, np.int64),
    )
    # rf 16 with stride 4 on a 3x3 grid covers every cell from the center
    assert transfer_keypoint(f, a, (6.0, 6.0)).neighbors == 9
    # corner: centers 2 and 6 are within half-rf 8 of 0, center 10 is not
    assert transfer_keypoint(f, a, (0.0, 0.0)).neighbors == 4


def test_transfer_errors_when_nothing_covers():
    g = geom(stride=8.0, offset=2.0, rf=2.0)
    s = stack([layer(0, ramp(2, 2, 2), g)], image_dims=(16, 16))
    a = assemble(s, LayerSet(base=0))
    f = Flow(
        grid=(2, 2),
        src_coords=np.zeros((4, 2)),
        tgt_coords=np.zeros((4, 2)),
        confidence=np.zeros(4),
        target_index=np.zeros(4, np.int64),
    )
    with pytest.raises(ValueError, match="no receptive field"):
        transfer_keypoint(f, a, (6.0, 6.0))  # between cells, rf only 2


def test_transfer_grid_mismatch():
    a, _ = small_pair(3, 3)
    f = Flow(
        grid=(2, 2),
        src_coords=np.zeros((4, 2)),
        tgt_coords=np.zeros((4, 2)),
        confidence=np.zeros(4),
        target_index=np.zeros(4, np.int64),
    )
    with pytest.raises(ValueError, match="flow grid"):
        transfer_keypoint(f, a, (5.0, 5.0))


def test_transfer_all_reports_keypoint_index():
    a, _ = small_pair(2, 2)
    n = 4
    f = Flow(
        grid=(2, 2),
        src_coords=np.zeros((n, 2)),
        tgt_coords=np.zeros((n, 2)),
        confidence=np.zeros(n),
        target_index=np.zeros(n, np.int64),
    )
    preds = transfer_all(f, a, [(2.0, 2.0), (4.0, 4.0)])
    assert len(preds) == 2
    with pytest.raises(ValueError, match="keypoint 1"):
        transfer_all(f, a, [(2.0, 2.0), (99.0, 2.0)])


def test_flow_table_format():
    a, _ = small_pair(1, 2)
    _, b = small_pair(2, 2)
    vals = np.array([[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.125, 0.0]])
    f = form_flow(ct(vals, (1, 2), (2, 2)), a, b)
    lines = list(flow_table_lines(f))
    assert lines[0] == "0 0 2.000000 2.000000 2.000000 6.000000 1.000000"
    assert lines[1] == "0 1 2.000000 6.000000 6.000000 2.000000 0.125000"
    buf = io.StringIO()
    write_flow_text(f, buf)
    assert buf.getvalue() == lines[0] + "\n" + lines[1] + "\n"
