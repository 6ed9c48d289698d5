"""Receptive-field arithmetic for stacked conv/pool operators.

Tracks, for the feature grid produced by a chain of sliding-window ops,
the affine map from grid indices back to input pixels.  With the input
grid at (jump=1, rf=1, offset=0), pushing an op with kernel k, stride s,
padding p updates the state as

    jump'   = jump * s
    rf'     = rf + (k - 1) * jump
    offset' = offset + ((k - 1) / 2 - p) * jump

where ``offset`` is the input-space coordinate of cell (0, 0)'s window
center and ``jump`` the spacing between adjacent cell centers.  For the
usual "same"-style centered padding (p = (k - 1) // 2 with odd k) the
offset term vanishes, so every exported backbone layer here ends up with
offset 0 in network pixel space.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class SlidingOp:
    """One conv or pool layer, square kernel assumed."""

    kernel: int
    stride: int
    padding: int

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(
                f"bad sliding op (k={self.kernel}, s={self.stride}, p={self.padding})"
            )


@dataclass(frozen=True)
class GridTrace:
    """Receptive-field state of one feature grid relative to the input."""

    jump: int
    rf: int
    offset: float

    def after(self, op: SlidingOp) -> "GridTrace":
        return GridTrace(
            jump=self.jump * op.stride,
            rf=self.rf + (op.kernel - 1) * self.jump,
            offset=self.offset + ((op.kernel - 1) / 2 - op.padding) * self.jump,
        )


INPUT_TRACE = GridTrace(jump=1, rf=1, offset=0.0)


def trace_chain(ops) -> GridTrace:
    """Fold a sequence of ops over the input grid."""
    state = INPUT_TRACE
    for op in ops:
        state = state.after(op)
    return state


def out_size(in_size: int, op: SlidingOp) -> int:
    """Spatial size produced by one op (floor convention, as in torch)."""
    return (in_size + 2 * op.padding - op.kernel) // op.stride + 1
