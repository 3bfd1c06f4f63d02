"""Voxelwise majority voting across the three per-orientation predictions."""

from __future__ import annotations

from .codec import MultiLabelMask
from .volume import BinaryMask, require_same_geometry


def majority_vote(a: BinaryMask, b: BinaryMask, c: BinaryMask) -> BinaryMask:
    """Set a voxel iff at least two of the three inputs set it."""
    geometry = require_same_geometry(a, b, c)
    bits = (a.bits & b.bits) | (a.bits & c.bits) | (b.bits & c.bits)
    return BinaryMask(geometry, bits)


def fuse_multiclass(
    axial: MultiLabelMask, coronal: MultiLabelMask, sagittal: MultiLabelMask
) -> MultiLabelMask:
    """Per-class majority vote over three multilabel masks.

    Votes run independently per bit, so the word-level majority
    (a&b)|(a&c)|(b&c) equals decoding each class, voting and re-encoding.
    """
    geometry = require_same_geometry(axial, coronal, sagittal)
    if not (axial.registry == coronal.registry == sagittal.registry):
        raise ValueError("registry mismatch between orientation masks")
    a, b, c = axial.words, coronal.words, sagittal.words
    return MultiLabelMask(geometry, (a & b) | (a & c) | (b & c), axial.registry)
