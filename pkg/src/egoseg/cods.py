"""Contact-centric object decoupling.

Training side: the three object classes are folded into two overlapping
targets, "everything the left hand touches" and "everything the right hand
touches". Inference side: the two predicted masks are split back into
left-only, right-only and two-hand objects by intersection and difference.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .datamodel import ClassId, RasterError, validate_labels, validate_mask

DEFAULT_CB_RADIUS = 1
DEFAULT_CB_ITERATIONS = 3


@dataclass(frozen=True)
class DecoupledTargets:
    g_lo_prime: np.ndarray  # bool (H, W)
    g_ro_prime: np.ndarray  # bool (H, W)
    g_hand: np.ndarray  # uint8 (H, W), 0 bg / 1 left / 2 right
    g_cb: np.ndarray  # bool (H, W)


@dataclass(frozen=True)
class FinalMasks:
    m_h: np.ndarray  # uint8 (H, W), 0 bg / 1 left / 2 right
    m_o_l: np.ndarray
    m_o_r: np.ndarray
    m_o_t: np.ndarray
    m_cb: np.ndarray

    def class_masks(self) -> dict[int, np.ndarray]:
        """Binary prediction per non-background class id."""
        return {
            ClassId.LEFT_HAND: self.m_h == 1,
            ClassId.RIGHT_HAND: self.m_h == 2,
            ClassId.LEFT_OBJECT: self.m_o_l,
            ClassId.RIGHT_OBJECT: self.m_o_r,
            ClassId.TWO_HAND_OBJECT: self.m_o_t,
        }

    def to_labels(self) -> np.ndarray:
        """Single-channel rendering; hands are painted over objects."""
        out = np.zeros(self.m_h.shape, np.uint8)
        out[self.m_o_l] = ClassId.LEFT_OBJECT
        out[self.m_o_r] = ClassId.RIGHT_OBJECT
        out[self.m_o_t] = ClassId.TWO_HAND_OBJECT
        out[self.m_h == 1] = ClassId.LEFT_HAND
        out[self.m_h == 2] = ClassId.RIGHT_HAND
        return out


def hand_target(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    return np.where((labels == 1) | (labels == 2), labels, 0).astype(np.uint8)


def make_contact_boundary(
    labels: np.ndarray,
    dilation_radius: int = DEFAULT_CB_RADIUS,
    iterations: int = DEFAULT_CB_ITERATIONS,
) -> np.ndarray:
    """Overlap of the dilated hand mask and the dilated object mask."""
    if dilation_radius < 1:
        raise ValueError(f"dilation_radius must be >= 1, got {dilation_radius}")
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    labels = np.asarray(labels)
    hands = (labels == 1) | (labels == 2)
    objects = labels >= 3
    if not hands.any() or not objects.any():
        return np.zeros(labels.shape, bool)
    structure = np.ones((2 * dilation_radius + 1,) * 2, bool)
    hd = ndimage.binary_dilation(hands, structure, iterations=iterations)
    od = ndimage.binary_dilation(objects, structure, iterations=iterations)
    return hd & od


def decouple_targets(
    labels: np.ndarray,
    cb_radius: int = DEFAULT_CB_RADIUS,
    cb_iterations: int = DEFAULT_CB_ITERATIONS,
) -> DecoupledTargets:
    labels = validate_labels(labels)
    two_hand = labels == ClassId.TWO_HAND_OBJECT
    return DecoupledTargets(
        g_lo_prime=(labels == ClassId.LEFT_OBJECT) | two_hand,
        g_ro_prime=(labels == ClassId.RIGHT_OBJECT) | two_hand,
        g_hand=hand_target(labels),
        g_cb=make_contact_boundary(labels, cb_radius, cb_iterations),
    )


def recombine(m_lo: np.ndarray, m_ro: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split left/right contact masks into (two-hand, left-only, right-only)."""
    m_lo = validate_mask(m_lo, "m_lo")
    m_ro = validate_mask(m_ro, "m_ro")
    if m_lo.shape != m_ro.shape:
        raise RasterError(f"mask shape mismatch: {m_lo.shape} vs {m_ro.shape}")
    m_o_t = m_lo & m_ro
    return m_o_t, m_lo & ~m_o_t, m_ro & ~m_o_t
