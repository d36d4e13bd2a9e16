"""Deterministic pose preprocessing.

Body-centered normalization, velocity/acceleration augmentation, per-frame
motion statistics, subsequence window sampling, and hand-crop geometry.
All functions are pure; augmentation and motion statistics run on the full
sequence, and windows index into the result (backward differences are
causal, so no window sees future frames).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


class MissingSubjectError(ValueError):
    """Subject 1 is required as the normalization anchor."""


@dataclass
class PoseSequence:
    """Per-frame 3D joints for up to two subjects plus 2D hand pixels.

    joints3d: (T, 2, J, 3) meters; an absent subject is all-zero and flagged.
    hands2d: (T, 4, 2) pixel (u, v) per hand slot (left1, right1, left2, right2).
    """

    joints3d: np.ndarray
    hands2d: np.ndarray
    subject_present: np.ndarray  # (2,) bool
    label: int
    seq_id: str = ""

    def __post_init__(self) -> None:
        self.joints3d = np.asarray(self.joints3d, dtype=np.float64)
        self.hands2d = np.asarray(self.hands2d, dtype=np.float64)
        self.subject_present = np.asarray(self.subject_present, dtype=bool)
        if self.joints3d.ndim != 4 or self.joints3d.shape[1] != 2 or self.joints3d.shape[3] != 3:
            raise ValueError(f"joints3d must be (T, 2, J, 3), got {self.joints3d.shape}")
        if self.hands2d.shape != (self.joints3d.shape[0], 4, 2):
            raise ValueError(f"hands2d must be (T, 4, 2), got {self.hands2d.shape}")

    @property
    def n_frames(self) -> int:
        return self.joints3d.shape[0]

    @property
    def n_joints(self) -> int:
        return self.joints3d.shape[2]

    @property
    def pose_dim(self) -> int:
        return 2 * self.n_joints * 3

    def pose_vectors(self) -> np.ndarray:
        """Flatten to (T, 2*J*3), subject-major."""
        return self.joints3d.reshape(self.n_frames, -1)

    def hand_mask(self) -> np.ndarray:
        """(4,) presence per hand slot: slots 0-1 subject 1, slots 2-3 subject 2."""
        return np.repeat(self.subject_present, 2)


def normalize_pose(seq: PoseSequence, spine_joint: int = 1) -> PoseSequence:
    """Translate every present subject by subject 1's spine offset, per frame.

    Subject 1's spine lands at the origin; the shared translation preserves
    inter-person geometry.  Absent subjects stay all-zero.
    """
    if not seq.subject_present[0]:
        raise MissingSubjectError("normalize_pose: subject 1 absent, no anchor joint")
    if not 0 <= spine_joint < seq.n_joints:
        raise ValueError(f"spine joint {spine_joint} outside [0, {seq.n_joints})")
    offsets = seq.joints3d[:, 0, spine_joint, :]  # (T, 3)
    joints = seq.joints3d.copy()
    for s in range(2):
        if seq.subject_present[s]:
            joints[:, s, :, :] -= offsets[:, None, :]
    return replace(seq, joints3d=joints)


def velocity_acceleration(pose_vecs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backward differences, zero-padded: velocity from t=1, acceleration from t=2."""
    vel = np.zeros_like(pose_vecs)
    vel[1:] = pose_vecs[1:] - pose_vecs[:-1]
    acc = np.zeros_like(pose_vecs)
    acc[2:] = vel[2:] - vel[1:-1]
    return vel, acc


def augment_pose(seq: PoseSequence) -> np.ndarray:
    """Per-frame concat(pose, velocity, acceleration), shape (T, 3*pose_dim)."""
    if seq.n_frames < 1:
        raise ValueError("augment_pose: empty sequence")
    pose = seq.pose_vectors()
    vel, acc = velocity_acceleration(pose)
    return np.concatenate([pose, vel, acc], axis=1)


def motion_stats(seq: PoseSequence) -> np.ndarray:
    """Per-frame (sum |velocity|, sum |acceleration|) over the full pose vector; (T, 2)."""
    vel, acc = velocity_acceleration(seq.pose_vectors())
    return np.stack([np.abs(vel).sum(axis=1), np.abs(acc).sum(axis=1)], axis=1)


def eval_window_starts(length: int, window: int) -> list[int]:
    """Five evenly spaced starts over [0, length - window], clamped at 0."""
    span = max(length - window, 0)
    return [round(k * span / 4) for k in range(5)]


def window_indices(length: int, start: int, window: int) -> np.ndarray:
    """Frame indices for one window; short sequences clamp-repeat the last frame."""
    return np.minimum(start + np.arange(window), length - 1)


def sample_windows(
    length: int, window: int, mode: str, rng: np.random.Generator | None = None
) -> list[np.ndarray]:
    """Train mode: one uniformly random window.  Eval mode: five evenly spaced windows."""
    if window <= 0:
        raise ValueError(f"window length must be positive, got {window}")
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode sampling needs an rng")
        hi = max(length - window, 0)
        start = int(rng.integers(0, hi + 1))
        return [window_indices(length, start, window)]
    if mode == "eval":
        return [window_indices(length, s, window) for s in eval_window_starts(length, window)]
    raise ValueError(f"unknown sampling mode {mode!r}")


@dataclass(frozen=True)
class CropWindow:
    """Integer pixel window [u0, u0+size) x [v0, v0+size)."""

    u0: int
    v0: int
    size: int
    present: bool = True


def crop_window(
    hand_uv: tuple[float, float],
    crop: int,
    image_size: tuple[int, int],
    present: bool = True,
) -> CropWindow:
    """Fixed-size window centered on the hand, shifted (never shrunk) to fit the image.

    An absent hand at the zero-coordinate convention degenerates to the
    top-left corner; the caller substitutes a zero feature vector.
    """
    width, height = image_size
    if crop <= 0:
        raise ValueError(f"crop size must be positive, got {crop}")
    if crop > min(width, height):
        raise ValueError(f"crop {crop} exceeds image size {image_size}")
    u0 = round(hand_uv[0] - crop / 2)
    v0 = round(hand_uv[1] - crop / 2)
    u0 = min(max(u0, 0), width - crop)
    v0 = min(max(v0, 0), height - crop)
    return CropWindow(u0=int(u0), v0=int(v0), size=crop, present=present)
