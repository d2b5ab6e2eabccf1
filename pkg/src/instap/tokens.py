"""Token sequences with positional metadata, and frame patchification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class TokenSeq:
    """L tokens of width d plus per-token ``(frame, patch_row, patch_col)``.

    ``data`` may be a numpy array or a torch tensor; ``positions`` is always
    an int64 numpy array of shape (L, 3).
    """

    data: object
    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64).reshape(-1, 3)
        if len(self.positions) != self.data.shape[0]:
            raise ValueError(f"{len(self.positions)} positions for {self.data.shape[0]} tokens")

    def __len__(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def take(self, index) -> "TokenSeq":
        index = np.asarray(index, dtype=np.int64)
        return TokenSeq(self.data[index], self.positions[index])


def grid_positions(T: int, rows: int, cols: int) -> np.ndarray:
    t, r, c = np.meshgrid(np.arange(T), np.arange(rows), np.arange(cols), indexing="ij")
    return np.stack([t.ravel(), r.ravel(), c.ravel()], axis=1).astype(np.int64)


def patchify(frames: np.ndarray, patch: int) -> TokenSeq:
    """Cut (T, H, W, 3) frames into flattened ``patch x patch x 3`` tokens.

    Token order is frame-major, then row, then column, so ``L = T * (H/P) * (W/P)``.
    The learned linear embedding is applied by the video encoder.
    """
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ValueError(f"expected (T, H, W, 3) frames, got {frames.shape}")
    T, H, W, C = frames.shape
    if H % patch or W % patch:
        raise ValueError(f"frame size {H}x{W} is not divisible by patch size {patch}")
    rows, cols = H // patch, W // patch
    x = frames.reshape(T, rows, patch, cols, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return TokenSeq(x.reshape(T * rows * cols, patch * patch * C), grid_positions(T, rows, cols))
