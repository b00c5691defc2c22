"""Patch grids, average-pooled cells and the token-to-cell matching rule.

Pixel boxes are ``(x0, y0, x1, y1)`` with ``x1``/``y1`` exclusive for patch
regions.  Token boxes come in the [0, 1000] frame and are rescaled to pixels
before matching.  Pooling and text grouping are expressed as row-stochastic
matrices so the same code serves numpy arrays and torch tensors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .data import COORD_MAX


@dataclass(frozen=True)
class PatchGrid:
    image_size: int
    patch_size: int
    rows: int
    cols: int
    regions: tuple[tuple[int, int, int, int], ...]

    @property
    def N(self) -> int:
        return self.rows * self.cols

    def norm_boxes(self) -> np.ndarray:
        """Patch regions in the [0, 1000] frame, shape (N, 4), int64."""
        r = np.asarray(self.regions, dtype=np.float64) * COORD_MAX / self.image_size
        return np.rint(r).astype(np.int64)


@dataclass(frozen=True)
class PooledGrid:
    grid: PatchGrid
    kernel: int
    stride: int
    rows: int
    cols: int
    cells: tuple[tuple[int, int, int, int], ...]
    member_map: tuple[tuple[int, ...], ...]

    @property
    def M(self) -> int:
        return len(self.member_map)

    def matrix(self) -> np.ndarray:
        """(M, N) averaging matrix: row m holds 1/|members| on its members."""
        P = np.zeros((self.M, self.grid.N))
        for m, members in enumerate(self.member_map):
            P[m, list(members)] = 1.0 / len(members)
        return P


@dataclass(frozen=True)
class TokenPatchAssignment:
    token_to_cell: tuple[int | None, ...]
    cell_to_tokens: tuple[tuple[int, ...], ...]
    matched_mask: np.ndarray  # (M,) bool
    unmatched_tokens: tuple[int, ...]

    def matrix(self, num_tokens: int | None = None) -> np.ndarray:
        """(M, L) matrix averaging each cell's matched token vectors."""
        L = len(self.token_to_cell) if num_tokens is None else num_tokens
        A = np.zeros((len(self.cell_to_tokens), L))
        for m, toks in enumerate(self.cell_to_tokens):
            if toks:
                A[m, list(toks)] = 1.0 / len(toks)
        return A


def build_patch_grid(image_size: int, patch_size: int) -> PatchGrid:
    if patch_size < 1 or image_size < 1:
        raise ValueError("image_size and patch_size must be positive")
    if image_size % patch_size:
        raise ValueError(f"image_size {image_size} is not divisible by patch_size {patch_size}")
    n = image_size // patch_size
    regions = tuple(
        (c * patch_size, r * patch_size, (c + 1) * patch_size, (r + 1) * patch_size)
        for r in range(n)
        for c in range(n)
    )
    return PatchGrid(image_size, patch_size, n, n, regions)


def _windows(n: int, kernel: int, stride: int) -> list[range]:
    count = (n - kernel) // stride + 1
    return [range(i * stride, i * stride + kernel) for i in range(count)]


def build_pooled_grid(grid: PatchGrid, kernel: int, stride: int) -> PooledGrid:
    """Average-pooling windows over the patch grid (no padding, floor count).

    A 14x14 grid with kernel 5 and stride 4 gives 3x3 cells.
    """
    if kernel < 1 or stride < 1:
        raise ValueError("kernel and stride must be >= 1")
    if kernel > grid.rows or kernel > grid.cols:
        raise ValueError(f"kernel {kernel} exceeds the {grid.rows}x{grid.cols} patch grid")
    row_w = _windows(grid.rows, kernel, stride)
    col_w = _windows(grid.cols, kernel, stride)
    cells, members = [], []
    for rw in row_w:
        for cw in col_w:
            idx = tuple(r * grid.cols + c for r in rw for c in cw)
            boxes = [grid.regions[i] for i in idx]
            cells.append((
                min(b[0] for b in boxes), min(b[1] for b in boxes),
                max(b[2] for b in boxes), max(b[3] for b in boxes),
            ))
            members.append(idx)
    return PooledGrid(grid, kernel, stride, len(row_w), len(col_w), tuple(cells), tuple(members))


def _as_like(mat: np.ndarray, like):
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(mat, dtype=like.dtype, device=like.device)
    return mat


def pool_vectors(local_vectors, pooled: PooledGrid):
    """Mean of member patch vectors per pooled cell; works on (..., N, d)."""
    n = local_vectors.shape[-2]
    if n != pooled.grid.N:
        raise ValueError(f"expected {pooled.grid.N} patch vectors, got {n}")
    return _as_like(pooled.matrix(), local_vectors) @ local_vectors


def token_centers_px(boxes, image_size: int) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    cx = (b[:, 0] + b[:, 2]) / 2 * image_size / COORD_MAX
    cy = (b[:, 1] + b[:, 3]) / 2 * image_size / COORD_MAX
    return np.stack([cx, cy], axis=1)


def match_tokens_to_cells(boxes, pooled: PooledGrid, image_size: int) -> TokenPatchAssignment:
    """Assign every token to the lowest-index pooled cell containing its box centre.

    Cells are treated as closed boxes, so a centre on a shared edge goes to
    the smaller index.  Tokens outside every cell are left unassigned.
    """
    centers = token_centers_px(boxes, image_size)
    cells = np.asarray(pooled.cells, dtype=np.float64).reshape(-1, 4)
    cx, cy = centers[:, :1], centers[:, 1:]
    inside = (
        (cx >= cells[None, :, 0]) & (cx <= cells[None, :, 2])
        & (cy >= cells[None, :, 1]) & (cy <= cells[None, :, 3])
    )
    hit = inside.any(axis=1)
    first = inside.argmax(axis=1)
    token_to_cell = tuple(int(f) if h else None for f, h in zip(first, hit))

    cell_to_tokens: list[list[int]] = [[] for _ in range(pooled.M)]
    for j, m in enumerate(token_to_cell):
        if m is not None:
            cell_to_tokens[m].append(j)
    mask = np.array([bool(t) for t in cell_to_tokens], dtype=bool)
    return TokenPatchAssignment(
        token_to_cell=token_to_cell,
        cell_to_tokens=tuple(tuple(t) for t in cell_to_tokens),
        matched_mask=mask,
        unmatched_tokens=tuple(j for j, m in enumerate(token_to_cell) if m is None),
    )


def patch_text_vectors(token_vectors, assign: TokenPatchAssignment):
    """Per-cell mean of matched token vectors; zero rows where nothing matched."""
    L = token_vectors.shape[-2]
    if L != len(assign.token_to_cell):
        raise ValueError(f"expected {len(assign.token_to_cell)} token vectors, got {L}")
    t = _as_like(assign.matrix(), token_vectors) @ token_vectors
    return t, assign.matched_mask.copy()


def sequence_pool_matrix(length: int, kernel: int, stride: int) -> np.ndarray:
    """(L', L) 1-D averaging windows over a token sequence, clipped to ``length``."""
    if kernel < 1 or stride < 1:
        raise ValueError("kernel and stride must be >= 1")
    count = max((length - kernel) // stride + 1, 1)
    P = np.zeros((count, length))
    for i in range(count):
        P[i, i * stride:min(i * stride + kernel, length)] = 1.0
    return P


def pool_sequence(vectors: torch.Tensor, mask: torch.Tensor, kernel: int, stride: int):
    """Masked 1-D average pooling of (B, L, d) token vectors.

    A pooled position averages only its unmasked members and is valid iff
    it has at least one.  Returns ``(pooled (B, L', d), valid (B, L'))``.
    """
    W = torch.as_tensor(sequence_pool_matrix(vectors.shape[1], kernel, stride),
                        dtype=vectors.dtype, device=vectors.device)
    m = mask.to(vectors.dtype)
    counts = m @ W.T  # (B, L')
    weights = W.unsqueeze(0) * m.unsqueeze(1)  # (B, L', L)
    pooled = weights @ vectors / counts.clamp_min(1.0).unsqueeze(-1)
    return pooled, counts > 0


def assignment_tensors(
    boxes_per_doc: Sequence[Sequence[Sequence[int]]],
    pooled: PooledGrid,
    image_size: int,
    max_tokens: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked (B, M, L_max) text-averaging matrices and (B, M) matched masks."""
    mats, masks = [], []
    for boxes in boxes_per_doc:
        if len(boxes):
            a = match_tokens_to_cells(boxes, pooled, image_size)
            mats.append(a.matrix(max_tokens))
            masks.append(a.matched_mask)
        else:
            mats.append(np.zeros((pooled.M, max_tokens)))
            masks.append(np.zeros(pooled.M, dtype=bool))
    return np.stack(mats), np.stack(masks)
