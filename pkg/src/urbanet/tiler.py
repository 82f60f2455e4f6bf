"""Dense tile sampling: one fixed-size window per land pixel.

The sampler works on a *padded* grid (see :func:`urbanet.grid.pad_grid`) so
every window stays in bounds; centers are reported in unpadded coordinates.
Windows of even size have no exact center, so the center pixel sits at index
``S // 2`` and the window spans ``[r - S//2, r + S//2 - 1]`` — the maximum
reach from the center is ``S // 2`` pixels, which the padding must cover.

Tiles are materialized lazily: :class:`TileDataset` keeps sliding-window
views over the stacked channel planes and copies a window out only when a
tile or batch is requested.  Densely sampling a world of any real size as
one array would not fit in memory, by design.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, ShapeError
from .grid import TEST, TRAIN, SplitAssignment, WorldGrid

SPLIT_FILTERS = ("train", "test", "all")


@dataclass(frozen=True)
class WindowSpec:
    """Square sampling window; ``center_offset`` defaults to (S//2, S//2)."""

    size: int
    center_offset: tuple[int, int] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.size < 1:
            raise ShapeError(f"window size must be >= 1, got {self.size}")
        if self.center_offset is None:
            object.__setattr__(
                self, "center_offset", (self.size // 2, self.size // 2)
            )
        off_r, off_c = self.center_offset
        if not (0 <= off_r < self.size and 0 <= off_c < self.size):
            raise ShapeError(
                f"center_offset {self.center_offset} outside window of size {self.size}"
            )

    @property
    def max_reach(self) -> int:
        """Largest distance the window extends from its center, any direction."""
        off_r, off_c = self.center_offset
        return max(off_r, off_c, self.size - 1 - off_r, self.size - 1 - off_c)


@dataclass(frozen=True)
class TileSample:
    """One training example, channel-first planes plus center metadata."""

    input: np.ndarray      # (C_in, S, S) float64
    target: np.ndarray     # (C_t, S, S) float64
    mask: np.ndarray       # (S, S) uint8
    center: tuple[int, int]  # unpadded grid coordinates
    region: int
    split: str             # "train" or "test"


class TileDataset(Sequence):
    """Deterministic random-access sequence of tiles, one per land pixel.

    Centers run in row-major order over the grid.  ``split_filter`` keeps
    only tiles whose *center* pixel carries the matching label; window
    contents are never filtered (the protocol assigns samples by center
    alone).
    """

    def __init__(
        self,
        grid: WorldGrid,
        window: WindowSpec,
        *,
        pad: int,
        input_names: Iterable[str],
        target_names: Iterable[str],
        split: SplitAssignment | None = None,
        split_filter: str = "all",
    ):
        if split_filter not in SPLIT_FILTERS:
            raise DataError(f"split_filter must be one of {SPLIT_FILTERS}, got {split_filter!r}")
        if pad < 0:
            raise ShapeError(f"pad must be >= 0, got {pad}")
        self.grid = grid
        self.window = window
        self.pad = int(pad)
        self.input_names = tuple(input_names)
        self.target_names = tuple(target_names)
        overlap = set(self.input_names) & set(self.target_names)
        if overlap:
            raise DataError(f"channels cannot be both input and target: {sorted(overlap)}")

        mask = np.asarray(grid.mask)
        centers_p = np.argwhere(mask == 1)  # row-major by construction
        if split is None:
            labels = np.full(len(centers_p), TRAIN, np.uint8)
        else:
            if split.labels.shape != mask.shape:
                raise ShapeError(
                    f"split labels shape {split.labels.shape} does not match "
                    f"grid shape {mask.shape} (compute the split on the padded grid)"
                )
            labels = split.labels[centers_p[:, 0], centers_p[:, 1]]
        if split_filter == "train":
            keep = labels == TRAIN
        elif split_filter == "test":
            keep = labels == TEST
        else:
            keep = np.ones(len(centers_p), bool)
        self._centers_p = centers_p[keep]
        self._labels = labels[keep]
        self._regions = np.asarray(grid.regions)[
            self._centers_p[:, 0], self._centers_p[:, 1]
        ]

        s = window.size
        off_r, off_c = window.center_offset
        if len(self._centers_p):
            top = self._centers_p.min(axis=0) - (off_r, off_c)
            bot = self._centers_p.max(axis=0) - (off_r, off_c) + s
            if top.min() < 0 or bot[0] > grid.height or bot[1] > grid.width:
                raise ShapeError(
                    f"padding {pad} too small for window size {s} with offset "
                    f"({off_r}, {off_c}); need at least {window.max_reach}"
                )

        self._in_stack = grid.stacked(self.input_names)
        self._tg_stack = grid.stacked(self.target_names)
        self._in_win = sliding_window_view(self._in_stack, (s, s), axis=(0, 1))
        self._tg_win = sliding_window_view(self._tg_stack, (s, s), axis=(0, 1))
        self._mask_win = sliding_window_view(np.asarray(grid.mask), (s, s))

    # -- sequence protocol -------------------------------------------------

    def __len__(self) -> int:
        return len(self._centers_p)

    def __getitem__(self, i: int) -> TileSample:
        if not -len(self) <= i < len(self):
            raise IndexError(i)
        i = i % len(self) if len(self) else 0
        tr, tc = self.top_left(i)
        return TileSample(
            input=np.ascontiguousarray(self._in_win[tr, tc], dtype=np.float64),
            target=np.ascontiguousarray(self._tg_win[tr, tc], dtype=np.float64),
            mask=np.ascontiguousarray(self._mask_win[tr, tc], dtype=np.uint8),
            center=self.center(i),
            region=int(self._regions[i]),
            split="test" if self._labels[i] == TEST else "train",
        )

    def __iter__(self) -> Iterator[TileSample]:
        for i in range(len(self)):
            yield self[i]

    # -- array access used by the trainer and evaluator ---------------------

    def center(self, i: int) -> tuple[int, int]:
        """Center of tile ``i`` in unpadded coordinates."""
        r, c = self._centers_p[i]
        return (int(r) - self.pad, int(c) - self.pad)

    def top_left(self, i: int) -> tuple[int, int]:
        """Window top-left corner of tile ``i`` in padded coordinates."""
        off_r, off_c = self.window.center_offset
        r, c = self._centers_p[i]
        return (int(r) - off_r, int(c) - off_c)

    @property
    def centers_padded(self) -> np.ndarray:
        return self._centers_p

    @property
    def regions(self) -> np.ndarray:
        return self._regions

    def batch(self, indices: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Gather tiles ``indices`` as NHWC arrays: (B,S,S,C_in), (B,S,S,C_t), (B,S,S)."""
        idx = np.asarray(indices)
        off_r, off_c = self.window.center_offset
        tr = self._centers_p[idx, 0] - off_r
        tc = self._centers_p[idx, 1] - off_c
        # views are (..., C, S, S); move channels last for the network layer
        x = self._in_win[tr, tc].transpose(0, 2, 3, 1)
        y = self._tg_win[tr, tc].transpose(0, 2, 3, 1)
        m = self._mask_win[tr, tc]
        return x, y, m


def tile_at(
    grid: WorldGrid,
    center: tuple[int, int],
    window: WindowSpec,
    *,
    pad: int,
    input_names: Iterable[str],
    target_names: Iterable[str],
    split: SplitAssignment | None = None,
) -> TileSample:
    """Cut the tile centered on one land pixel (``center`` in unpadded coordinates)."""
    r, c = center
    pr, pc = r + pad, c + pad
    mask = np.asarray(grid.mask)
    if not (0 <= pr < grid.height and 0 <= pc < grid.width):
        raise ShapeError(f"center {center} outside the grid")
    if mask[pr, pc] != 1:
        raise DataError(f"center {center} is not a land pixel")
    s = window.size
    off_r, off_c = window.center_offset
    tr, tc = pr - off_r, pc - off_c
    if tr < 0 or tc < 0 or tr + s > grid.height or tc + s > grid.width:
        raise ShapeError(
            f"window of size {s} at center {center} leaves the padded grid; "
            f"padding {pad} must be at least {window.max_reach}"
        )
    label = TRAIN if split is None else int(split.labels[pr, pc])
    input_names = tuple(input_names)
    target_names = tuple(target_names)
    return TileSample(
        input=grid.stacked(input_names)[tr : tr + s, tc : tc + s].transpose(2, 0, 1).copy(),
        target=grid.stacked(target_names)[tr : tr + s, tc : tc + s].transpose(2, 0, 1).copy(),
        mask=np.ascontiguousarray(mask[tr : tr + s, tc : tc + s], dtype=np.uint8),
        center=(int(r), int(c)),
        region=int(grid.regions[pr, pc]),
        split="test" if label == TEST else "train",
    )


def sample_all(
    grid: WorldGrid,
    window: WindowSpec,
    *,
    pad: int,
    input_names: Iterable[str],
    target_names: Iterable[str],
    split: SplitAssignment | None = None,
    split_filter: str = "all",
) -> TileDataset:
    """One tile per land pixel matching ``split_filter``, row-major by center."""
    return TileDataset(
        grid,
        window,
        pad=pad,
        input_names=input_names,
        target_names=target_names,
        split=split,
        split_filter=split_filter,
    )


def coverage_count(grid: WorldGrid, window: WindowSpec) -> np.ndarray:
    """How many sampled tiles contain each pixel of the (padded) grid.

    Pixel q lies inside the tile centered at p exactly when p falls in the
    S×S box ``[q + off - S + 1, q + off]``, so the count is a box sum of the
    land mask, computed with a summed-area table.
    """
    land = (np.asarray(grid.mask) == 1).astype(np.int64)
    h, w = land.shape
    sat = np.zeros((h + 1, w + 1), np.int64)
    np.cumsum(np.cumsum(land, axis=0), axis=1, out=sat[1:, 1:])
    s = window.size
    off_r, off_c = window.center_offset
    r0 = np.clip(np.arange(h) + off_r - s + 1, 0, h)
    r1 = np.clip(np.arange(h) + off_r + 1, 0, h)
    c0 = np.clip(np.arange(w) + off_c - s + 1, 0, w)
    c1 = np.clip(np.arange(w) + off_c + 1, 0, w)
    return (
        sat[np.ix_(r1, c1)]
        - sat[np.ix_(r0, c1)]
        - sat[np.ix_(r1, c0)]
        + sat[np.ix_(r0, c0)]
    )
