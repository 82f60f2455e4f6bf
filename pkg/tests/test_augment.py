"""Augmentation: transform definitions, group laws, 6x dataset expansion."""

from __future__ import annotations

import numpy as np
import pytest

from urbanet.augment import (
    TRANSFORMS,
    AugmentedTiles,
    Transform,
    apply_transform,
    augment_set,
    transform_plane,
)
from urbanet.errors import ShapeError
from urbanet.grid import WorldGrid, pad_grid
from urbanet.tiler import TileSample, WindowSpec, sample_all


def make_tile(s=4, seed=0, input_plane=None):
    rng = np.random.default_rng(seed)
    mask = rng.integers(0, 2, size=(s, s)).astype(np.uint8)
    mask[s // 2, s // 2] = 1
    inp = input_plane if input_plane is not None else rng.normal(size=(2, s, s))
    inp = np.asarray(inp, dtype=np.float64) * mask
    target = rng.normal(size=(1, s, s)) * mask
    return TileSample(
        input=inp, target=target, mask=mask,
        center=(3, 7), region=5, split="train",
    )


class TestDefinitions:
    def test_identity_is_bitwise_equal(self):
        tile = make_tile()
        same = apply_transform(tile, Transform.IDENTITY)
        np.testing.assert_array_equal(same.input, tile.input)
        np.testing.assert_array_equal(same.target, tile.target)
        np.testing.assert_array_equal(same.mask, tile.mask)

    def test_hflip_mirrors_columns(self):
        plane = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(
            transform_plane(plane, Transform.HFLIP), [[2.0, 1.0], [4.0, 3.0]]
        )

    def test_vflip_mirrors_rows(self):
        plane = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(
            transform_plane(plane, Transform.VFLIP), [[3.0, 4.0], [1.0, 2.0]]
        )

    def test_rot90_counterclockwise(self):
        plane = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(
            transform_plane(plane, Transform.ROT90), [[2.0, 4.0], [1.0, 3.0]]
        )

    def test_rot90_index_map(self):
        # element (i, j) must land at (S-1-j, i)
        s = 5
        rng = np.random.default_rng(1)
        plane = rng.normal(size=(s, s))
        out = transform_plane(plane, Transform.ROT90)
        for i in range(s):
            for j in range(s):
                assert out[s - 1 - j, i] == plane[i, j]

    def test_metadata_preserved(self):
        tile = make_tile()
        rotated = apply_transform(tile, Transform.ROT90)
        assert rotated.center == tile.center
        assert rotated.region == tile.region
        assert rotated.split == tile.split

    def test_non_square_rejected(self):
        tile = make_tile()
        squished = TileSample(
            input=tile.input[:, :3, :], target=tile.target[:, :3, :],
            mask=tile.mask[:3, :], center=tile.center,
            region=tile.region, split=tile.split,
        )
        with pytest.raises(ShapeError, match="square"):
            apply_transform(squished, Transform.HFLIP)


class TestGroupLaws:
    def planes(self, n=50):
        rng = np.random.default_rng(42)
        return [rng.normal(size=(5, 5)) for _ in range(n)]

    def test_rot90_fourth_power_is_identity(self):
        for p in self.planes():
            out = p
            for _ in range(4):
                out = transform_plane(out, Transform.ROT90)
            np.testing.assert_array_equal(out, p)

    def test_flips_are_involutions(self):
        for p in self.planes():
            for t in (Transform.HFLIP, Transform.VFLIP, Transform.ROT180):
                np.testing.assert_array_equal(
                    transform_plane(transform_plane(p, t), t), p
                )

    def test_vflip_equals_rot180_of_hflip(self):
        for p in self.planes():
            np.testing.assert_array_equal(
                transform_plane(p, Transform.VFLIP),
                transform_plane(transform_plane(p, Transform.HFLIP), Transform.ROT180),
            )

    def test_rot270_is_rot90_cubed(self):
        for p in self.planes():
            out = p
            for _ in range(3):
                out = transform_plane(out, Transform.ROT90)
            np.testing.assert_array_equal(out, transform_plane(p, Transform.ROT270))


class TestAugmentSet:
    def test_six_tiles_first_is_original(self):
        tile = make_tile()
        variants = augment_set(tile)
        assert len(variants) == 6
        np.testing.assert_array_equal(variants[0].input, tile.input)

    def test_asymmetric_marker_gives_distinct_planes(self):
        marker = np.zeros((1, 3, 3))
        marker[0, 0, 0], marker[0, 0, 1] = 1.0, 2.0  # breaks every symmetry
        tile = TileSample(
            input=marker, target=marker.copy(),
            mask=np.ones((3, 3), np.uint8),
            center=(0, 0), region=1, split="train",
        )
        planes = [v.input.tobytes() for v in augment_set(tile)]
        assert len(set(planes)) == 6

    def test_mask_value_coupling_preserved(self):
        tile = make_tile(seed=3)
        for v in augment_set(tile):
            water = v.mask == 0
            assert (v.input[:, water] == 0.0).all()
            assert (v.target[:, water] == 0.0).all()

    def test_pointwise_relation_survives(self):
        tile = make_tile(seed=4)
        coupled = TileSample(
            input=tile.input,
            target=(2.0 * tile.input[:1] + 1.0) * tile.mask,
            mask=tile.mask, center=tile.center,
            region=tile.region, split=tile.split,
        )
        for v in augment_set(coupled):
            expect = (2.0 * v.input[:1] + 1.0) * v.mask
            np.testing.assert_array_equal(v.target, expect)


class TestAugmentedTiles:
    def make_dataset(self):
        rng = np.random.default_rng(9)
        mask = rng.integers(0, 2, size=(5, 5)).astype(np.uint8)
        mask[2, 2] = 1
        channels = {
            "in0": np.where(mask == 1, rng.normal(size=(5, 5)), 0.0),
            "target": np.where(mask == 1, rng.normal(size=(5, 5)), 0.0),
        }
        world = WorldGrid(mask, mask.astype(np.uint16), channels, {1: "AAA"})
        padded = pad_grid(world, 3)
        return sample_all(
            padded, WindowSpec(4), pad=3,
            input_names=["in0"], target_names=["target"],
        )

    def test_expansion_factor_is_six(self):
        base = self.make_dataset()
        assert len(AugmentedTiles(base)) == 6 * len(base)

    def test_each_pair_appears_exactly_once(self):
        base = self.make_dataset()
        aug = AugmentedTiles(base)
        seen = set()
        for k in range(len(aug)):
            i, t = aug._locate(k)
            seen.add((i, t))
        assert len(seen) == len(aug)
        assert {t for _, t in seen} == set(TRANSFORMS)

    def test_consecutive_samples_change_transform(self):
        base = self.make_dataset()
        aug = AugmentedTiles(base)
        transforms = [aug._locate(k)[1] for k in range(min(6, len(aug)))]
        assert len(set(transforms)) > 1

    def test_batch_matches_items(self):
        base = self.make_dataset()
        aug = AugmentedTiles(base)
        idx = np.array([0, 1, len(aug) - 1, len(aug) // 2])
        x, y, m = aug.batch(idx)
        for b, k in enumerate(idx):
            tile = aug[int(k)]
            np.testing.assert_array_equal(x[b].transpose(2, 0, 1), tile.input)
            np.testing.assert_array_equal(y[b].transpose(2, 0, 1), tile.target)
            np.testing.assert_array_equal(m[b], tile.mask)
