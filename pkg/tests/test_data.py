import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from halo.data import (
    STANFORD_CORNERS,
    STANFORD_EVAL,
    LightFieldSceneSpec,
    ProceduralSceneSpec,
    grid_to_uv,
    load_blender,
    load_lightfield_grid,
    look_at_pose,
    make_lightfield_scene,
    make_procedural_scene,
    read_depth_map,
    read_png,
    save_blender,
    save_lightfield_grid,
    trace_lightfield,
    write_depth_map,
    write_png,
)

# eight named frames, as a few-shot subset would list them
EIGHT = ["r_2.png", "r_16.png", "r_26.png", "r_55.png", "r_73.png", "r_86.png", "r_93.png", "r_0.png"]


@pytest.fixture(scope="module")
def small_spec():
    return ProceduralSceneSpec(n_views=8, n_test_views=2, height=24, width=24)


@pytest.fixture(scope="module")
def blender_dir(tmp_path_factory):
    """A train split holding 100 frames named r_0 ... r_99."""
    root = tmp_path_factory.mktemp("blender")
    spec = ProceduralSceneSpec(height=4, width=4)
    poses = [look_at_pose([4 * np.cos(a), 4 * np.sin(a), 1.0]) for a in np.linspace(0, 6, 100)]
    scene = make_procedural_scene(spec, poses=poses)
    save_blender(scene, root, "train")
    return root


class TestBlender:
    def test_named_subset(self, blender_dir):
        ds = load_blender(blender_dir, "train", EIGHT)
        assert len(ds) == 8
        assert sorted(ds.names) == sorted(EIGHT)

    def test_empty_subset_loads_all(self, blender_dir):
        assert len(load_blender(blender_dir, "train", [])) == 100

    def test_lexicographic_order(self, blender_dir):
        names = load_blender(blender_dir, "train").names
        assert names == sorted(names)

    def test_poses_rigid(self, blender_dir):
        ds = load_blender(blender_dir, "train", EIGHT)
        for p in ds.poses:
            np.testing.assert_allclose(p[:3, :3].T @ p[:3, :3], np.eye(3), atol=1e-6)

    def test_default_bounds(self, blender_dir):
        b = load_blender(blender_dir, "train", EIGHT).bounds
        assert (b.near, b.far) == (2.0, 6.0)

    def test_unknown_subset_name(self, blender_dir):
        with pytest.raises(KeyError):
            load_blender(blender_dir, "train", ["r_999.png"])

    def test_missing_split(self, blender_dir):
        with pytest.raises(FileNotFoundError):
            load_blender(blender_dir, "val")

    def test_malformed_json(self, tmp_path):
        (tmp_path / "transforms_train.json").write_text("{not json")
        with pytest.raises(ValueError, match="malformed"):
            load_blender(tmp_path, "train")

    def test_non_rigid_pose(self, tmp_path):
        write_png(tmp_path / "train" / "r_0.png", np.zeros((2, 2, 3)))
        bad = (np.eye(4) * 2).tolist()
        bad[3][3] = 1.0
        (tmp_path / "transforms_train.json").write_text(json.dumps(
            {"camera_angle_x": 0.7, "frames": [{"file_path": "./train/r_0", "transform_matrix": bad}]}))
        with pytest.raises(ValueError, match="rigid"):
            load_blender(tmp_path, "train")

    def test_missing_image(self, tmp_path):
        (tmp_path / "transforms_train.json").write_text(json.dumps(
            {"camera_angle_x": 0.7, "frames": [{"file_path": "./train/r_0", "transform_matrix": np.eye(4).tolist()}]}))
        with pytest.raises(FileNotFoundError):
            load_blender(tmp_path, "train")


@pytest.fixture(scope="module")
def lf_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("lf")
    spec = LightFieldSceneSpec(height=8, width=8)
    save_lightfield_grid(make_lightfield_scene(spec, STANFORD_CORNERS + STANFORD_EVAL), root)
    return root


class TestLightField:
    def test_corner_and_eval_counts(self, lf_dir):
        train, ev = load_lightfield_grid(lf_dir, STANFORD_CORNERS, STANFORD_EVAL, grid_size=17)
        assert len(train) == 4 and len(ev) == 4
        assert train.indices == [(4, 4), (4, 12), (12, 4), (12, 12)]

    def test_theta_range_from_metadata(self, lf_dir):
        train, _ = load_lightfield_grid(lf_dir, STANFORD_CORNERS, STANFORD_EVAL)
        assert train.grid_size == 17
        assert (train.theta_near, train.theta_far) == pytest.approx(LightFieldSceneSpec().theta_range)

    def test_missing_index(self, lf_dir):
        with pytest.raises(KeyError):
            load_lightfield_grid(lf_dir, [(0, 0)], [])

    def test_centre_uv(self):
        np.testing.assert_array_equal(grid_to_uv(8, 8, 17), [0.0, 0.0])
        np.testing.assert_array_equal(grid_to_uv(0, 16, 17), [1.0, -1.0])

    def test_st_range(self):
        grid = make_lightfield_scene(LightFieldSceneSpec(height=5, width=7), [(8, 8)])
        uvst, rgb = grid.rays()
        assert uvst.shape == (35, 4) and rgb.shape == (35, 3)
        assert uvst[:, 2:].min() == -1.0 and uvst[:, 2:].max() == 1.0

    def test_duplicate_indices(self):
        with pytest.raises(ValueError):
            make_lightfield_scene(LightFieldSceneSpec(height=2, width=2), [(1, 1), (1, 1)])

    def test_layer_depths(self):
        spec = LightFieldSceneSpec()
        # the central ray hits the foreground square, a steep ray sees the background
        _, depth = trace_lightfield(spec, np.array([[0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.9, 0.9]]))
        assert depth.tolist() == [spec.foreground_depth, spec.background_depth]


class TestProcedural:
    def test_counts(self):
        ds = make_procedural_scene(ProceduralSceneSpec(n_views=8, n_test_views=0))
        assert ds.images.shape == (8, 100, 100, 3) and ds.depths.shape == (8, 100, 100)

    def test_centre_pixel_depth(self):
        spec = ProceduralSceneSpec(height=101, width=101)
        ds = make_procedural_scene(spec, poses=[look_at_pose([0.0, 0.0, 4.0])])
        assert ds.depths[0, 50, 50] == pytest.approx(3.0, abs=1e-6)

    def test_deterministic(self, small_spec):
        a, b = make_procedural_scene(small_spec, seed=4), make_procedural_scene(small_spec, seed=4)
        assert a.images.tobytes() == b.images.tobytes()
        assert a.poses.tobytes() == b.poses.tobytes()

    def test_seed_moves_cameras(self, small_spec):
        assert not np.array_equal(make_procedural_scene(small_spec, seed=1).poses,
                                  make_procedural_scene(small_spec, seed=2).poses)

    def test_depth_matches_geometry(self, small_spec):
        ds = make_procedural_scene(small_spec, seed=0)
        from halo.rendering import generate_rays
        rays = generate_rays(ds.poses[0], 24, 24, ds.camera_angle_x, 2.0, 6.0)
        o, d = rays.origins.double().numpy(), rays.dirs.double().numpy()
        depth = ds.depths[0].reshape(-1).astype(np.float64)
        hit = np.isfinite(depth)
        assert hit.any() and (~hit).any()
        # hit points lie on the unit sphere
        p = o[hit] + depth[hit, None] * d[hit]
        np.testing.assert_allclose(np.linalg.norm(p, axis=-1), 1.0, atol=1e-5)

    def test_misses_are_white(self, small_spec):
        ds = make_procedural_scene(small_spec, seed=0)
        assert (ds.images[np.isinf(ds.depths)] == 1.0).all()

    def test_split_names(self, small_spec):
        ds = make_procedural_scene(small_spec)
        assert len(ds.subset("train")) == 8 and len(ds.subset("test")) == 2

    def test_unknown_primitive(self):
        with pytest.raises(ValueError, match="primitive"):
            make_procedural_scene(ProceduralSceneSpec(primitive="torus"))


class TestImageIO:
    @given(arrays(np.float64, (5, 7, 3), elements=st.floats(0, 1)))
    @settings(max_examples=30, deadline=None)
    def test_png_quantization(self, img):
        import tempfile, os
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "x.png")
            write_png(path, img)
            assert np.abs(read_png(path) - img).max() <= 1 / 510 + 1e-7

    def test_png_round_trip_exact_on_grid(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (6, 6, 3)) / 255.0
        write_png(tmp_path / "a.png", img)
        first = read_png(tmp_path / "a.png")
        write_png(tmp_path / "b.png", first)
        assert read_png(tmp_path / "b.png").tobytes() == first.tobytes()

    def test_alpha_over_white(self, tmp_path):
        from PIL import Image
        Image.fromarray(np.zeros((2, 2, 4), np.uint8)).save(tmp_path / "t.png")
        assert (read_png(tmp_path / "t.png") == 1.0).all()

    def test_depth_sidecar_bit_exact(self, tmp_path):
        data = np.random.default_rng(1).normal(size=(9, 4, 2)).astype(np.float32)
        data[0, 0, 0] = np.inf
        write_depth_map(tmp_path / "d.bin", data, ("depth", "acc"))
        back, names = read_depth_map(tmp_path / "d.bin")
        assert back.tobytes() == data.tobytes() and names == ["depth", "acc"]

    def test_missing_paths(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_png(tmp_path / "nope.png")
        with pytest.raises(FileNotFoundError):
            read_depth_map(tmp_path / "nope.bin")

    def test_corrupt_files(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"\x89PNG garbage")
        (tmp_path / "bad.bin").write_bytes(b"HALODMAP" + b"\0" * 4)
        with pytest.raises(ValueError, match="corrupt"):
            read_png(tmp_path / "bad.png")
        with pytest.raises(ValueError, match="corrupt"):
            read_depth_map(tmp_path / "bad.bin")
