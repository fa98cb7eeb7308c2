import json

import numpy as np
import pytest

from gsbridge.core import DepthMap, GaussianSet, Image, LatentGrid, LossWeights, SmplMesh
from gsbridge.io import (
    ParseError,
    camera_from_dict,
    camera_to_dict,
    loss_weights_from_dict,
    loss_weights_to_dict,
    ply_bytes,
    read_checkpoint,
    read_config,
    read_depth_png,
    read_depth_png_raw,
    read_latent,
    read_obj,
    read_ply,
    read_png,
    read_tensor,
    surface_mesh,
    surface_points,
    synth_scene,
    tensor_bytes,
    write_checkpoint,
    write_depth_png,
    write_latent,
    write_obj,
    write_ply,
    write_png,
)
from gsbridge.io.synth import _SHAPES, SPHERE_RADIUS, orbit_cameras
from gsbridge.metrics import p2s


def random_gaussians(n, seed=0):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(n, 14))
    m[:, :3] = np.clip(m[:, :3], -0.99, 0.99)
    m = m.astype(np.float32).astype(np.float64)
    return GaussianSet.from_attribute_matrix(m)


def mutate(data: bytes, rng) -> bytes:
    buf = bytearray(data)
    op = rng.integers(0, 4)
    if op == 0 and buf:
        for _ in range(rng.integers(1, 8)):
            buf[rng.integers(0, len(buf))] = rng.integers(0, 256)
    elif op == 1:
        buf = buf[: rng.integers(0, len(buf) + 1)]
    elif op == 2:
        pos = rng.integers(0, len(buf) + 1)
        buf[pos:pos] = rng.integers(0, 256, size=rng.integers(1, 16)).astype(np.uint8).tobytes()
    elif buf:
        a = rng.integers(0, len(buf))
        del buf[a:a + rng.integers(1, 32)]
    return bytes(buf)


def fuzz(reader, data, cases=1000, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(cases):
        try:
            reader(mutate(data, rng))
        except ParseError:
            pass


class TestPly:
    def test_binary_round_trip_bit_identical(self, tmp_path):
        g = random_gaussians(1000)
        write_ply(tmp_path / "a.ply", g)
        back = read_ply(tmp_path / "a.ply")
        np.testing.assert_array_equal(back.attribute_matrix(), g.attribute_matrix())
        assert ply_bytes(back) == (tmp_path / "a.ply").read_bytes()

    def test_ascii_round_trip(self, tmp_path):
        g = random_gaussians(50, seed=1)
        write_ply(tmp_path / "a.ply", g, binary=False)
        np.testing.assert_allclose(read_ply(tmp_path / "a.ply").attribute_matrix(), g.attribute_matrix(), atol=1e-6)

    def test_property_order_and_double(self):
        g = random_gaussians(3, seed=2)
        m = g.attribute_matrix()
        names = ["opacity", "x", "y", "z", "red", "green", "blue", "scale_0", "scale_1", "scale_2",
                 "rot_0", "rot_1", "rot_2", "rot_3"]
        cols = [13, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12]
        head = "ply\nformat binary_little_endian 1.0\ncomment reordered\nelement vertex 3\n"
        head += "".join(f"property double {n}\n" for n in names) + "end_header\n"
        data = head.encode() + m[:, cols].astype("<f8").tobytes()
        np.testing.assert_array_equal(read_ply(data).attribute_matrix(), m)

    def test_truncated_names_missing_bytes(self):
        data = ply_bytes(random_gaussians(10))
        with pytest.raises(ParseError, match="56 bytes missing") as err:
            read_ply(data[:-56])
        assert err.value.offset == len(data) - 56

    def test_unknown_property(self):
        data = ply_bytes(random_gaussians(1)).replace(b"property float opacity", b"property float f_rest")
        with pytest.raises(ParseError, match="unknown property 'f_rest'"):
            read_ply(data)

    def test_empty_set(self):
        assert len(read_ply(ply_bytes(GaussianSet.empty()))) == 0

    def test_fuzz_binary(self):
        fuzz(read_ply, ply_bytes(random_gaussians(5)))

    def test_fuzz_ascii(self):
        fuzz(read_ply, ply_bytes(random_gaussians(5), binary=False), seed=1)


class TestObj:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        mesh = SmplMesh(rng.normal(size=(6, 3)), [[0, 1, 2], [3, 4, 5]], rng.uniform(size=(6, 3)))
        write_obj(tmp_path / "m.obj", mesh)
        back = read_obj(tmp_path / "m.obj")
        np.testing.assert_array_equal(back.vertices, mesh.vertices)
        np.testing.assert_array_equal(back.faces, mesh.faces)
        np.testing.assert_array_equal(back.vertex_colors, mesh.vertex_colors)

    def test_polygons_and_slashes(self):
        data = b"# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1/1/1 2/2/1 3/3/1 4/4/1\n"
        mesh = read_obj(data)
        np.testing.assert_array_equal(mesh.faces, [[0, 1, 2], [0, 2, 3]])
        assert mesh.vertex_colors is None

    def test_bad_index_offset(self):
        data = b"v 0 0 0\nv 1 0 0\nf 1 2 9\n"
        with pytest.raises(ParseError, match="out of range") as err:
            read_obj(data)
        assert err.value.offset == 16

    def test_fuzz(self):
        mesh = SmplMesh(np.eye(3), [[0, 1, 2]])
        data = b"v 1.0 0.0 0.0\nv 0.0 1.0 0.0\nv 0.0 0.0 1.0\nf 1 2 3\n"
        assert np.array_equal(read_obj(data).vertices, mesh.vertices)
        fuzz(read_obj, data)


class TestPng:
    def test_rgb_round_trip_8bit(self, tmp_path):
        px = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3)) / 255.0
        write_png(tmp_path / "a.png", Image(px))
        np.testing.assert_array_equal(read_png(tmp_path / "a.png").pixels, px)

    def test_depth_16bit_exact(self, tmp_path):
        raw = np.random.default_rng(1).integers(0, 65536, size=(6, 4)).astype(np.uint16)
        write_depth_png(tmp_path / "d.png", DepthMap(raw / 1000.0))
        np.testing.assert_array_equal(read_depth_png_raw(tmp_path / "d.png"), raw)
        assert json.loads((tmp_path / "d.png.json").read_text()) == {"scale": 1000.0}
        np.testing.assert_allclose(read_depth_png(tmp_path / "d.png").depth, raw / 1000.0, rtol=1e-15)

    def test_depth_out_of_range(self, tmp_path):
        with pytest.raises(ValueError):
            write_depth_png(tmp_path / "d.png", DepthMap(np.full((2, 2), 70.0)))

    def test_fuzz(self, tmp_path):
        write_png(tmp_path / "a.png", Image(np.random.default_rng(2).uniform(size=(4, 4, 3))))
        fuzz(read_png, (tmp_path / "a.png").read_bytes())


class TestTensor:
    def test_round_trip(self, tmp_path):
        a = np.random.default_rng(0).normal(size=(3, 4, 5)).astype(np.float32)
        data = tensor_bytes(a)
        assert data[:4] == b"JGAT"
        assert len(data) == 4 + 4 + 3 * 8 + a.size * 4
        np.testing.assert_array_equal(read_tensor(data), a)
        assert tensor_bytes(read_tensor(data)) == data

    def test_latent_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        grid = LatentGrid(rng.normal(size=(4, 4, 4, 3)).astype(np.float32), rng.integers(0, 2, size=(4, 4, 4)))
        write_latent(tmp_path / "z.jgat", grid)
        back = read_latent(tmp_path / "z.jgat")
        np.testing.assert_array_equal(back.stacked(), grid.stacked())

    def test_truncated(self):
        data = tensor_bytes(np.zeros((2, 3)))
        with pytest.raises(ParseError, match="8 bytes missing"):
            read_tensor(data[:-8])

    def test_checkpoint(self, tmp_path):
        arrays = {"w": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.ones(3, np.float32)}
        write_checkpoint(tmp_path / "c.jgat", arrays, meta={"step": 3})
        back, meta = read_checkpoint(tmp_path / "c.jgat")
        assert list(back) == ["w", "b"] and meta == {"step": 3}
        for k in arrays:
            np.testing.assert_array_equal(back[k], arrays[k])

    def test_fuzz(self):
        fuzz(read_tensor, tensor_bytes(np.arange(12, dtype=np.float32).reshape(3, 4)))


class TestJson:
    def test_config_error_offset(self):
        with pytest.raises(ParseError, match="line 1") as err:
            read_config(b'{"a": 1,}')
        assert err.value.offset == 8

    def test_camera_and_weights(self):
        cam = orbit_cameras(1, 0)[0]
        back = camera_from_dict(json.loads(json.dumps(camera_to_dict(cam))))
        np.testing.assert_array_equal(back.rotation, cam.rotation)
        assert back.fx == cam.fx and back.width == cam.width
        w = LossWeights.with_perceptual()
        assert loss_weights_from_dict(loss_weights_to_dict(w)) == w
        with pytest.raises(ParseError):
            loss_weights_from_dict({"l9": 1.0})

    def test_fuzz(self):
        fuzz(read_config, b'{"steps": 10, "lr": 0.001, "scenes": ["sphere", "box"]}')


class TestSynth:
    def test_sphere_radius(self):
        scene = synth_scene("sphere", 2, seed=0)
        r = np.linalg.norm(scene.gaussians.positions, axis=1)
        assert np.all(np.abs(r - SPHERE_RADIUS) < 1e-6)
        assert len(scene.views) == 2

    @pytest.mark.parametrize("kind", ["sphere", "box", "capsule-person"])
    def test_one_gaussian_per_voxel(self, kind):
        g = synth_scene(kind, 1, seed=0, resolution=32).gaussians
        cells = np.floor((g.positions + 1) / 2 * 32).astype(int)
        assert len(np.unique(cells, axis=0)) == len(g)

    def test_deterministic(self):
        a, b = synth_scene("capsule-person", 2, seed=5), synth_scene("capsule-person", 2, seed=5)
        assert ply_bytes(a.gaussians) == ply_bytes(b.gaussians)
        for va, vb in zip(a.views, b.views):
            assert np.array_equal(va.image.pixels, vb.image.pixels)
            assert np.array_equal(va.depth.pixels, vb.depth.pixels)

    def test_seed_changes_texture(self):
        a, b = synth_scene("box", 1, seed=0), synth_scene("box", 1, seed=1)
        assert not np.array_equal(a.gaussians.colors, b.gaussians.colors)

    def test_renders_cover_the_object(self):
        view = synth_scene("sphere", 1, seed=0).views[0]
        assert (view.depth.depth > 0).mean() > 0.15
        assert np.all((view.image.pixels >= 0) & (view.image.pixels <= 1))

    def test_proxy_mesh_inside(self):
        mesh = synth_scene("sphere", 1, seed=0).mesh
        assert np.all(np.linalg.norm(mesh.vertices, axis=1) < SPHERE_RADIUS)

    @pytest.mark.parametrize("kind,tol", [("sphere", 2e-3), ("box", 1e-12), ("capsule-person", 2e-3)])
    def test_surface_mesh_matches_shape(self, kind, tol):
        mesh = surface_mesh(kind)
        _, sdf = _SHAPES[kind]
        on_shape = np.abs(sdf(mesh.vertices))
        # vertices of buried capsule triangles sit inside the union, never outside it
        assert np.all(sdf(mesh.vertices) < 1e-12)
        pts = surface_points(kind, 32)
        assert p2s(pts, mesh.vertices, mesh.faces) < tol
        if kind != "capsule-person":
            assert on_shape.max() < 1e-12

    def test_count_validated(self):
        with pytest.raises(ValueError):
            synth_scene("sphere", 0, seed=0)
        with pytest.raises(ValueError):
            synth_scene("torus", 1, seed=0)
