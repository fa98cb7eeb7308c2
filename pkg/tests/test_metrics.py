import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsbridge.metrics import chamfer, estimate_normals, normal_error, p2s, point_triangle_distance


def brute_chamfer(a, b):
    d = np.array([[np.sqrt(sum((x - y) ** 2)) for y in b] for x in a])
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


def brute_point_triangle(p, a, b, c, n=300):
    """Dense barycentric sampling plus exact edge projections, minimised."""
    best = np.inf
    for u, v in zip(*np.triu_indices(n + 1)):
        w = v - u
        if u + w > n:
            continue
        q = a + (b - a) * (u / n) + (c - a) * (w / n)
        best = min(best, np.linalg.norm(p - q))
    for s, e in ((a, b), (b, c), (c, a)):
        t = np.clip(np.dot(p - s, e - s) / np.dot(e - s, e - s), 0, 1)
        best = min(best, np.linalg.norm(p - (s + t * (e - s))))
    return best


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


class TestChamfer:
    def test_identical(self):
        a = np.random.default_rng(0).uniform(-1, 1, size=(50, 3))
        assert chamfer(a, a) == 0.0

    def test_single_points(self):
        assert chamfer([[0, 0, 0]], [[1, 0, 0]]) == pytest.approx(1.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(-1, 1, size=(40, 3)), rng.uniform(-1, 1, size=(25, 3))
        assert chamfer(a, b) == pytest.approx(brute_chamfer(a, b), rel=1e-12)

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_symmetric_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(-1, 1, size=(rng.integers(1, 20), 3)), rng.uniform(-1, 1, size=(rng.integers(1, 20), 3))
        assert chamfer(a, b) == pytest.approx(chamfer(b, a), rel=1e-12)
        assert chamfer(a, b) > 0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            chamfer(np.zeros((0, 3)), np.zeros((2, 3)))


class TestP2S:
    def test_points_on_surface(self):
        v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
        f = np.array([[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]])
        rng = np.random.default_rng(1)
        bary = rng.dirichlet([1, 1, 1], size=30)
        pts = np.einsum("nk,nkj->nj", bary, v[f[rng.integers(0, 4, size=30)]])
        assert p2s(pts, v, f) < 1e-9

    def test_height_above_triangle(self):
        v = np.array([[-100, -100, 0], [100, -100, 0], [0, 100, 0]], float)
        assert p2s([[0.3, 0.2, 0.7]], v, [[0, 1, 2]]) == pytest.approx(0.7, abs=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_single_triangle_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = rng.normal(size=(3, 3))
        for p in rng.normal(scale=1.5, size=(6, 3)):
            exact = point_triangle_distance(p[None], np.array([[a, b, c]]))[0, 0]
            approx = brute_point_triangle(p, a, b, c)
            # The sampled oracle can only overestimate the true distance.
            assert exact <= approx + 1e-12
            assert approx - exact < 5e-3

    def test_mesh_brute_force(self):
        rng = np.random.default_rng(7)
        v = rng.normal(size=(10, 3))
        f = rng.integers(0, 10, size=(12, 3))
        f = f[(f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])]
        pts = rng.normal(size=(20, 3))
        per_point = [min(point_triangle_distance(p[None], v[tri][None])[0, 0] for tri in f) for p in pts]
        assert p2s(pts, v, f, chunk=7) == pytest.approx(np.mean(per_point), rel=1e-12)

    def test_rigid_invariance(self):
        rng = np.random.default_rng(8)
        v = rng.normal(size=(12, 3))
        f = np.array([[i, (i + 1) % 12, (i + 5) % 12] for i in range(12)])
        pts = rng.normal(size=(30, 3))
        rot, shift = random_rotation(rng), rng.normal(size=3)
        assert p2s(pts @ rot.T + shift, v @ rot.T + shift, f) == pytest.approx(p2s(pts, v, f), abs=1e-9)

    def test_degenerate_and_empty(self):
        with pytest.raises(ValueError):
            p2s([[0, 0, 0]], np.zeros((3, 3)), [[0, 1, 2]])
        with pytest.raises(ValueError):
            p2s(np.zeros((0, 3)), np.eye(3), [[0, 1, 2]])


class TestNormalError:
    def test_identical_and_flipped(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(20, 3))
        n = rng.normal(size=(20, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        assert normal_error(pts, n, pts, n) == pytest.approx(0.0, abs=1e-6)
        assert normal_error(pts, -n, pts, n) == pytest.approx(180.0, abs=1e-6)

    def test_brute_force(self):
        rng = np.random.default_rng(1)
        pp, gp = rng.normal(size=(15, 3)), rng.normal(size=(22, 3))
        pn, gn = rng.normal(size=(15, 3)), rng.normal(size=(22, 3))
        pn /= np.linalg.norm(pn, axis=1, keepdims=True)
        gn /= np.linalg.norm(gn, axis=1, keepdims=True)
        angles = []
        for p, n in zip(pp, pn):
            j = int(np.argmin([np.linalg.norm(p - q) for q in gp]))
            angles.append(np.degrees(np.arccos(np.clip(np.dot(n, gn[j]), -1, 1))))
        value = normal_error(pp, pn, gp, gn)
        assert value == pytest.approx(np.mean(angles), rel=1e-12)
        assert 0.0 <= value <= 180.0

    def test_zero_length_rejected(self):
        with pytest.raises(ValueError, match="zero-length"):
            normal_error([[0, 0, 0]], [[0, 0, 0]], [[0, 0, 0]], [[0, 0, 1]])


class TestEstimateNormals:
    def test_plane(self):
        rng = np.random.default_rng(0)
        pts = np.c_[rng.uniform(-1, 1, size=(200, 2)), np.zeros(200)]
        n, reliable = estimate_normals(pts)
        assert reliable.all()
        angle = np.degrees(np.arccos(np.clip(np.abs(n[:, 2]), 0, 1)))
        assert angle.max() < 1.0

    def test_sphere_outward(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(2000, 3))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        n, _ = estimate_normals(pts)
        angle = np.degrees(np.arccos(np.clip(np.sum(n * pts, axis=1), -1, 1)))
        assert np.mean(angle < 10.0) >= 0.95

    def test_collinear_flagged(self):
        pts = np.c_[np.linspace(0, 1, 20), np.zeros(20), np.zeros(20)]
        _, reliable = estimate_normals(pts, k=5)
        assert not reliable.any()

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            estimate_normals(np.zeros((10, 3)), k=16)
