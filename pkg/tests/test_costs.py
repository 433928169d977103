import itertools
import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otguide.core import DegenerateInputError, DiscreteMeasure, MissingAttributeError, PointAttrs, StructuralError
from otguide.costs import (
    CostSpec,
    HistogramCache,
    InnerSolver,
    LabHistogram,
    angle_cost,
    avg_color_distance,
    bin_centers,
    combined_cost,
    cost_matrix,
    histogram_wasserstein,
    lab_bin_index,
    lab_histogram,
    sq_euclidean,
)
from otguide.datagen import Image, rgb_to_lab
from otguide.solvers import brute_force_solve
from otguide.core import CostMatrix

from lab_oracle import cie_lab


def image_from(rows):
    px = np.asarray(rows, dtype=np.uint8)
    return Image(px.shape[1], px.shape[0], px)


def patch(rgb, w=4, h=4):
    px = np.empty((h, w, 3), dtype=np.uint8)
    px[:] = rgb
    return Image(w, h, px)


class TestSqEuclidean:
    def test_identity(self):
        assert sq_euclidean([1.5, -2.0], [1.5, -2.0]) == 0.0

    def test_interval_gap(self):
        assert sq_euclidean([0], [32]) == 1024.0

    def test_loop_oracle(self, rng):
        u, v = rng.normal(size=5), rng.normal(size=5)
        oracle = sum((a - b) ** 2 for a, b in zip(u, v))
        assert abs(sq_euclidean(u, v) - oracle) <= 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(StructuralError):
            sq_euclidean([0, 1], [0])


class TestAngle:
    @pytest.mark.parametrize("mode", ["linear", "circular"])
    def test_equal(self, mode):
        assert angle_cost(90, 90, mode) == 0

    def test_wraparound(self):
        assert angle_cost(350, 10, "circular") == 400
        assert angle_cost(350, 10, "linear") == 115600

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            angle_cost(360, 0)

    @settings(max_examples=200)
    @given(st.floats(0, 359.999), st.floats(0, 359.999))
    def test_bounds_and_symmetry(self, a, b):
        assert angle_cost(a, b, "circular") <= 180.0**2
        assert angle_cost(a, b, "linear") <= 360.0**2
        for mode in ("linear", "circular"):
            assert angle_cost(a, b, mode) == angle_cost(b, a, mode)


class TestColour:
    def test_identical_images(self):
        img = patch((10, 200, 30))
        assert avg_color_distance(img, img) == 0.0

    def test_red_vs_blue(self):
        d = avg_color_distance(patch((255, 0, 0)), patch((0, 0, 255)))
        assert d == pytest.approx(math.sqrt(2 * 255**2), abs=1e-12)
        assert round(d, 2) == 360.62

    def test_background_excluded(self):
        half = image_from([[[255, 0, 0], [255, 255, 255]], [[255, 0, 0], [252, 251, 250]]])
        assert avg_color_distance(half, patch((255, 0, 0))) == 0.0

    def test_all_background(self):
        with pytest.raises(DegenerateInputError):
            avg_color_distance(patch((255, 255, 255)), patch((0, 0, 0)))

    def test_pixel_order_free(self, rng):
        px = rng.integers(0, 256, size=(5, 6, 3), dtype=np.uint8)
        shuffled = px.reshape(-1, 3)[rng.permutation(30)].reshape(5, 6, 3)
        a, b = Image(6, 5, px), Image(6, 5, shuffled)
        ref = patch((1, 2, 3))
        assert avg_color_distance(a, ref) == pytest.approx(avg_color_distance(b, ref), abs=1e-12)


class TestCombined:
    def test_identical(self):
        p = PointAttrs("a", 30.0, (1, 2, 3))
        assert combined_cost(p, p, 5.0) == 0

    def test_zero_colour_weight(self):
        assert combined_cost(PointAttrs("a", 30.0, (0, 0, 0)), PointAttrs("b", 30.0, (255, 9, 9)), 0.0) == 0

    def test_worked_example(self):
        x = PointAttrs("a", 5.0, (0, 0, 0))
        y = PointAttrs("b", 355.0, (30, 40, 0))  # 10 degrees apart, colour distance 50
        assert combined_cost(x, y, 2.0) == pytest.approx(200.0, abs=1e-12)

    def test_missing_attribute(self):
        with pytest.raises(MissingAttributeError):
            combined_cost(PointAttrs("a", 5.0), PointAttrs("b", 5.0, (0, 0, 0)), 1.0)

    def test_spec_requires_lambda(self):
        with pytest.raises(ValueError):
            CostSpec("combined")


class TestLab:
    def test_matches_inline_formula(self):
        grid = np.array(list(itertools.product((0, 128, 255), repeat=3)))
        ours = rgb_to_lab(grid)
        ref = np.array([cie_lab(c) for c in grid])
        assert np.max(np.abs(ours - ref)) <= 0.05

    def test_matches_skimage(self):
        skcolor = pytest.importorskip("skimage.color")
        grid = np.array(list(itertools.product((0, 128, 255), repeat=3)), dtype=np.uint8)
        ref = skcolor.rgb2lab(grid.reshape(1, -1, 3) / 255.0, illuminant="D65").reshape(-1, 3)
        assert np.max(np.abs(rgb_to_lab(grid) - ref)) <= 0.05

    def test_white_and_black(self):
        lab = rgb_to_lab([[255, 255, 255], [0, 0, 0]])
        assert np.allclose(lab, [[100, 0, 0], [0, 0, 0]], atol=1e-6)


class TestHistogram:
    def test_single_colour(self):
        h = lab_histogram(patch((200, 30, 30)))
        assert h.weights.tolist() == [1.0]

    def test_two_colours(self):
        img = image_from([[[200, 30, 30], [20, 30, 200]], [[200, 30, 30], [20, 30, 200]]])
        h = lab_histogram(img)
        assert h.weights.tolist() == [0.5, 0.5]

    def test_hand_computed_bins(self):
        colours = [(255, 0, 0), (0, 255, 0), (0, 0, 255), (10, 10, 10)]
        img = image_from([colours[:2], colours[2:]])
        expected = []
        for c in colours:
            L, a, b = cie_lab(c)
            il = min(int(L // 12.5), 7)
            ia = min(int((a + 128) // (255 / 8)), 7)
            ib = min(int((b + 128) // (255 / 8)), 7)
            expected.append((il * 8 + ia) * 8 + ib)
        assert lab_histogram(img).index.tolist() == sorted(set(expected))

    def test_background_only(self):
        with pytest.raises(DegenerateInputError):
            lab_histogram(patch((251, 251, 251)))

    def test_self_distance_zero(self):
        h = lab_histogram(image_from([[[200, 30, 30], [20, 30, 200]]]))
        assert histogram_wasserstein(h, h) == pytest.approx(0.0, abs=1e-12)

    def test_point_masses(self):
        centers = bin_centers(8)
        h1 = LabHistogram(8, np.array([3]), np.array([1.0]))
        h2 = LabHistogram(8, np.array([300]), np.array([1.0]))
        assert histogram_wasserstein(h1, h2) == pytest.approx(np.linalg.norm(centers[3] - centers[300]), abs=1e-12)

    def test_six_bin_brute_force(self, rng):
        for _ in range(5):
            i1 = np.sort(rng.choice(512, 6, replace=False))
            i2 = np.sort(rng.choice(512, 6, replace=False))
            uniform = np.full(6, 1 / 6)
            h1, h2 = LabHistogram(8, i1, uniform), LabHistogram(8, i2, uniform)
            c1, c2 = bin_centers(8)[i1], bin_centers(8)[i2]
            oracle = brute_force_solve(
                DiscreteMeasure(c1, uniform), DiscreteMeasure(c2, uniform),
                CostMatrix(np.linalg.norm(c1[:, None] - c2[None], axis=-1)),
            ).objective
            assert abs(histogram_wasserstein(h1, h2, InnerSolver("exact")) - oracle) <= 1e-9

    def test_triangle_inequality(self, rng):
        def rand_hist():
            idx = np.sort(rng.choice(512, rng.integers(1, 10), replace=False))
            w = rng.random(idx.size)
            return LabHistogram(8, idx, w / w.sum())

        exact = InnerSolver("exact")
        for _ in range(30):
            a, b, c = rand_hist(), rand_hist(), rand_hist()
            ab = histogram_wasserstein(a, b, exact)
            bc = histogram_wasserstein(b, c, exact)
            ac = histogram_wasserstein(a, c, exact)
            assert ac <= ab + bc + 1e-6

    def test_grid_mismatch(self):
        with pytest.raises(StructuralError):
            histogram_wasserstein(LabHistogram(8, np.array([0]), np.ones(1)), LabHistogram(4, np.array([0]), np.ones(1)))


def attributed(rng, n, prefix):
    attrs = [PointAttrs(f"{prefix}{i}", float(rng.uniform(0, 360)), tuple(int(c) for c in rng.integers(0, 256, 3)))
             for i in range(n)]
    return DiscreteMeasure.uniform(rng.normal(size=(n, 3)), attrs)


class TestCostMatrix:
    def test_zero_diagonal(self, rng):
        mu = DiscreteMeasure.uniform(rng.normal(size=(5, 3)))
        assert np.all(np.diag(cost_matrix(mu, mu, CostSpec()).entries) == 0)

    @pytest.mark.parametrize("spec", [
        CostSpec("sq_euclidean"), CostSpec("angle", angle_mode="linear"), CostSpec("angle"),
        CostSpec("avg_color"), CostSpec("combined", lambda_color=3.0),
    ])
    def test_pointwise_oracle(self, rng, spec):
        mu, nu = attributed(rng, 2, "a"), attributed(rng, 3, "b")
        C = cost_matrix(mu, nu, spec).entries
        assert C.shape == (2, 3)
        for i in range(2):
            for j in range(3):
                x, y = mu.attrs[i], nu.attrs[j]
                if spec.kind == "sq_euclidean":
                    expected = sq_euclidean(mu.points[i], nu.points[j])
                elif spec.kind == "angle":
                    expected = angle_cost(x.angle, y.angle, spec.angle_mode)
                elif spec.kind == "avg_color":
                    expected = math.dist(x.color, y.color)
                else:
                    expected = combined_cost(x, y, spec.lambda_color, spec.angle_mode)
                assert C[i, j] == pytest.approx(expected, rel=1e-12, abs=1e-12)

    @pytest.mark.parametrize("kind", ["sq_euclidean", "angle", "avg_color", "combined"])
    def test_symmetry(self, rng, kind):
        mu, nu = attributed(rng, 4, "a"), attributed(rng, 4, "b")
        spec = CostSpec(kind, lambda_color=1.5)
        assert np.allclose(cost_matrix(mu, nu, spec).entries, cost_matrix(nu, mu, spec).entries.T, atol=1e-12)

    def test_missing_attribute_names_point(self):
        mu = DiscreteMeasure.uniform([[0.0]], [PointAttrs("lonely")])
        with pytest.raises(MissingAttributeError, match="lonely"):
            cost_matrix(mu, mu, CostSpec("angle"))

    def _histogram_setup(self, rng, n=4):
        images = {}
        for pid in [f"s{i}" for i in range(n)] + [f"t{i}" for i in range(n)]:
            images[pid] = Image(3, 3, rng.integers(0, 256, size=(3, 3, 3), dtype=np.uint8))
        mu = DiscreteMeasure.uniform(np.zeros((n, 1)), [PointAttrs(f"s{i}") for i in range(n)])
        nu = DiscreteMeasure.uniform(np.zeros((n, 1)), [PointAttrs(f"t{i}") for i in range(n)])
        return mu, nu, images

    def test_histogram_cache_transparent(self, rng):
        mu, nu, images = self._histogram_setup(rng)
        spec = CostSpec("histogram_wasserstein")
        cached = cost_matrix(mu, nu, spec, images=images)
        uncached = cost_matrix(mu, nu, spec, images=images, use_cache=False)
        assert np.array_equal(cached.entries, uncached.entries)

    def test_histogram_threads_match_serial(self, rng):
        mu, nu, images = self._histogram_setup(rng)
        spec = CostSpec("histogram_wasserstein")
        serial = cost_matrix(mu, nu, spec, images=images, threads=1)
        parallel = cost_matrix(mu, nu, spec, images=images, threads=4)
        assert np.array_equal(serial.entries, parallel.entries)

    def test_histogram_needs_images(self, rng):
        mu, nu, images = self._histogram_setup(rng)
        del images["t2"]
        with pytest.raises(MissingAttributeError, match="t2"):
            cost_matrix(mu, nu, CostSpec("histogram_wasserstein"), images=images)

    def test_cache_concurrent_inserts(self, rng):
        cache = HistogramCache()
        img = Image(2, 2, rng.integers(0, 200, size=(2, 2, 3), dtype=np.uint8))
        results = []

        def worker():
            results.append(cache.get("same", img, 8))

        threads = [threading.Thread(target=worker) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(cache) == 1
        assert all(np.array_equal(r.index, results[0].index) for r in results)


def test_spec_json_round_trip():
    doc = {"kind": "histogram_wasserstein", "bins": 6, "inner": {"method": "sinkhorn", "epsilon": 0.5}}
    spec = CostSpec.from_json(doc)
    assert spec.histogram_bins == 6 and spec.inner_solver == InnerSolver("sinkhorn", 0.5)
    assert CostSpec.from_json(spec.to_json()) == spec


def test_spec_rejects_unknown_field():
    with pytest.raises(ValueError, match="colour"):
        CostSpec.from_json({"kind": "angle", "colour": 1})
