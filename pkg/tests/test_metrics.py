import json
import math

import numpy as np
import pytest

from proxsynth.body import BodyParams, sample_pose
from proxsynth.metrics import (EvalReport, cluster_stats, contact_score, diversity, diversity_vectors, evaluate,
                               kmeans, non_collision_score)
from proxsynth.spatial import AnalyticSdf, GridSdf, SdfDomainError, bake_grid

FLOOR = AnalyticSdf(np.zeros((0, 7)))


def column(z):
    """642 points on a vertical line with the given heights."""
    z = np.asarray(z, dtype=np.float64)
    return np.stack([np.zeros_like(z), np.zeros_like(z), z], axis=1)


def lloyd_restarts(x, k, restarts, seed):
    """Plain Lloyd with random-sample init; returns the lowest-SSE (labels, centers)."""
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        c = x[rng.choice(len(x), k, replace=False)].copy()
        for _ in range(300):
            d = ((x[:, None, :] - c[None]) ** 2).sum(-1)
            lab = d.argmin(1)
            new = np.array([x[lab == j].mean(0) if np.any(lab == j) else c[j] for j in range(k)])
            if np.allclose(new, c):
                break
            c = new
        sse = ((x - c[lab]) ** 2).sum()
        if best is None or sse < best[0]:
            best = (sse, lab, c)
    return best[1], best[2]


class TestScores:
    def test_fully_above(self):
        v = column(np.linspace(0.05, 1.7, 642))
        assert non_collision_score(v, FLOOR) == 1.0 and contact_score(v, FLOOR) == 0

    def test_straddling(self):
        v = column(np.concatenate([np.full(321, -0.2), np.full(321, 0.3)]))
        assert non_collision_score(v, FLOOR) == 0.5 and contact_score(v, FLOOR) == 1

    def test_touching(self):
        z = np.linspace(0.0, 1.7, 642)
        assert z[0] == 0.0
        v = column(z)
        assert non_collision_score(v, FLOOR) == 1.0 and contact_score(v, FLOOR) == 1

    def test_penetrating(self):
        z = np.linspace(-0.01, 1.7, 642)
        v = column(z)
        assert non_collision_score(v, FLOOR) == pytest.approx(np.count_nonzero(z >= 0) / 642)
        assert contact_score(v, FLOOR) == 1

    def test_floating(self):
        v = column(np.linspace(0.1, 1.8, 642))
        assert contact_score(v, FLOOR) == 0 and non_collision_score(v, FLOOR) == 1.0

    def test_matches_direct_evaluation(self, body_model):
        sdf = AnalyticSdf(np.array([[0.0, 0.0, 0.2, 0.3, 0.3, 0.2, 0.4]]))
        v = body_model.vertices(sample_pose("standing", 1).replace(translation=[0.2, 0.1, 0.0]))
        d = sdf.eval(v)
        assert non_collision_score(v, sdf) == np.mean(d >= 0)
        assert contact_score(v, sdf) == int(d.min() <= 0)

    def test_grid_out_of_domain(self):
        g = bake_grid(FLOOR, ([-1, -1, -1], [1, 1, 1]), 5)
        with pytest.raises(SdfDomainError):
            non_collision_score(column([5.0]), g)

    def test_empty_body(self):
        with pytest.raises(ValueError):
            non_collision_score(np.zeros((0, 3)), FLOOR)
        with pytest.raises(ValueError):
            contact_score(np.zeros((0, 3)), FLOOR)


class TestDiversity:
    def test_balanced_copies(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(20, 6)) * 10
        x = np.repeat(pts, 5, axis=0)
        entropy, size = diversity(x, k=20, seed=0)
        assert entropy == pytest.approx(math.log(20), abs=1e-12)
        assert size == pytest.approx(0.0, abs=1e-9)

    def test_restart_oracle(self):
        x = np.random.default_rng(1).normal(size=(100, 5))
        _, size = diversity(x, k=4, seed=0)
        lab, c = lloyd_restarts(x, 4, 50, seed=2)
        oracle = np.linalg.norm(x - c[lab], axis=1).mean()
        assert abs(size - oracle) <= 0.05 * oracle

    def test_entropy_bounds(self):
        rng = np.random.default_rng(3)
        for k in (2, 5, 9):
            e, _ = diversity(rng.normal(size=(60, 3)), k=k, seed=1)
            assert 0.0 <= e <= math.log(k) + 1e-12

    def test_cluster_stats_hand(self):
        x = np.array([[0.0], [2.0], [10.0]])
        e, s = cluster_stats(x, np.array([0, 0, 1]), np.array([[1.0], [10.0]]), 2)
        assert e == pytest.approx(-(2 / 3 * math.log(2 / 3) + 1 / 3 * math.log(1 / 3)))
        assert s == pytest.approx(2 / 3)

    def test_too_few(self):
        with pytest.raises(ValueError):
            kmeans(np.zeros((5, 3)), 20)

    def test_deterministic(self):
        x = np.random.default_rng(4).normal(size=(80, 4))
        assert diversity(x, 6, seed=3) == diversity(x, 6, seed=3)

    def test_vectors_exclude_translation(self):
        p = BodyParams(translation=[5, 6, 7], yaw=3 * math.pi)
        v = diversity_vectors([p])
        assert v.shape == (1, 20) and v[0, 0] == pytest.approx(-math.pi)
        assert diversity_vectors([p], include_translation=True).shape == (1, 23)


class TestReport:
    def test_evaluate_and_write(self, body_model, tmp_path):
        params = [sample_pose("standing", s) for s in range(4)]
        # odd seeds float 0.3 m up, even seeds sink 0.05 m
        params = [p.replace(translation=p.translation + [0, 0, 0.3 if i % 2 else -0.05]) for i, p in enumerate(params)]
        bodies = [body_model.vertices(p) for p in params]
        rep = evaluate(bodies, params, FLOOR, k=2, seed=0)
        assert rep.contact == 0.5
        want = np.mean([np.mean(FLOOR.eval(b) >= 0) for b in bodies])
        assert rep.non_collision == pytest.approx(want) and rep.non_collision < 1.0
        assert 0 <= rep.entropy <= rep.entropy_max
        rep.write(tmp_path / "r.csv", tmp_path / "r.json")
        summary = json.loads((tmp_path / "r.json").read_text())
        assert summary["samples"] == 4 and summary["entropy_max"] == pytest.approx(math.log(2))
        assert len((tmp_path / "r.csv").read_text().splitlines()) == 5

    def test_diversity_unavailable_is_null(self, tmp_path):
        rep = EvalReport(1.0, 0.0, float("nan"), float("nan"), 20, [{"sample": 0, "non_collision": 1.0, "contact": 0}])
        rep.write(tmp_path / "r.csv", tmp_path / "r.json")
        s = json.loads((tmp_path / "r.json").read_text())
        assert s["entropy"] is None and s["cluster_size"] is None
