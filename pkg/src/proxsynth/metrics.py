"""Physical plausibility scores and K-means diversity of generated bodies."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from sklearn.cluster import KMeans

from .body import BodyParams
from .spatial import SdfField


def non_collision_score(vertices_world, sdf: SdfField) -> float:
    """Fraction of body vertices with a non-negative scene SDF."""
    v = np.asarray(vertices_world, dtype=np.float64).reshape(-1, 3)
    if len(v) == 0:
        raise ValueError("body has no vertices")
    return float(np.count_nonzero(sdf.eval(v) >= 0.0) / len(v))


def contact_score(vertices_world, sdf: SdfField) -> int:
    """1 when any body vertex touches or penetrates the scene (SDF <= 0), else 0."""
    v = np.asarray(vertices_world, dtype=np.float64).reshape(-1, 3)
    if len(v) == 0:
        raise ValueError("body has no vertices")
    return int(sdf.eval(v).min() <= 0.0)


def _wrap(a):
    return (np.asarray(a) + math.pi) % (2 * math.pi) - math.pi


def diversity_vectors(bodies: Sequence[BodyParams], include_translation: bool = False) -> np.ndarray:
    rows = []
    for p in bodies:
        v = p.to_vector().copy()
        v[3] = _wrap(v[3])
        rows.append(v if include_translation else v[3:])
    return np.array(rows)


def cluster_stats(x: np.ndarray, labels: np.ndarray, centers: np.ndarray, k: int) -> Tuple[float, float]:
    counts = np.bincount(labels, minlength=k)
    prob = counts[counts > 0] / len(labels)
    entropy = float(-(prob * np.log(prob)).sum())
    size = float(np.linalg.norm(x - centers[labels], axis=1).mean())
    return entropy, size


def kmeans(x, k: int, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """k-means++ seeding then Lloyd iterations (cap 300); returns (labels, centers)."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < k:
        raise ValueError(f"need at least k={k} samples, got {len(x)}")
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=300, tol=0.0,
                algorithm="lloyd", random_state=seed).fit(x)
    return km.labels_.astype(np.int64), km.cluster_centers_


def diversity(bodies: Sequence[Union[BodyParams, np.ndarray]], k: int = 20, seed: int = 0,
              include_translation: bool = False) -> Tuple[float, float]:
    """(entropy of the cluster-id histogram in nats, mean sample-to-centroid distance)."""
    if len(bodies) and isinstance(bodies[0], BodyParams):
        x = diversity_vectors(bodies, include_translation)
    else:
        x = np.asarray(bodies, dtype=np.float64).reshape(len(bodies), -1)
    labels, centers = kmeans(x, k, seed)
    return cluster_stats(x, labels, centers, k)


@dataclass
class EvalReport:
    non_collision: float
    contact: float
    entropy: float
    cluster_size: float
    k: int = 20
    per_sample: List[Dict] = field(default_factory=list)

    @property
    def entropy_max(self) -> float:
        return math.log(self.k)

    def summary(self) -> Dict:
        d = {k: v for k, v in asdict(self).items() if k != "per_sample"}
        d["entropy_max"] = self.entropy_max
        d["samples"] = len(self.per_sample)
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}

    def write(self, csv_path: Union[str, Path], json_path: Union[str, Path, None] = None) -> None:
        cols = ["sample", "non_collision", "contact"]
        extra = sorted({c for r in self.per_sample for c in r} - set(cols))
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols + extra)
            w.writeheader()
            for r in self.per_sample:
                w.writerow(r)
        if json_path is not None:
            Path(json_path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def evaluate(bodies_world: Sequence[np.ndarray], params: Sequence[BodyParams], sdf: SdfField,
             k: int = 20, seed: int = 0, include_translation: bool = False) -> EvalReport:
    rows = []
    for i, v in enumerate(bodies_world):
        rows.append({"sample": i, "non_collision": non_collision_score(v, sdf), "contact": contact_score(v, sdf)})
    if not rows:
        raise ValueError("nothing to evaluate")
    if len(params) >= k:
        entropy, size = diversity(params, k, seed, include_translation)
    else:
        entropy, size = float("nan"), float("nan")
    return EvalReport(float(np.mean([r["non_collision"] for r in rows])),
                      float(np.mean([r["contact"] for r in rows])), entropy, size, k, rows)
