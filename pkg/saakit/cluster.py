import hashlib
import json
from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from .corpus import Chunk, read_id_map, render_reference
from .errors import ClusterError, ManifestError, MissingSpeakerError
from .tags import SaaDoc, TagStyle


DEFAULT_MAX_ITER = 100
DEFAULT_TOL = 1e-6
K_PRESETS = (100, 200, 300)


class Embedding(BaseModel):
    model_config = ConfigDict(frozen=True)

    # a speaker id, or a turn id when speaker_id says whose turn it is
    owner: str
    vector: tuple[float, ...]
    speaker_id: str | None = None

    @field_validator("vector")
    @classmethod
    def _check_vector(cls, vector: tuple[float, ...]) -> tuple[float, ...]:
        if not vector:
            raise ValueError("empty vector")
        if not np.all(np.isfinite(vector)):
            raise ValueError("vector has non-finite components")
        return vector

    @property
    def speaker(self) -> str:
        return self.speaker_id if self.speaker_id is not None else self.owner


class ClusterModel(BaseModel):
    model_config = ConfigDict(frozen=True)

    k: int
    dim: int
    seed: int
    centroids: tuple[tuple[float, ...], ...]
    iterations_run: int = 0
    inertia: float = 0.0
    inertia_history: tuple[float, ...] = ()

    def centroid_array(self) -> np.ndarray:
        return np.array(self.centroids, dtype=np.float64).reshape(
            self.k, self.dim
        )


class ClusterAssignment(BaseModel):
    model_config = ConfigDict(frozen=True)

    map: dict[str, int]


def _check_dims(vectors: Sequence[Sequence[float]]) -> int:
    dims = {len(v) for v in vectors}
    if len(dims) != 1:
        raise ClusterError(f"Embeddings have mixed dimensions {sorted(dims)}")
    return dims.pop()


def mean_speaker_embeddings(
    turn_embeddings: Iterable[tuple[str, Sequence[float]]],
    normalize: bool = True,
) -> list[tuple[str, np.ndarray]]:
    turn_embeddings = list(turn_embeddings)
    if not turn_embeddings:
        raise ValueError("No embeddings given")
    _check_dims([v for _, v in turn_embeddings])

    by_speaker: dict[str, list[Sequence[float]]] = {}
    for speaker_id, vector in turn_embeddings:
        by_speaker.setdefault(speaker_id, []).append(vector)

    means = []
    for speaker_id, vectors in by_speaker.items():
        mean = np.mean(np.array(vectors, dtype=np.float64), axis=0)
        if normalize:
            norm = np.linalg.norm(mean)
            if norm == 0:
                raise ClusterError(
                    f"Mean embedding of {speaker_id!r} has zero norm"
                )
            mean = mean / norm
        means.append((speaker_id, mean))
    return means


def _sq_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # column by column keeps exact ties exact
    dist = np.empty((x.shape[0], centroids.shape[0]), dtype=np.float64)
    for j, c in enumerate(centroids):
        dist[:, j] = ((x - c) ** 2).sum(axis=1)
    return dist


def _nearest(
    x: np.ndarray, centroids: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    dist = _sq_distances(x, centroids)
    labels = np.argmin(dist, axis=1)
    return labels, dist[np.arange(x.shape[0]), labels]


def _kmeans_plusplus(
    x: np.ndarray, k: int, rng: np.random.Generator
) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # every point coincides with a chosen one
            nxt = next(i for i in range(n) if i not in chosen)
        chosen.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[chosen].copy()


def kmeans_fit(
    vectors: np.ndarray | Sequence[Sequence[float]],
    k: int,
    seed: int,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> tuple[ClusterModel, np.ndarray]:
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ClusterError(f"Expected an n x d matrix, got shape {x.shape}")
    n, dim = x.shape
    if not np.all(np.isfinite(x)):
        raise ClusterError("Vectors contain non-finite values")
    if k < 1:
        raise ClusterError("k must be at least 1")
    if n < k:
        raise ClusterError(f"Cannot fit {k} clusters to {n} vectors")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_plusplus(x, k, rng)

    history = []
    iterations_run = 0
    for it in range(max_iter):
        labels, dist = _nearest(x, centroids)
        history.append(float(dist.sum()))

        updated = centroids.copy()
        empty = []
        for j in range(k):
            members = labels == j
            if members.any():
                updated[j] = x[members].mean(axis=0)
            else:
                empty.append(j)
        if empty:
            farthest = np.argsort(-dist, kind="stable")
            for j, p in zip(empty, farthest):
                logger.debug(f"Re-seeding empty cluster {j} at point {p}")
                updated[j] = x[p]

        shift = float(np.sqrt(((updated - centroids) ** 2).sum(axis=1)).max())
        centroids = updated
        iterations_run = it + 1
        if shift < tol:
            break

    labels, dist = _nearest(x, centroids)
    inertia = float(dist.sum())
    history.append(inertia)
    logger.debug(
        f"k-means k={k} seed={seed}: {iterations_run} iterations, "
        f"inertia {inertia:.6g}"
    )

    model = ClusterModel(
        k=k,
        dim=dim,
        seed=seed,
        centroids=tuple(tuple(float(v) for v in c) for c in centroids),
        iterations_run=iterations_run,
        inertia=inertia,
        inertia_history=tuple(history),
    )
    return model, labels


def fit_best_of(
    vectors: np.ndarray | Sequence[Sequence[float]],
    k: int,
    seeds: Iterable[int],
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> tuple[ClusterModel, np.ndarray]:
    best: tuple[ClusterModel, np.ndarray] | None = None
    for seed in seeds:
        fit = kmeans_fit(vectors, k, seed, max_iter=max_iter, tol=tol)
        if best is None or fit[0].inertia < best[0].inertia:
            best = fit
    if best is None:
        raise ValueError("No seeds given")
    return best


def assign(model: ClusterModel, vector: Sequence[float]) -> int:
    v = np.asarray(vector, dtype=np.float64)
    if v.shape != (model.dim,):
        raise ClusterError(
            f"Vector of dimension {v.size} does not match model dimension "
            f"{model.dim}"
        )
    dist = _sq_distances(v[None, :], model.centroid_array())[0]
    return int(np.argmin(dist))


def assign_speakers(
    model: ClusterModel, speaker_vectors: Iterable[tuple[str, np.ndarray]]
) -> ClusterAssignment:
    return ClusterAssignment(
        map={spk: assign(model, v) for spk, v in speaker_vectors}
    )


def relabel_targets(
    chunks: Iterable[Chunk], assignment: ClusterAssignment
) -> list[SaaDoc]:
    docs = []
    for chunk in chunks:
        for speaker_id in chunk.speakers():
            if speaker_id not in assignment.map:
                raise MissingSpeakerError(speaker_id, "cluster assignment")
        docs.append(render_reference(chunk, TagStyle.CLUSTER, assignment.map))
    return docs


def toy_embedding(speaker_id: str, dim: int = 16) -> np.ndarray:
    """Stable pseudo-random unit vector per speaker. Not a voice model."""
    digest = hashlib.sha256(speaker_id.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def read_embeddings(path: Path) -> list[Embedding]:
    embeddings = []
    header: dict | None = None
    with path.open(encoding="utf-8") as f:
        for line_num, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(
                    f"Malformed JSON: {e}", path=path, line_num=line_num
                ) from e
            if not isinstance(obj, dict):
                raise ManifestError(
                    "Expected a JSON object", path=path, line_num=line_num
                )
            if not embeddings and header is None and "owner" not in obj:
                header = obj
                continue
            try:
                embeddings.append(Embedding.model_validate(obj))
            except ValidationError as e:
                raise ManifestError(
                    str(e), path=path, line_num=line_num
                ) from e

    if embeddings:
        try:
            dim = _check_dims([e.vector for e in embeddings])
        except ClusterError as e:
            raise ManifestError(str(e), path=path) from e
        if header is not None:
            if header.get("dim", dim) != dim:
                raise ManifestError(
                    f"Header says dim {header['dim']}, vectors have {dim}",
                    path=path,
                )
            if header.get("count", len(embeddings)) != len(embeddings):
                raise ManifestError(
                    f"Header says {header['count']} vectors, found "
                    f"{len(embeddings)}",
                    path=path,
                )
    return embeddings


def write_embeddings(path: Path, embeddings: Iterable[Embedding]) -> None:
    path.write_text(
        "".join(
            json.dumps(e.model_dump(mode="json", exclude_none=True)) + "\n"
            for e in embeddings
        ),
        encoding="utf-8",
    )


def write_model(path: Path, model: ClusterModel) -> None:
    path.write_text(
        json.dumps(model.model_dump(mode="json"), indent=2) + "\n",
        encoding="utf-8",
    )


def read_model(path: Path) -> ClusterModel:
    try:
        return ClusterModel.model_validate_json(path.read_text("utf-8"))
    except ValidationError as e:
        raise ManifestError(str(e), path=path) from e


def write_assignment(path: Path, assignment: ClusterAssignment) -> None:
    path.write_text(
        "".join(
            json.dumps({"speaker_id": spk, "cluster": idx}) + "\n"
            for spk, idx in assignment.map.items()
        ),
        encoding="utf-8",
    )


def read_assignment(path: Path) -> ClusterAssignment:
    return ClusterAssignment(map=read_id_map(path, "cluster"))
