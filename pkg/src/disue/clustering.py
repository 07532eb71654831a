"""Client grouping by masked-parameter similarity.

The grouping algorithm is affinity propagation with damped responsibility
and availability messages:

    r(i,k) <- s(i,k) - max_{k' != k} [a(i,k') + s(i,k')]
    a(i,k) <- min(0, r(k,k) + sum_{i' not in {i,k}} max(0, r(i',k)))   (i != k)
    a(k,k) <- sum_{i' != k} max(0, r(i',k))

Both message sets are damped at 0.5. Exemplars are the points with
r(k,k) + a(k,k) > 0 once the exemplar set has been stable for 15
consecutive sweeps (or after 200 sweeps). The preference (diagonal)
defaults to the median off-diagonal similarity, and the number of
clusters is whatever emerges; it is never chosen up front.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, PairingError
from .secure import MaskedParams


@dataclass
class SimilarityMatrix:
    """Pairwise cosine similarities between clients, by masked uploads.

    `client_ids[i]` names the client behind row/column i. The diagonal is
    left at 0 and is reserved for the clustering preference.
    """

    values: np.ndarray  # [n, n] float64, symmetric, diag 0
    client_ids: list[int]

    @property
    def n(self) -> int:
        return int(self.values.shape[0])


@dataclass
class ClusterPartition:
    """A hard partition of clients into exemplar-led clusters.

    Clusters are ordered by ascending exemplar position; `members` holds
    client ids. `fallback` marks the degenerate single-cluster rescue used
    when no exemplar emerges.
    """

    members: list[list[int]]
    exemplars: list[int]  # client ids, one per cluster
    assignments: dict[int, int]  # client id -> cluster index
    n_iterations: int = 0
    converged: bool = False
    fallback: bool = False

    @property
    def num_clusters(self) -> int:
        return len(self.members)


def build_similarity_matrix(masked: list[MaskedParams]) -> SimilarityMatrix:
    """All pairwise similarities from one round's masked uploads."""
    if len(masked) < 2:
        raise InvalidInputError("similarity needs at least 2 clients; smaller rounds are a degenerate single cluster")
    tags = {m.epoch_tag for m in masked}
    if len(tags) != 1:
        raise PairingError(f"masked uploads span rounds {sorted(tags)}")
    dims = {m.masked_vector.shape for m in masked}
    if len(dims) != 1:
        raise PairingError("masked uploads of different dimension")
    stacked = np.stack([m.masked_vector for m in masked])
    values = stacked @ stacked.T
    values = (values + values.T) / 2.0  # exact symmetry, float dot is order-sensitive
    np.fill_diagonal(values, 0.0)
    return SimilarityMatrix(values=values, client_ids=[m.client_id for m in masked])


def affinity_propagation(
    sim: SimilarityMatrix,
    damping: float = 0.5,
    max_iter: int = 200,
    stable_iter: int = 15,
    preference: float | None = None,
) -> ClusterPartition:
    """Cluster clients by message passing on the similarity matrix.

    preference=None uses the median off-diagonal similarity. Ties in the
    final assignment go to the lower exemplar index.
    """
    n = sim.n
    if sim.values.shape != (n, n) or n < 2:
        raise InvalidInputError("affinity_propagation needs a square matrix over >= 2 clients")
    if not 0.0 <= damping < 1.0:
        raise InvalidInputError("damping must be in [0, 1)")
    off_diag = sim.values[~np.eye(n, dtype=bool)]
    pref = float(np.median(off_diag)) if preference is None else float(preference)
    s = sim.values.copy()
    np.fill_diagonal(s, pref)

    r = np.zeros((n, n))
    a = np.zeros((n, n))
    idx = np.arange(n)
    exemplars = np.zeros(n, dtype=bool)
    stable = 0
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        # responsibilities
        aps = a + s
        first_k = np.argmax(aps, axis=1)
        first = aps[idx, first_k]
        aps[idx, first_k] = -np.inf
        second = aps.max(axis=1)
        r_new = s - first[:, None]
        r_new[idx, first_k] = s[idx, first_k] - second
        r = damping * r + (1.0 - damping) * r_new

        # availabilities
        rp = np.maximum(r, 0.0)
        np.fill_diagonal(rp, r.diagonal())
        col = rp.sum(axis=0)
        a_new = col[None, :] - rp
        diag = a_new.diagonal().copy()
        a_new = np.minimum(a_new, 0.0)
        np.fill_diagonal(a_new, diag)
        a = damping * a + (1.0 - damping) * a_new

        current = (r.diagonal() + a.diagonal()) > 0
        if np.array_equal(current, exemplars):
            stable += 1
            if np.any(current) and stable >= stable_iter:
                converged = True
                break
        else:
            stable = 0
        exemplars = current

    exemplar_idx = np.flatnonzero(exemplars)
    fallback = exemplar_idx.size == 0
    if fallback:
        # no exemplar emerged; rescue with a single cluster led by the most
        # central client (highest total similarity), lower index on ties
        totals = sim.values.sum(axis=1)
        exemplar_idx = np.array([int(np.argmax(totals))])

    labels = np.argmax(sim.values[:, exemplar_idx], axis=1)
    labels[exemplar_idx] = np.arange(exemplar_idx.size)
    members: list[list[int]] = [[] for _ in range(exemplar_idx.size)]
    for i in range(n):
        members[labels[i]].append(sim.client_ids[i])
    assignments = {sim.client_ids[i]: int(labels[i]) for i in range(n)}
    return ClusterPartition(
        members=members,
        exemplars=[sim.client_ids[int(e)] for e in exemplar_idx],
        assignments=assignments,
        n_iterations=it,
        converged=converged,
        fallback=fallback,
    )


def singleton_partition(client_ids: list[int]) -> ClusterPartition:
    """The degenerate one-cluster partition used when clustering cannot run."""
    if not client_ids:
        raise InvalidInputError("cannot build a partition of no clients")
    ids = list(client_ids)
    return ClusterPartition(
        members=[ids],
        exemplars=[ids[0]],
        assignments={cid: 0 for cid in ids},
        converged=True,
    )
