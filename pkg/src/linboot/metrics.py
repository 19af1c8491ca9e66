"""Clustering-similarity measures for soft assignments.

Both measures compare a base clustering ``zeta`` with another clustering
``other`` (each genes x clusters, rows summing to one). The two matrices may
have different numbers of columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DegenerateClusteringError


def _check_probs(zeta, name):
    zeta = np.asarray(zeta, dtype=float)
    if zeta.ndim != 2:
        raise DataError(f"{name} must be a genes x clusters matrix")
    if np.any(zeta < 0) or not np.allclose(zeta.sum(axis=1), 1.0, atol=1e-9):
        raise DataError(f"{name} rows must be probability vectors")
    return zeta


def _pair(base, other):
    base = _check_probs(base, "base")
    other = _check_probs(other, "other")
    if base.shape[0] != other.shape[0]:
        raise DataError(f"clusterings cover {base.shape[0]} and {other.shape[0]} genes")
    return base, other


def fm_index(base, other) -> float:
    """Soft Fowlkes-Mallows index.

    With co-clustering matrices ``A = base base^T`` and ``B = other other^T``
    this is ``<A, B> / sqrt(<A, A> <B, B>)`` summed over all ordered gene
    pairs, self-pairs included. ``<A, B> = |base^T other|_F^2`` so only
    cluster-by-cluster products are formed.
    """
    base, other = _pair(base, other)
    num = np.sum((base.T @ other) ** 2)
    den = np.sqrt(np.sum((base.T @ base) ** 2) * np.sum((other.T @ other) ** 2))
    return float(min(num / den, 1.0))


def _entropy(p):
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def nmi(base, other) -> float:
    """Normalised mutual information of the label distribution induced by
    drawing a gene uniformly and its two labels independently from ``base``
    and ``other``.

    Raises
    ------
    DegenerateClusteringError
        If either marginal label distribution has zero entropy.
    """
    base, other = _pair(base, other)
    n = base.shape[0]
    joint = base.T @ other / n
    p1 = base.mean(axis=0)
    p2 = other.mean(axis=0)
    h1, h2 = _entropy(p1), _entropy(p2)
    if h1 <= 0 or h2 <= 0:
        raise DegenerateClusteringError(
            "clustering places all mass on a single cluster; NMI is undefined")
    outer = p1[:, None] * p2[None, :]
    nz = joint > 0
    mi = np.sum(joint[nz] * np.log(joint[nz] / outer[nz]))
    return float(np.clip(mi / np.sqrt(h1 * h2), 0.0, 1.0))


def coclustering(zeta, pairs) -> np.ndarray:
    """Co-clustering probability ``zeta_i . zeta_j`` for each pair ``(i, j)``."""
    zeta = np.asarray(zeta, dtype=float)
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    return np.einsum("pk,pk->p", zeta[pairs[:, 0]], zeta[pairs[:, 1]])


@dataclass(frozen=True)
class CoclusterStats:
    pairs: np.ndarray
    sd: np.ndarray
    base_prob: np.ndarray | None = None

    def above(self, threshold: float) -> np.ndarray:
        return self.sd > threshold


def cocluster_sd(replicate_zetas, pairs, base=None) -> CoclusterStats:
    """Bootstrap sample standard deviation (ddof=1) of co-clustering probabilities."""
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    if pairs.shape[0] == 0:
        raise DataError("pair list is empty")
    zetas = list(replicate_zetas)
    if len(zetas) < 2:
        raise DataError("need at least two replicates for a standard deviation")
    probs = np.stack([coclustering(z, pairs) for z in zetas])
    base_prob = None if base is None else coclustering(base, pairs)
    # Centring on the first replicate first makes identical replicates give 0 exactly.
    sd = (probs - probs[0]).std(axis=0, ddof=1)
    return CoclusterStats(pairs=pairs, sd=sd, base_prob=base_prob)


def all_pairs(genes) -> np.ndarray:
    genes = np.asarray(genes, dtype=int)
    i, j = np.triu_indices(genes.size, k=1)
    return np.column_stack([genes[i], genes[j]])
