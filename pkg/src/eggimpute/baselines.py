"""Mean / most-frequent and KNN imputers used as comparison points."""

from __future__ import annotations

import warnings

import numpy as np

from .dataio import ColumnStats, compute_stats


def mean_impute(ds, mask, stats: ColumnStats = None):
    """Missing numerics get the column mean, categoricals the modal class.

    Statistics default to the observed cells of ``ds`` itself; pass
    training-split stats to avoid leakage.
    """
    if stats is None:
        stats = compute_stats(ds, mask)
    imputed = ds.values.copy()
    for j, col in enumerate(ds.schema):
        missing = mask[:, j] == 0
        if not missing.any():
            continue
        if col.kind == "numerical":
            imputed[missing, j] = stats.means.get(j, 0.0)
        else:
            imputed[missing, j] = stats.modes.get(j, 0)
    return imputed


def _row_distances(values, mask, target_row, d):
    """Overlap-normalized squared Euclidean distances to every other row."""
    overlap = mask & mask[target_row]
    diff = np.where(overlap, values - values[target_row], 0.0)
    sq = (diff ** 2).sum(axis=1)
    counts = overlap.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        dist = np.where(counts > 0, sq * d / np.maximum(counts, 1), np.inf)
    dist[counts == 0] = np.inf
    return dist


def knn_impute(ds, mask, k_nn=5, stats: ColumnStats = None):
    """Donor-based imputation.

    Distances use coordinates observed in both rows, scaled by d/overlap;
    ties break by row index.  Numeric cells take the donor mean,
    categorical cells the donor majority (ties to the smallest class).
    Columns with no observing donor fall back to the column mean/mode.
    """
    if k_nn < 1:
        raise ValueError("k_nn must be >= 1")
    if stats is None:
        stats = compute_stats(ds, mask)
    values = np.nan_to_num(ds.values)
    obs = (mask == 1) & np.isfinite(ds.values)
    n, d = values.shape
    imputed = ds.values.copy()
    for i in range(n):
        missing_cols = np.flatnonzero(~obs[i])
        if missing_cols.size == 0:
            continue
        dist = _row_distances(values * obs, obs, i, d)
        dist[i] = np.inf
        order = np.lexsort((np.arange(n), dist))  # stable: distance, then row index
        donors = order[np.isfinite(dist[order])][:k_nn]
        for j in missing_cols:
            col = ds.schema[j]
            giving = donors[obs[donors, j]]
            if giving.size == 0:
                if col.kind == "numerical":
                    imputed[i, j] = stats.means.get(j, 0.0)
                else:
                    imputed[i, j] = stats.modes.get(j, 0)
                continue
            if col.kind == "numerical":
                imputed[i, j] = values[giving, j].mean()
            else:
                votes = np.bincount(values[giving, j].astype(np.int64),
                                    minlength=col.cardinality)
                imputed[i, j] = int(votes.argmax())  # argmax ties -> smallest class
    if not np.isfinite(imputed).all():
        warnings.warn("some cells could not be imputed; leaving NaN")
    return imputed
