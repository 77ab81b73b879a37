"""Sample-set evaluation: 2-Wasserstein distance and curve summaries."""

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .errors import DataFormatError, ShapeError

EXACT_LIMIT_DEFAULT = 512
SLICED_PROJECTIONS = 128


def wasserstein2(x, y, exact_limit=EXACT_LIMIT_DEFAULT):
    """W2 between two equal-size point sets.

    Up to `exact_limit` points this solves the assignment problem on the
    squared-distance cost matrix exactly (shortest-path augmentation) and
    returns sqrt(mean matched cost).  Larger sets fall back to a sliced
    estimate: W2^2 averaged over 128 fixed random 1-D projections, each
    computed by quantile (sorted-order) matching.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ShapeError("sample sets must be 2-D (n, d)")
    if x.shape != y.shape:
        raise ShapeError(f"sample sets differ: {x.shape} vs {y.shape}")
    n = x.shape[0]
    if n <= exact_limit:
        cost = cdist(x, y, "sqeuclidean")
        rows, cols = linear_sum_assignment(cost)
        return float(np.sqrt(cost[rows, cols].mean()))
    rng = np.random.default_rng(0)
    dirs = rng.standard_normal((SLICED_PROJECTIONS, x.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    xs = np.sort(x @ dirs.T, axis=0)
    ys = np.sort(y @ dirs.T, axis=0)
    return float(np.sqrt(np.mean((xs - ys) ** 2)))


def curve_summary(rows, column, window):
    """(mean, median) of the last `window` values of a metrics column.

    `rows` are parsed metrics rows (dicts); empty cells are skipped.  The
    window is clamped to the available data.
    """
    values = []
    for row in rows:
        v = row.get(column)
        if v is None or v == "":
            continue
        values.append(float(v))
    if not values:
        raise DataFormatError(f"column {column!r} has no values")
    window = max(1, min(int(window), len(values)))
    tail = np.asarray(values[-window:])
    return float(tail.mean()), float(np.median(tail))
