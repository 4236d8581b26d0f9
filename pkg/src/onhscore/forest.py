"""Random forest of CART trees for the three-way ONH classification.

Written from scratch for the two-feature problem (drusen score, swelling
score). Trees use Gini impurity and midpoint thresholds; leaves store class
proportions and the forest averages them.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from onhscore.metrics import CLASSES, Diagnosis, EyeFeatures
from onhscore.rng import RNG_ID, derive_rng

N_FEATURES = 2
N_OUT = len(CLASSES)
MODEL_MAGIC = "rfmodel"
MODEL_VERSION = "v1"


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    mtry: int = 1
    max_depth: Optional[int] = None
    min_leaf: int = 1
    bootstrap: bool = True
    seed: int = 0
    class_weight: Optional[str] = None

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if not 1 <= self.mtry <= N_FEATURES:
            raise ValueError(f"mtry must be in 1..{N_FEATURES}")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.class_weight not in (None, "balanced"):
            raise ValueError(f"class_weight must be None or 'balanced', got {self.class_weight!r}")


@dataclass
class Tree:
    """Flat node table. ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.intp)
        rows = np.arange(len(X))
        active = self.feature[node] >= 0
        while active.any():
            r = rows[active]
            nd = node[r]
            go_left = X[r, self.feature[nd]] <= self.threshold[nd]
            node[r] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return node


@dataclass
class ForestModel:
    params: ForestParams
    trees: list
    classes: tuple = CLASSES
    rng_id: str = RNG_ID
    oob_accuracy: Optional[float] = field(default=None, compare=False)


def _gini_best_split(xs, onehot, g_parent, W, min_leaf):
    """Best threshold on one feature. Returns (decrease, threshold) or None.

    Uses decrease = g_parent - 1 + (sum_c l_c^2 / w_l + sum_c r_c^2 / w_r) / W.
    """
    order = np.argsort(xs, kind="stable")
    sv = xs[order]
    n = len(sv)
    cum = np.cumsum(onehot[order], axis=0)
    cl = cum[:-1]
    cr = cum[-1] - cl
    wl = cl.sum(axis=1)
    wr = W - wl
    with np.errstate(divide="ignore", invalid="ignore"):
        score = np.einsum("ij,ij->i", cl, cl) / wl + np.einsum("ij,ij->i", cr, cr) / wr
    valid = sv[:-1] < sv[1:]
    if min_leaf > 1:
        valid[: min_leaf - 1] = False
        valid[n - min_leaf:] = False
    if not valid.any():
        return None
    score[~valid] = -np.inf
    pos = int(np.argmax(score))  # first max -> lowest threshold
    lo, hi = sv[pos], sv[pos + 1]
    thr = lo + (hi - lo) / 2.0
    if not thr < hi:
        thr = lo
    return float(g_parent - 1.0 + score[pos] / W), float(thr)


def _grow_tree(X, onehot, params: ForestParams, rng: np.random.Generator) -> Tree:
    feature, threshold, left, right, value = [], [], [], [], []

    def build(Xn, On, depth):
        nid = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts = On.sum(axis=0)
        W = counts.sum()
        value.append(counts / W)
        if (np.count_nonzero(counts) <= 1
                or (params.max_depth is not None and depth >= params.max_depth)
                or len(Xn) < 2 * params.min_leaf):
            return nid
        g_parent = 1.0 - float(counts @ counts) / (W * W)
        perm = rng.permutation(N_FEATURES)
        best = None
        for rank, f in enumerate(perm):
            if rank >= params.mtry and best is not None:
                break
            found = _gini_best_split(Xn[:, f], On, g_parent, W, params.min_leaf)
            if found is None:
                continue
            dec, thr = found
            if best is None or dec > best[0] or (dec == best[0] and (f, thr) < (best[1], best[2])):
                best = (dec, int(f), thr)
        if best is None:
            return nid
        _, f, thr = best
        mask = Xn[:, f] <= thr
        feature[nid] = f
        threshold[nid] = thr
        left[nid] = build(Xn[mask], On[mask], depth + 1)
        right[nid] = build(Xn[~mask], On[~mask], depth + 1)
        return nid

    build(X, onehot, 0)
    return Tree(
        feature=np.array(feature, dtype=np.intp),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.intp),
        right=np.array(right, dtype=np.intp),
        value=np.array(value, dtype=np.float64),
    )


def _as_xy(features: Sequence[EyeFeatures]):
    X = np.array([f.vector for f in features], dtype=np.float64).reshape(-1, N_FEATURES)
    if any(f.true_class is None for f in features):
        raise ValueError("every training sample needs a true_class")
    y = np.array([f.true_class.index for f in features], dtype=np.intp)
    return X, y


def train_forest(features: Sequence[EyeFeatures], params: ForestParams = ForestParams()) -> ForestModel:
    """Grow ``params.n_trees`` trees, each from its own (seed, tree index) stream."""
    if len(features) == 0:
        raise ValueError("cannot train on an empty feature set")
    X, y = _as_xy(features)
    if not np.all(np.isfinite(X)):
        raise ValueError("training features must be finite")
    n = len(y)
    class_counts = np.bincount(y, minlength=N_OUT)
    if np.count_nonzero(class_counts) < 2:
        warnings.warn("training set has a single class; the model will predict it for every input", stacklevel=2)

    weights = np.ones(N_OUT)
    if params.class_weight == "balanced":
        present = class_counts > 0
        weights[present] = n / (np.count_nonzero(present) * class_counts[present])
    onehot = np.zeros((n, N_OUT))
    onehot[np.arange(n), y] = weights[y]

    trees = []
    oob_votes = np.zeros((n, N_OUT))
    for t in range(params.n_trees):
        rng = derive_rng(params.seed, "forest.tree", t)
        if params.bootstrap:
            sample = rng.integers(0, n, size=n)
        else:
            sample = np.arange(n)
        tree = _grow_tree(X[sample], onehot[sample], params, rng)
        trees.append(tree)
        if params.bootstrap:
            oob = np.ones(n, dtype=bool)
            oob[sample] = False
            if oob.any():
                oob_votes[oob] += tree.value[tree.apply(X[oob])]

    model = ForestModel(params=params, trees=trees)
    if params.bootstrap:
        seen = oob_votes.sum(axis=1) > 0
        if seen.any():
            model.oob_accuracy = float(np.mean(np.argmax(oob_votes[seen], axis=1) == y[seen]))
    return model


def predict_proba(model: ForestModel, X) -> np.ndarray:
    """Class-probability triple(s) in the order ODD, papilledema, healthy.

    ``X`` may be a single (drusen, swelling) pair or an (n, 2) array; the
    output is (3,) or (n, 3) accordingly.
    """
    arr = np.asarray(X, dtype=np.float64)
    single = arr.ndim == 1
    arr = arr.reshape(-1, N_FEATURES)
    if not np.all(np.isfinite(arr)):
        raise ValueError("features must be finite")
    acc = np.zeros((len(arr), N_OUT))
    for tree in model.trees:
        acc += tree.value[tree.apply(arr)]
    proba = acc / len(model.trees)
    return proba[0] if single else proba


def predict_class(model: ForestModel, X):
    """Most probable class; ties go to the earlier class (ODD, papilledema, healthy)."""
    proba = predict_proba(model, X)
    if proba.ndim == 1:
        return model.classes[int(np.argmax(proba))]
    return [model.classes[int(k)] for k in np.argmax(proba, axis=1)]


# --- text serialization -------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def dumps_model(model: ForestModel) -> str:
    p = model.params
    head = (f"{MODEL_MAGIC} {MODEL_VERSION} trees={len(model.trees)} mtry={p.mtry} seed={p.seed} rng={model.rng_id}"
            f" max_depth={'none' if p.max_depth is None else p.max_depth} min_leaf={p.min_leaf}"
            f" bootstrap={int(p.bootstrap)} class_weight={p.class_weight or 'none'}")
    lines = [head]
    for t, tree in enumerate(model.trees):
        for nid in range(tree.n_nodes):
            if tree.feature[nid] < 0:
                probs = ";".join(_fmt(v) for v in tree.value[nid])
                lines.append(f"t={t} n={nid} leaf={probs}")
            else:
                lines.append(f"t={t} n={nid} f={tree.feature[nid]} thr={_fmt(tree.threshold[nid])}"
                             f" l={tree.left[nid]} r={tree.right[nid]}")
    return "\n".join(lines) + "\n"


def save_model(model: ForestModel, path) -> None:
    Path(path).write_text(dumps_model(model), encoding="utf-8")


def _kv(tokens, where):
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise ModelFormatError(f"{where}: malformed token {tok!r}")
        k, v = tok.split("=", 1)
        out[k] = v
    return out


def _check_tree(t, nodes, where):
    n = len(nodes)
    if n == 0:
        raise ModelFormatError(f"{where}: tree {t} has no nodes")
    seen = set()
    stack = [0]
    while stack:
        nid = stack.pop()
        if nid in seen:
            raise ModelFormatError(f"{where}: tree {t} has a cycle or shared node at {nid}")
        seen.add(nid)
        node = nodes[nid]
        if node[0] >= 0:
            for child in (node[2], node[3]):
                if not 0 <= child < n:
                    raise ModelFormatError(f"{where}: tree {t} node {nid} references missing child {child}")
                stack.append(child)


def loads_model(text: str, source: str = "<model>") -> ForestModel:
    lines = text.splitlines()
    if not lines:
        raise ModelFormatError(f"{source}:1: empty model file")
    head = lines[0].split()
    if len(head) < 2 or head[0] != MODEL_MAGIC:
        raise ModelFormatError(f"{source}:1: not an rfmodel file")
    if head[1] != MODEL_VERSION:
        raise ModelFormatError(f"{source}:1: unsupported model version {head[1]!r}")
    meta = _kv(head[2:], f"{source}:1")
    try:
        n_trees = int(meta["trees"])
        mtry = int(meta["mtry"])
        seed = int(meta["seed"])
        rng_id = meta["rng"]
        max_depth = None if meta.get("max_depth", "none") == "none" else int(meta["max_depth"])
        params = ForestParams(
            n_trees=n_trees, mtry=mtry, seed=seed, max_depth=max_depth,
            min_leaf=int(meta.get("min_leaf", 1)),
            bootstrap=bool(int(meta.get("bootstrap", 1))),
            class_weight=None if meta.get("class_weight", "none") == "none" else meta["class_weight"],
        )
    except (KeyError, ValueError) as exc:
        raise ModelFormatError(f"{source}:1: bad header: {exc}") from exc

    per_tree: list[list] = [[] for _ in range(n_trees)]
    for lineno, line in enumerate(lines[1:], 2):
        where = f"{source}:{lineno}"
        if not line.strip():
            continue
        kv = _kv(line.split(), where)
        try:
            t, nid = int(kv["t"]), int(kv["n"])
        except (KeyError, ValueError):
            raise ModelFormatError(f"{where}: node line needs integer t= and n=") from None
        if not 0 <= t < n_trees:
            raise ModelFormatError(f"{where}: tree index {t} out of range")
        if nid != len(per_tree[t]):
            raise ModelFormatError(f"{where}: expected node {len(per_tree[t])} of tree {t}, got {nid}")
        try:
            if "leaf" in kv:
                probs = [float(v) for v in kv["leaf"].split(";")]
                if len(probs) != N_OUT or any(not math.isfinite(p) or p < 0 for p in probs):
                    raise ValueError("leaf needs three finite non-negative probabilities")
                if abs(math.fsum(probs) - 1.0) > 1e-12:
                    raise ValueError("leaf probabilities must sum to 1")
                per_tree[t].append((-1, 0.0, -1, -1, probs))
            else:
                f = int(kv["f"])
                if not 0 <= f < N_FEATURES:
                    raise ValueError(f"feature index {f} out of range")
                thr = float(kv["thr"])
                if not math.isfinite(thr):
                    raise ValueError("threshold must be finite")
                per_tree[t].append((f, thr, int(kv["l"]), int(kv["r"]), [0.0] * N_OUT))
        except KeyError as exc:
            raise ModelFormatError(f"{where}: missing field {exc}") from None
        except ValueError as exc:
            raise ModelFormatError(f"{where}: {exc}") from None

    last = f"{source}:{len(lines)}"
    trees = []
    for t, nodes in enumerate(per_tree):
        _check_tree(t, nodes, last)
        trees.append(Tree(
            feature=np.array([nd[0] for nd in nodes], dtype=np.intp),
            threshold=np.array([nd[1] for nd in nodes], dtype=np.float64),
            left=np.array([nd[2] for nd in nodes], dtype=np.intp),
            right=np.array([nd[3] for nd in nodes], dtype=np.intp),
            value=np.array([nd[4] for nd in nodes], dtype=np.float64),
        ))
    return ForestModel(params=params, trees=trees, rng_id=rng_id)


def load_model(path) -> ForestModel:
    path = Path(path)
    return loads_model(path.read_text(encoding="utf-8"), str(path))


def with_seed(params: ForestParams, seed: int) -> ForestParams:
    return replace(params, seed=seed)
