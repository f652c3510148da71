"""Meta-classifiers that map feature vectors to hallucination scores.

Two trainers are provided. train_logistic fits an L2-regularized logistic
regression by full-batch gradient descent with Armijo backtracking, so the
training loss is non-increasing iteration over iteration and the whole
procedure is deterministic. train_boosted_trees fits a stagewise ensemble
of depth-limited regression trees on the logistic-loss gradients with
Newton leaf values, starting from the prevalence log-odds.

predict_score returns sigmoid scores clamped to [EPS_SCORE, 1 - EPS_SCORE];
classify thresholds them at tau.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensorfile
from .errors import CheckpointError, DataError
from .features import (FeatureExtractionConfig, FeatureSchema,
                       StandardizationStats, schema_from_dict)
from .numerics import EPS_SCORE, sigmoid

DETECTOR_MAGIC = "ECDKIT-DET-1"


def _check_training_inputs(x, labels):
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise DataError("need a 2-D feature matrix and matching 1-D labels")
    if not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be 0 or 1")
    if labels.sum() == 0 or labels.sum() == labels.shape[0]:
        raise DataError("training needs at least one example of each class")
    if not np.isfinite(x).all():
        raise DataError("feature matrix contains non-finite values")
    return x, labels.astype(np.float64)


# ---------------------------------------------------------------- logistic


@dataclass(frozen=True)
class LogisticConfig:
    l2: float = 1e-3
    max_iter: int = 1000
    tol: float = 1e-6
    seed: int = 0  # kept for interface symmetry; the fit itself is deterministic

    def to_dict(self) -> dict:
        return {"l2": self.l2, "max_iter": self.max_iter, "tol": self.tol, "seed": self.seed}


@dataclass
class LogisticModel:
    weights: np.ndarray
    bias: float
    config: LogisticConfig
    n_iter: int = 0
    final_loss: float = 0.0
    loss_history: list[float] = field(default_factory=list)


def _logistic_loss_grad(w, b, x, z, l2):
    margin = x @ w + b
    # mean softplus(+/- margin) written stably
    loss = float(np.mean(np.logaddexp(0.0, np.where(z == 1.0, -margin, margin))))
    loss += 0.5 * l2 * float(w @ w)
    err = sigmoid(margin) - z
    gw = x.T @ err / x.shape[0] + l2 * w
    gb = float(np.mean(err))
    return loss, gw, gb


def train_logistic(x, labels, config: LogisticConfig = LogisticConfig()) -> LogisticModel:
    x, z = _check_training_inputs(x, labels)
    w = np.zeros(x.shape[1])
    b = 0.0
    loss, gw, gb = _logistic_loss_grad(w, b, x, z, config.l2)
    history = [loss]
    step = 1.0
    iters_done = 0
    for _ in range(config.max_iter):
        grad_sq = float(gw @ gw) + gb * gb
        if np.sqrt(grad_sq) <= config.tol:
            break
        step = min(step * 2.0, 1e3)
        accepted = False
        while step >= 1e-12:
            w_new = w - step * gw
            b_new = b - step * gb
            loss_new, gw_new, gb_new = _logistic_loss_grad(w_new, b_new, x, z, config.l2)
            # Armijo condition keeps the recorded loss trace non-increasing.
            if loss_new <= loss - 1e-4 * step * grad_sq:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        w, b, loss, gw, gb = w_new, b_new, loss_new, gw_new, gb_new
        iters_done += 1
        history.append(loss)
    return LogisticModel(weights=w, bias=b, config=config, n_iter=iters_done,
                         final_loss=loss, loss_history=history)


# ----------------------------------------------------------- boosted trees


@dataclass(frozen=True)
class BoostedTreesConfig:
    n_trees: int = 200
    max_depth: int = 3
    learning_rate: float = 0.1
    min_samples_leaf: int = 1
    seed: int = 0  # no subsampling, so the fit is deterministic regardless

    def to_dict(self) -> dict:
        return {
            "n_trees": self.n_trees, "max_depth": self.max_depth,
            "learning_rate": self.learning_rate,
            "min_samples_leaf": self.min_samples_leaf, "seed": self.seed,
        }


@dataclass
class RegressionTree:
    """Flat node arrays; leaves have feature == -1 and carry the additive value."""

    feature: np.ndarray    # (n_nodes,) int32
    threshold: np.ndarray  # (n_nodes,) float64
    left: np.ndarray       # (n_nodes,) int32
    right: np.ndarray      # (n_nodes,) int32
    value: np.ndarray      # (n_nodes,) float64

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        idx = np.zeros(x.shape[0], dtype=np.int64)
        while True:
            feat = self.feature[idx]
            active = feat >= 0
            if not active.any():
                break
            rows = np.nonzero(active)[0]
            go_left = x[rows, feat[rows]] <= self.threshold[idx[rows]]
            idx[rows] = np.where(go_left, self.left[idx[rows]], self.right[idx[rows]])
        return self.value[idx]


@dataclass
class BoostedTreesModel:
    init_log_odds: float
    trees: list[RegressionTree]
    config: BoostedTreesConfig
    final_loss: float = 0.0

    def raw_score(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.full(x.shape[0], self.init_log_odds)
        for tree in self.trees:
            out += tree.predict(x)
        return out


class _TreeBuilder:
    def __init__(self, x, grad, hess, config):
        self.x = x
        self.grad = grad
        self.hess = hess
        self.config = config
        self.feature = []
        self.threshold = []
        self.left = []
        self.right = []
        self.value = []

    def _leaf_value(self, idx):
        g = float(self.grad[idx].sum())
        h = float(self.hess[idx].sum())
        return self.config.learning_rate * g / max(h, 1e-12)

    def _best_split(self, idx):
        best = None
        n = idx.shape[0]
        min_leaf = self.config.min_samples_leaf
        if n < 2 * min_leaf:
            return None
        total = float(self.grad[idx].sum())
        for f in range(self.x.shape[1]):
            vals = self.x[idx, f]
            order = np.argsort(vals, kind="stable")
            v = vals[order]
            g = self.grad[idx][order]
            csum = np.cumsum(g)
            boundaries = np.nonzero(np.diff(v) != 0)[0]
            for cut in boundaries:
                n_l = cut + 1
                n_r = n - n_l
                if n_l < min_leaf or n_r < min_leaf:
                    continue
                s_l = csum[cut]
                s_r = total - s_l
                gain = s_l * s_l / n_l + s_r * s_r / n_r - total * total / n
                # deterministic tie-break: first feature, lowest threshold
                if gain > 1e-12 and (best is None or gain > best[0] + 1e-15):
                    thr = 0.5 * (v[cut] + v[cut + 1])
                    best = (gain, f, thr)
        return best

    def build(self, idx, depth) -> int:
        node = len(self.feature)
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        split = self._best_split(idx) if depth < self.config.max_depth else None
        if split is None:
            self.value[node] = self._leaf_value(idx)
            return node
        _, f, thr = split
        mask = self.x[idx, f] <= thr
        self.feature[node] = f
        self.threshold[node] = thr
        self.left[node] = self.build(idx[mask], depth + 1)
        self.right[node] = self.build(idx[~mask], depth + 1)
        return node

    def tree(self) -> RegressionTree:
        return RegressionTree(
            feature=np.asarray(self.feature, dtype=np.int32),
            threshold=np.asarray(self.threshold, dtype=np.float64),
            left=np.asarray(self.left, dtype=np.int32),
            right=np.asarray(self.right, dtype=np.int32),
            value=np.asarray(self.value, dtype=np.float64),
        )


def train_boosted_trees(
    x, labels, config: BoostedTreesConfig = BoostedTreesConfig()
) -> BoostedTreesModel:
    x, z = _check_training_inputs(x, labels)
    prevalence = float(np.clip(z.mean(), EPS_SCORE, 1.0 - EPS_SCORE))
    init = float(np.log(prevalence / (1.0 - prevalence)))
    f_raw = np.full(x.shape[0], init)
    trees = []
    all_idx = np.arange(x.shape[0])
    for _ in range(config.n_trees):
        p = sigmoid(f_raw)
        grad = z - p                 # negative gradient of the logistic loss
        hess = np.maximum(p * (1.0 - p), 1e-12)
        builder = _TreeBuilder(x, grad, hess, config)
        builder.build(all_idx, 0)
        tree = builder.tree()
        trees.append(tree)
        f_raw = f_raw + tree.predict(x)
    p = np.clip(sigmoid(f_raw), EPS_SCORE, 1.0 - EPS_SCORE)
    final_loss = float(-np.mean(z * np.log(p) + (1.0 - z) * np.log(1.0 - p)))
    return BoostedTreesModel(init_log_odds=init, trees=trees, config=config,
                             final_loss=final_loss)


# ------------------------------------------------------------- prediction


def predict_score(model, x: np.ndarray) -> np.ndarray:
    """Hallucination probability p_f in [EPS_SCORE, 1 - EPS_SCORE] per row."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if isinstance(model, LogisticModel):
        raw = x2 @ model.weights + model.bias
    elif isinstance(model, BoostedTreesModel):
        raw = model.raw_score(x2)
    else:
        raise DataError(f"unknown model type {type(model).__name__}")
    p = np.clip(sigmoid(raw), EPS_SCORE, 1.0 - EPS_SCORE)
    return float(p[0]) if single else p


def classify(model, x: np.ndarray, tau: float = 0.5):
    p = predict_score(model, x)
    if np.isscalar(p):
        return int(p >= tau)
    return (p >= tau).astype(np.int64)


# ------------------------------------------------------------- the bundle


@dataclass
class DetectorBundle:
    """Everything generation needs to score candidates: schema, extraction
    settings, standardization statistics, and the fitted classifier."""

    schema: FeatureSchema
    extraction: FeatureExtractionConfig
    standardizer: StandardizationStats
    model: LogisticModel | BoostedTreesModel
    training_meta: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return "logistic" if isinstance(self.model, LogisticModel) else "boosted_trees"

    def score(self, raw_features: np.ndarray) -> np.ndarray:
        z = self.standardizer.apply(raw_features)
        return predict_score(self.model, z)


def save_detector(bundle: DetectorBundle, path) -> None:
    meta = {
        "type": bundle.kind,
        "schema": bundle.schema.to_dict(),
        "schema_hash": bundle.schema.sha256(),
        "extraction": bundle.extraction.to_dict(),
        "training": bundle.training_meta,
    }
    tensors = [
        ("standardizer.mean", bundle.standardizer.mean.astype(np.float64)),
        ("standardizer.std", bundle.standardizer.std.astype(np.float64)),
        ("standardizer.degenerate", bundle.standardizer.degenerate.astype(np.int32)),
    ]
    m = bundle.model
    if isinstance(m, LogisticModel):
        meta["hyperparams"] = m.config.to_dict()
        meta["fit"] = {"n_iter": m.n_iter, "final_loss": m.final_loss}
        tensors += [
            ("logistic.weights", m.weights.astype(np.float64)),
            ("logistic.bias", np.array([m.bias], dtype=np.float64)),
        ]
    else:
        meta["hyperparams"] = m.config.to_dict()
        meta["fit"] = {"n_trees": len(m.trees), "final_loss": m.final_loss}
        offsets = np.zeros(len(m.trees) + 1, dtype=np.int32)
        for i, t in enumerate(m.trees):
            offsets[i + 1] = offsets[i] + t.feature.shape[0]
        def cat(attr, dtype):
            if not m.trees:
                return np.zeros(0, dtype=dtype)
            return np.concatenate([getattr(t, attr) for t in m.trees]).astype(dtype)
        tensors += [
            ("trees.init_log_odds", np.array([m.init_log_odds], dtype=np.float64)),
            ("trees.node_offsets", offsets),
            ("trees.feature", cat("feature", np.int32)),
            ("trees.threshold", cat("threshold", np.float64)),
            ("trees.left", cat("left", np.int32)),
            ("trees.right", cat("right", np.int32)),
            ("trees.value", cat("value", np.float64)),
        ]
    tensorfile.write(path, DETECTOR_MAGIC, meta, tensors)


def load_detector(path) -> DetectorBundle:
    meta, tensors = tensorfile.read(path, DETECTOR_MAGIC)
    schema = schema_from_dict(meta["schema"])
    if meta.get("schema_hash") != schema.sha256():
        raise CheckpointError("detector schema hash does not match its schema block")
    ext = meta.get("extraction", {})
    extraction = FeatureExtractionConfig(
        length_penalty=float(ext.get("length_penalty", 1.0)),
        kl_full=bool(ext.get("kl_full", False)),
    )
    stats = StandardizationStats(
        mean=tensors["standardizer.mean"],
        std=tensors["standardizer.std"],
        degenerate=tensors["standardizer.degenerate"].astype(bool),
    )
    if stats.mean.shape != (schema.dim,):
        raise CheckpointError(
            f"standardizer has {stats.mean.shape[0]} dims, schema has {schema.dim}"
        )
    hp = meta.get("hyperparams", {})
    if meta.get("type") == "logistic":
        model = LogisticModel(
            weights=tensors["logistic.weights"],
            bias=float(tensors["logistic.bias"][0]),
            config=LogisticConfig(
                l2=float(hp.get("l2", 1e-3)), max_iter=int(hp.get("max_iter", 1000)),
                tol=float(hp.get("tol", 1e-6)), seed=int(hp.get("seed", 0))),
            n_iter=int(meta.get("fit", {}).get("n_iter", 0)),
            final_loss=float(meta.get("fit", {}).get("final_loss", 0.0)),
        )
        if model.weights.shape != (schema.dim,):
            raise CheckpointError(
                f"logistic weights have {model.weights.shape[0]} dims, schema has {schema.dim}"
            )
    elif meta.get("type") == "boosted_trees":
        offsets = tensors["trees.node_offsets"]
        trees = []
        for i in range(offsets.shape[0] - 1):
            sl = slice(int(offsets[i]), int(offsets[i + 1]))
            trees.append(RegressionTree(
                feature=tensors["trees.feature"][sl],
                threshold=tensors["trees.threshold"][sl],
                left=tensors["trees.left"][sl],
                right=tensors["trees.right"][sl],
                value=tensors["trees.value"][sl],
            ))
        model = BoostedTreesModel(
            init_log_odds=float(tensors["trees.init_log_odds"][0]),
            trees=trees,
            config=BoostedTreesConfig(
                n_trees=int(hp.get("n_trees", len(trees))),
                max_depth=int(hp.get("max_depth", 3)),
                learning_rate=float(hp.get("learning_rate", 0.1)),
                min_samples_leaf=int(hp.get("min_samples_leaf", 1)),
                seed=int(hp.get("seed", 0))),
            final_loss=float(meta.get("fit", {}).get("final_loss", 0.0)),
        )
    else:
        raise CheckpointError(f"unknown detector type {meta.get('type')!r}")
    return DetectorBundle(
        schema=schema,
        extraction=extraction,
        standardizer=stats,
        model=model,
        training_meta=meta.get("training", {}),
    )
