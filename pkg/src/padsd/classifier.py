"""Pivot classifier: target-side features, a two-branch MLP, weighted CE training, ROC/AUC."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .lm import GenerationParams, SequenceModel, with_params

PIVOT = 1
NON_PIVOT = 0
PARAMS_SCHEMA = "padsd.mlp/1"


class DegenerateDatasetError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class FeatureVector:
    h: np.ndarray
    entropy: float
    p_cand: float

    @property
    def s(self) -> np.ndarray:
        return np.array([self.entropy, self.p_cand])


def entropy(dist: np.ndarray) -> float:
    p = dist[dist > 0]
    return float(max(0.0, -(p * np.log(p)).sum()))


def extract_features(
    target: SequenceModel, context: Sequence[int], candidate: int, params: GenerationParams = GenerationParams()
) -> FeatureVector:
    if not 0 <= candidate < target.vocab_size:
        raise ValueError(f"candidate {candidate} outside vocabulary")
    dist = with_params(target, params).next_distribution(context)
    return FeatureVector(np.asarray(target.hidden_features(context), dtype=np.float64), entropy(dist), float(dist[candidate]))


def position_features(target: SequenceModel):
    """Feature extractor for verification positions (distribution already adjusted)."""

    def extract(pos) -> FeatureVector:
        dist = pos.target_dist
        return FeatureVector(
            np.asarray(target.hidden_features(pos.context), dtype=np.float64), entropy(dist), float(dist[pos.candidate])
        )

    return extract


@dataclass
class MLPParams:
    W_h: np.ndarray
    b_h: np.ndarray
    W_s: np.ndarray
    b_s: np.ndarray
    W_f: np.ndarray
    b_f: np.ndarray
    W_o: np.ndarray
    b_o: np.ndarray

    NAMES = ("W_h", "b_h", "W_s", "b_s", "W_f", "b_f", "W_o", "b_o")

    @classmethod
    def init(cls, d_h: int, d_u: int = 32, d_v: int = 8, d_f: int = 32, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)

        def he(n_out, n_in):
            return rng.normal(scale=math.sqrt(2.0 / n_in), size=(n_out, n_in))

        return cls(
            he(d_u, d_h), np.zeros(d_u),
            he(d_v, 2), np.zeros(d_v),
            he(d_f, d_u + d_v), np.zeros(d_f),
            he(2, d_f) * 0.5, np.zeros(2),
        )

    @classmethod
    def zeros(cls, d_h: int, d_u: int = 32, d_v: int = 8, d_f: int = 32):
        return cls(
            np.zeros((d_u, d_h)), np.zeros(d_u), np.zeros((d_v, 2)), np.zeros(d_v),
            np.zeros((d_f, d_u + d_v)), np.zeros(d_f), np.zeros((2, d_f)), np.zeros(2),
        )

    @property
    def dims(self) -> dict:
        return {"d_h": self.W_h.shape[1], "d_u": self.W_h.shape[0], "d_v": self.W_s.shape[0], "d_f": self.W_f.shape[0]}

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in self.NAMES]

    def copy(self) -> MLPParams:
        return MLPParams(*(a.copy() for a in self.arrays()))

    def check(self):
        d = self.dims
        expected = {
            "W_s": (d["d_v"], 2), "b_h": (d["d_u"],), "b_s": (d["d_v"],),
            "W_f": (d["d_f"], d["d_u"] + d["d_v"]), "b_f": (d["d_f"],), "W_o": (2, d["d_f"]), "b_o": (2,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ConfigError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        for a in self.arrays():
            if not np.all(np.isfinite(a)):
                raise ConfigError("non-finite parameter entries")


def relu(x):
    return np.maximum(x, 0.0)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(params: MLPParams, H: np.ndarray, S: np.ndarray) -> tuple[np.ndarray, dict]:
    """Batched forward pass; returns class probabilities (n, 2) and the activation cache."""
    if H.shape[1] != params.W_h.shape[1] or S.shape[1] != 2:
        raise ConfigError(f"feature dims {H.shape[1]}+{S.shape[1]} do not match params {params.dims}")
    a_h = H @ params.W_h.T + params.b_h
    a_s = S @ params.W_s.T + params.b_s
    c = np.hstack([relu(a_h), relu(a_s)])
    a_f = c @ params.W_f.T + params.b_f
    g = relu(a_f)
    z = g @ params.W_o.T + params.b_o
    probs = _softmax(z)
    return probs, {"H": H, "S": S, "a_h": a_h, "a_s": a_s, "c": c, "a_f": a_f, "g": g, "z": z}


def mlp_forward(params: MLPParams, f: FeatureVector) -> float:
    """Pivot probability for a single feature vector."""
    probs, _ = forward(params, np.atleast_2d(f.h), f.s[None, :])
    return float(probs[0, PIVOT])


def mlp_scores(params: MLPParams, H: np.ndarray, S: np.ndarray) -> np.ndarray:
    return forward(params, H, S)[0][:, PIVOT]


class MLPScorer:
    """Classifier handle for the gate: feature vector in, pivot score out."""

    def __init__(self, params: MLPParams):
        params.check()
        self.params = params

    def __call__(self, f: FeatureVector) -> float:
        return mlp_forward(self.params, f)


def weighted_ce(params: MLPParams, H, S, y, class_weights) -> float:
    probs, _ = forward(params, H, S)
    w = np.asarray(class_weights)[y]
    p = np.clip(probs[np.arange(len(y)), y], 1e-300, None)
    return float(np.mean(w * -np.log(p)))


def loss_and_grads(params: MLPParams, H, S, y, class_weights) -> tuple[float, MLPParams]:
    """Mean of w[y_i] * CE_i over the batch, with analytic gradients."""
    n = len(y)
    probs, c = forward(params, H, S)
    w = np.asarray(class_weights, dtype=np.float64)[y]
    p = np.clip(probs[np.arange(n), y], 1e-300, None)
    loss = float(np.mean(w * -np.log(p)))

    dz = probs.copy()
    dz[np.arange(n), y] -= 1.0
    dz *= (w / n)[:, None]
    dW_o = dz.T @ c["g"]
    db_o = dz.sum(axis=0)
    da_f = (dz @ params.W_o) * (c["a_f"] > 0)
    dW_f = da_f.T @ c["c"]
    db_f = da_f.sum(axis=0)
    dc = da_f @ params.W_f
    d_u = params.W_h.shape[0]
    da_h = dc[:, :d_u] * (c["a_h"] > 0)
    da_s = dc[:, d_u:] * (c["a_s"] > 0)
    grads = MLPParams(
        da_h.T @ c["H"], da_h.sum(axis=0),
        da_s.T @ c["S"], da_s.sum(axis=0),
        dW_f, db_f, dW_o, db_o,
    )
    return loss, grads


def _relu_masks(params: MLPParams, H, S):
    _, c = forward(params, H, S)
    return [c["a_h"] > 0, c["a_s"] > 0, c["a_f"] > 0]


def grad_check(
    params: MLPParams,
    H: np.ndarray,
    S: np.ndarray,
    y: np.ndarray,
    class_weights=(1.0, 1.0),
    n_coords: int = 60,
    step: float = 1e-5,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Coordinates whose perturbation flips any rectifier mask are skipped.
    Relative error is |a - n| / max(|a|, |n|, floor).
    """
    if len(y) == 0:
        raise ValueError("empty batch")
    rng = rng or np.random.default_rng(0)
    _, grads = loss_and_grads(params, H, S, y, class_weights)
    base_masks = _relu_masks(params, H, S)
    sizes = [a.size for a in params.arrays()]
    total = sum(sizes)
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    worst = 0.0
    for flat in picks:
        which = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        offset = flat - (sum(sizes[:which]))
        name = MLPParams.NAMES[which]
        arr = getattr(params, name).reshape(-1)
        orig = arr[offset]
        arr[offset] = orig + step
        plus = weighted_ce(params, H, S, y, class_weights)
        masks_p = _relu_masks(params, H, S)
        arr[offset] = orig - step
        minus = weighted_ce(params, H, S, y, class_weights)
        masks_m = _relu_masks(params, H, S)
        arr[offset] = orig
        if any(not np.array_equal(a, b) for a, b in zip(base_masks, masks_p)) or any(
            not np.array_equal(a, b) for a, b in zip(base_masks, masks_m)
        ):
            continue
        numeric = (plus - minus) / (2 * step)
        analytic = getattr(grads, name).reshape(-1)[offset]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, rel)
    return worst


@dataclass
class TrainConfig:
    d_u: int = 32
    d_v: int = 8
    d_f: int = 32
    lr: float = 1e-2
    epochs: int = 200
    batch_size: int = 64
    split: float = 0.8
    seed: int = 0
    class_weights: tuple[float, float] | None = None  # (non-pivot, pivot); None = inverse frequency

    def __post_init__(self):
        if not 0 < self.split < 1:
            raise ValueError("split must be in (0, 1)")
        if self.class_weights is not None:
            self.class_weights = tuple(float(w) for w in self.class_weights)
            if min(self.class_weights) <= 0:
                raise ValueError("class weights must be > 0")
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("epochs, batch_size and lr must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_weights"] = None if self.class_weights is None else list(self.class_weights)
        return d


def split_indices(n: int, split: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(np.random.SeedSequence([seed, 7])).permutation(n)
    n_train = int(round(split * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def inverse_frequency_weights(y: np.ndarray) -> tuple[float, float]:
    counts = np.bincount(y, minlength=2).astype(float)
    return tuple(float(len(y) / (2.0 * c)) for c in counts)


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    class_weights: tuple[float, float] = (1.0, 1.0)
    n_train: int = 0
    n_val: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_weights"] = list(self.class_weights)
        return d


def train(H: np.ndarray, S: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> tuple[MLPParams, TrainReport]:
    """Mini-batch gradient descent on weighted CE; keeps the lowest-validation-loss epoch.

    The held-out part of the split doubles as the validation set.
    """
    y = np.asarray(y, dtype=np.int64)
    tr, va = split_indices(len(y), cfg.split, cfg.seed)
    if len(np.unique(y[tr])) < 2:
        raise DegenerateDatasetError("training split needs both classes")
    weights = cfg.class_weights or inverse_frequency_weights(y[tr])
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    params = MLPParams.init(H.shape[1], cfg.d_u, cfg.d_v, cfg.d_f, rng)
    report = TrainReport(class_weights=weights, n_train=len(tr), n_val=len(va))
    best = params.copy()
    Htr, Str, ytr = H[tr], S[tr], y[tr]
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(tr))
        for start in range(0, len(order), cfg.batch_size):
            b = order[start : start + cfg.batch_size]
            _, grads = loss_and_grads(params, Htr[b], Str[b], ytr[b], weights)
            for a, g in zip(params.arrays(), grads.arrays()):
                a -= cfg.lr * g
        report.train_loss.append(weighted_ce(params, Htr, Str, ytr, weights))
        val = weighted_ce(params, H[va], S[va], y[va], weights) if len(va) else report.train_loss[-1]
        report.val_loss.append(val)
        if val < report.best_val_loss:
            report.best_val_loss, report.best_epoch = val, epoch
            best = params.copy()
    return best, report


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> tuple[list[tuple[float, float, float]], float]:
    """ROC points (threshold, FPR, TPR), one per distinct score, and trapezoidal AUC.

    Predicts pivot when score >= threshold. The area is accumulated in integer
    counts so that tied scores contribute exactly half a pair.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int((labels == PIVOT).sum())
    n_neg = int((labels == NON_PIVOT).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateDatasetError("ROC/AUC undefined without both classes")
    order = np.argsort(-scores, kind="stable")
    s, l = scores[order], labels[order]
    points = [(math.inf, 0.0, 0.0)]
    tp = fp = 0
    twice_area = 0
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            j += 1
        dtp = int((l[i:j] == PIVOT).sum())
        dfp = (j - i) - dtp
        twice_area += dfp * (2 * tp + dtp)
        tp += dtp
        fp += dfp
        points.append((float(s[i]), fp / n_neg, tp / n_pos))
        i = j
    return points, twice_area / (2 * n_pos * n_neg)


def roc_auc(params: MLPParams, H, S, y) -> tuple[list[tuple[float, float, float]], float]:
    return roc_curve(mlp_scores(params, H, S), y)


def auc_stderr(auc: float, n_pos: int, n_neg: int) -> float:
    """Hanley-McNeil standard error of an AUC estimate."""
    q1 = auc / (2 - auc)
    q2 = 2 * auc * auc / (1 + auc)
    var = (auc * (1 - auc) + (n_pos - 1) * (q1 - auc * auc) + (n_neg - 1) * (q2 - auc * auc)) / (n_pos * n_neg)
    return math.sqrt(max(var, 0.0))


def params_to_text(params: MLPParams, header: dict) -> str:
    lines = [json.dumps({**header, "schema": PARAMS_SCHEMA, "dims": params.dims})]
    for name in MLPParams.NAMES:
        a = getattr(params, name)
        lines.append(json.dumps({"name": name, "shape": list(a.shape), "data": a.reshape(-1).tolist()}))
    return "\n".join(lines) + "\n"


def params_from_text(text: str) -> tuple[MLPParams, dict]:
    rows = [json.loads(line) for line in text.splitlines() if line.strip()]
    header = rows[0]
    if header.get("schema") != PARAMS_SCHEMA:
        raise ConfigError(f"expected schema {PARAMS_SCHEMA}, got {header.get('schema')!r}")
    arrays = {r["name"]: np.asarray(r["data"], dtype=np.float64).reshape(r["shape"]) for r in rows[1:]}
    params = MLPParams(*(arrays[n] for n in MLPParams.NAMES))
    params.check()
    return params, header
