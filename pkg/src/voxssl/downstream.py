"""Transfer evaluation: classification and segmentation probes.

Probes sit on top of a (pretrained or randomly initialised) encoder.
Classification trains a linear head on the aggregated summary feature;
segmentation trains a per-token linear head whose logits are trilinearly
upsampled to voxels, with Dice + cross-entropy loss (background excluded
from the Dice term and from evaluation) and sliding-window inference.
Both run stratified k-fold cross-validation with deterministic seeding;
folds are independent and metric functions are pure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .metrics import auroc, dice, hd95, threshold_metrics
from .train import optimizer_init, optimizer_step
from .vit3d import (ModelConfig, ModelParams, _interp_matrix, encode,
                    patchify_embed, summarise, summary_feature, view_grid)


@dataclass(frozen=True)
class ProbeConfig:
    freeze: str = "frozen"              # "frozen" | "full"
    epochs: int = 20                    # desk default; 50 at paper scale
    seg_epochs: int = 50                # desk default; 500 at paper scale
    lr: float = 1e-4
    weight_decay: float = 0.0
    class_weights: bool = False
    folds: int = 5
    fractions: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8, 1.0)
    youden: bool = False
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.freeze not in ("frozen", "full"):
            raise ValueError(f"freeze policy must be 'frozen' or 'full', got {self.freeze!r}")
        if self.folds < 2:
            raise ValueError(f"need at least 2 folds, got {self.folds}")
        if any(not 0 < f <= 1 for f in self.fractions):
            raise ValueError(f"fractions must lie in (0,1], got {self.fractions}")


@dataclass
class MetricReport:
    task: str
    fold_rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def aggregate(self) -> None:
        keys = [k for k in self.fold_rows[0] if k != "fold"]
        self.summary = {}
        for k in keys:
            vals = np.array([row[k] for row in self.fold_rows], dtype=float)
            ok = vals[~np.isnan(vals)]
            self.summary[k] = {"mean": float(ok.mean()) if len(ok) else float("nan"),
                               "sd": float(ok.std(ddof=1)) if len(ok) > 1 else 0.0,
                               "n_flagged": int(np.isnan(vals).sum())}

    def to_text(self) -> str:
        keys = [k for k in self.fold_rows[0] if k != "fold"]
        header = "fold  " + "  ".join(f"{k:>12}" for k in keys)
        lines = [f"task: {self.task}", header, "-" * len(header)]
        for row in self.fold_rows:
            lines.append(f"{row['fold']:>4}  "
                         + "  ".join(f"{row[k]:>12.4f}" for k in keys))
        lines.append("-" * len(header))
        lines.append("mean  " + "  ".join(f"{self.summary[k]['mean']:>12.4f}" for k in keys))
        lines.append("  sd  " + "  ".join(f"{self.summary[k]['sd']:>12.4f}" for k in keys))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"task": self.task, "folds": self.fold_rows,
                           "summary": self.summary}, indent=2)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def kfold_split(labels, k: int, seed: int = 0) -> list[np.ndarray]:
    """Stratified k folds; a partition of [0,n) with sizes differing by <= 1."""
    labels = np.asarray(labels)
    n = len(labels)
    if k > n:
        raise ValueError(f"k={k} exceeds dataset size {n}")
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    cursor = 0
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < k:
            raise ValueError(f"class {cls} has {len(idx)} members, fewer than k={k}")
        for i in rng.permutation(idx):
            folds[cursor % k].append(int(i))
            cursor += 1
    return [np.sort(np.array(f, dtype=int)) for f in folds]


def subsample(indices, labels, fraction: float, seed: int = 0) -> np.ndarray:
    """Stratified subset keeping ceil(fraction * m_c) indices per class."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0,1], got {fraction}")
    indices = np.asarray(indices)
    labels = np.asarray(labels)
    if fraction == 1.0:
        return indices.copy()
    rng = np.random.default_rng(seed)
    kept = []
    for cls in np.unique(labels):
        pool = indices[labels == cls]
        m = int(np.ceil(fraction * len(pool)))
        kept.append(rng.choice(pool, size=m, replace=False))
    return np.sort(np.concatenate(kept))


# ---------------------------------------------------------------------------
# Features and heads
# ---------------------------------------------------------------------------


def summary_features(volumes, params: ModelParams) -> np.ndarray:
    """(n, D) aggregated summary vectors; no gradients recorded."""
    frozen = params if not any(p.requires_grad for p in params.values()) \
        else params.copy(requires_grad=False)
    feats = []
    for v in volumes:
        tokens = encode(patchify_embed(np.asarray(v), frozen), frozen)
        feats.append(summary_feature(tokens, frozen).data.astype(np.float64))
    return np.stack(feats)


def token_features(volumes, params: ModelParams) -> np.ndarray:
    """(n, N, D) encoder patch tokens; no gradients recorded."""
    frozen = params if not any(p.requires_grad for p in params.values()) \
        else params.copy(requires_grad=False)
    feats = []
    for v in volumes:
        tokens = encode(patchify_embed(np.asarray(v), frozen), frozen)
        feats.append(tokens.data.astype(np.float64))
    return np.stack(feats)


def _one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _class_weights(labels: np.ndarray, enabled: bool) -> np.ndarray:
    """Per-class n/(2*n_c) weights, or ones."""
    if not enabled:
        return np.ones(2)
    n = len(labels)
    return np.array([n / (2.0 * max(1, (labels == c).sum())) for c in (0, 1)])


def train_linear_head(feats: np.ndarray, labels: np.ndarray, cfg: ProbeConfig,
                      seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample AdamW steps on a linear D->2 head; returns (W, b)."""
    rng = np.random.default_rng(seed)
    d = feats.shape[1]
    head = ModelParams(None, {
        "w": Tensor(rng.normal(0, 0.01, size=(d, 2)), requires_grad=True, name="w"),
        "b": Tensor(np.zeros(2), requires_grad=True, name="b"),
    })
    state = optimizer_init(head)
    weights = _class_weights(labels, cfg.class_weights)
    onehot = _one_hot(labels, 2)
    for _ in range(cfg.epochs):
        for i in rng.permutation(len(feats)):
            x = Tensor(feats[i:i + 1])
            logits = ad.add(ad.matmul(x, head["w"]), head["b"])
            loss = ad.mul(ad.cross_entropy(Tensor(onehot[i:i + 1]), logits),
                          float(weights[labels[i]]))
            loss.backward()
            optimizer_step(head, state, lr=cfg.lr, weight_decay=cfg.weight_decay)
            ad.zero_grads(head.values())
    return head["w"].data.copy(), head["b"].data.copy()


def _head_scores(feats: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    logits = feats @ w + b
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True))[:, 1]


def _train_full_classifier(volumes, labels, base: ModelParams, cfg: ProbeConfig,
                           seed: int):
    """Unfrozen variant: fine-tune encoder and head jointly, one volume a step."""
    rng = np.random.default_rng(seed)
    params = base.copy(requires_grad=True)
    d = params.cfg.embed_dim
    tensors = dict(params.tensors)
    tensors["probe.w"] = Tensor(rng.normal(0, 0.01, size=(d, 2)), requires_grad=True,
                                name="probe.w")
    tensors["probe.b"] = Tensor(np.zeros(2), requires_grad=True, name="probe.b")
    joint = ModelParams(params.cfg, tensors)
    state = optimizer_init(joint)
    weights = _class_weights(np.asarray(labels), cfg.class_weights)
    onehot = _one_hot(np.asarray(labels), 2)
    for _ in range(cfg.epochs):
        for i in rng.permutation(len(volumes)):
            tokens = encode(patchify_embed(np.asarray(volumes[i]), joint), joint)
            feat = ad.reshape(summary_feature(tokens, joint), (1, d))
            logits = ad.add(ad.matmul(feat, joint["probe.w"]), joint["probe.b"])
            loss = ad.mul(ad.cross_entropy(Tensor(onehot[i:i + 1]), logits),
                          float(weights[labels[i]]))
            loss.backward()
            optimizer_step(joint, state, lr=cfg.lr, weight_decay=cfg.weight_decay)
            ad.zero_grads(joint.values())

    def score_fn(vols):
        frozen = joint.copy(requires_grad=False)
        feats = summary_features(vols, frozen)
        return _head_scores(feats, frozen["probe.w"].data, frozen["probe.b"].data)

    return score_fn


def run_classification_probe(volumes, labels, params: ModelParams,
                             cfg: ProbeConfig, fraction: float = 1.0) -> MetricReport:
    """Stratified k-fold linear (or full fine-tune) probe; AUROC/sens/spec per fold."""
    labels = np.asarray(labels)
    folds = kfold_split(labels, cfg.folds, cfg.seed)
    report = MetricReport(task="classification")
    feats = summary_features(volumes, params) if cfg.freeze == "frozen" else None
    for fi, test_idx in enumerate(folds):
        train_idx = np.setdiff1d(np.arange(len(labels)), test_idx)
        if fraction < 1.0:
            sub_seed = int(np.random.SeedSequence([cfg.seed, fi]).generate_state(1)[0])
            train_idx = subsample(train_idx, labels[train_idx], fraction, seed=sub_seed)
        if cfg.freeze == "frozen":
            w, b = train_linear_head(feats[train_idx], labels[train_idx], cfg,
                                     seed=cfg.seed * 1000 + fi)
            scores = _head_scores(feats[test_idx], w, b)
        else:
            score_fn = _train_full_classifier([volumes[i] for i in train_idx],
                                              labels[train_idx], params, cfg,
                                              seed=cfg.seed * 1000 + fi)
            scores = score_fn([volumes[i] for i in test_idx])
        tm = threshold_metrics(scores, labels[test_idx], threshold=cfg.threshold,
                               youden=cfg.youden)
        report.fold_rows.append({"fold": fi,
                                 "auroc": auroc(scores, labels[test_idx]),
                                 "sensitivity": tm.sensitivity,
                                 "specificity": tm.specificity,
                                 "threshold": tm.threshold})
    report.aggregate()
    return report


def reduced_data_sweep(volumes, labels, params: ModelParams,
                       cfg: ProbeConfig) -> list[dict]:
    """Fraction -> mean AUROC rows over the configured training fractions."""
    rows = []
    for fraction in cfg.fractions:
        rep = run_classification_probe(volumes, labels, params, cfg, fraction=fraction)
        rows.append({"fraction": fraction,
                     "auroc_mean": rep.summary["auroc"]["mean"],
                     "auroc_sd": rep.summary["auroc"]["sd"]})
    return rows


# ---------------------------------------------------------------------------
# Segmentation
# ---------------------------------------------------------------------------

N_SEG_CLASSES = 3  # background, left structure, right structure


def _soft_dice_loss(probs: Tensor, onehot: np.ndarray) -> Tensor:
    """1 - mean soft Dice over foreground classes (background excluded)."""
    eps = 1e-6
    terms = []
    for c in range(1, N_SEG_CLASSES):
        pc = probs[:, c]
        tc = onehot[:, c]
        inter = ad.reduce_sum(ad.mul(pc, tc))
        denom = ad.add(ad.reduce_sum(pc), float(tc.sum()))
        terms.append(ad.div(ad.add(ad.mul(inter, 2.0), eps), ad.add(denom, eps)))
    mean_dice = ad.div(ad.add(terms[0], terms[1]), 2.0)
    return ad.sub(1.0, mean_dice)


def train_token_head(tokens: np.ndarray, labelmaps: np.ndarray, upsample: np.ndarray,
                     cfg: ProbeConfig, seed: int,
                     val_tokens: np.ndarray | None = None,
                     val_labelmaps: np.ndarray | None = None):
    """Per-token linear head trained with Dice + cross-entropy.

    Tracks validation Dice per epoch when a validation set is given and
    returns the best-epoch head.
    """
    rng = np.random.default_rng(seed)
    d = tokens.shape[2]
    head = ModelParams(None, {
        "w": Tensor(rng.normal(0, 0.01, size=(d, N_SEG_CLASSES)), requires_grad=True, name="w"),
        "b": Tensor(np.zeros(N_SEG_CLASSES), requires_grad=True, name="b"),
    })
    state = optimizer_init(head)
    flat_labels = [lm.reshape(-1) for lm in labelmaps]
    onehots = [_one_hot(fl, N_SEG_CLASSES) for fl in flat_labels]
    best = (head["w"].data.copy(), head["b"].data.copy())
    best_dice = -1.0
    for _ in range(cfg.seg_epochs):
        for i in rng.permutation(len(tokens)):
            logits_tok = ad.add(ad.matmul(Tensor(tokens[i]), head["w"]), head["b"])
            logits_vox = ad.matmul(Tensor(upsample), logits_tok)
            ce = ad.cross_entropy(Tensor(onehots[i]), logits_vox)
            dl = _soft_dice_loss(ad.softmax(logits_vox, axis=-1), onehots[i])
            ad.add(ce, dl).backward()
            optimizer_step(head, state, lr=cfg.lr, weight_decay=cfg.weight_decay)
            ad.zero_grads(head.values())
        if val_tokens is not None:
            dices = []
            for vt, vl in zip(val_tokens, val_labelmaps):
                pred = predict_token_labels(vt, head["w"].data, head["b"].data,
                                            upsample, vl.shape)
                dices.append(np.mean([dice(pred, vl, c) for c in (1, 2)]))
            mean_val = float(np.mean(dices))
            if mean_val > best_dice:
                best_dice = mean_val
                best = (head["w"].data.copy(), head["b"].data.copy())
    if val_tokens is None:
        best = (head["w"].data.copy(), head["b"].data.copy())
    return best


def predict_token_labels(tokens: np.ndarray, w: np.ndarray, b: np.ndarray,
                         upsample: np.ndarray, extent) -> np.ndarray:
    logits = (upsample @ (tokens @ w + b)).reshape(*extent, N_SEG_CLASSES)
    return np.argmax(logits, axis=-1)


def sliding_window_logits(volume: np.ndarray, window: tuple[int, int, int],
                          predict_fn, n_classes: int = N_SEG_CLASSES) -> np.ndarray:
    """Overlap-averaged window logits; stride is half the window per axis.

    Equals a single prediction exactly when the volume matches the window.
    """
    extent = volume.shape
    if any(w > e for w, e in zip(window, extent)):
        raise ValueError(f"window {window} exceeds volume extent {extent}")
    starts = []
    for e, w in zip(extent, window):
        s = list(range(0, e - w + 1, max(1, w // 2)))
        if s[-1] != e - w:
            s.append(e - w)
        starts.append(s)
    acc = np.zeros(extent + (n_classes,))
    count = np.zeros(extent)
    for sx in starts[0]:
        for sy in starts[1]:
            for sz in starts[2]:
                region = (slice(sx, sx + window[0]), slice(sy, sy + window[1]),
                          slice(sz, sz + window[2]))
                acc[region] += predict_fn(volume[region])
                count[region] += 1.0
    return acc / count[..., None]


def run_segmentation_probe(volumes, labelmaps, strat_labels, params: ModelParams,
                           cfg: ProbeConfig) -> MetricReport:
    """k-fold per-token segmentation probe; Dice and HD95 per structure class.

    Foreground classes only; an empty prediction mask flags the fold's HD95
    as NaN rather than failing.
    """
    strat_labels = np.asarray(strat_labels)
    folds = kfold_split(strat_labels, cfg.folds, cfg.seed)
    model_cfg = params.cfg
    extent = np.asarray(volumes[0]).shape
    grid = view_grid(extent, model_cfg.patch_extent)
    upsample = _interp_matrix(grid, extent)
    all_tokens = token_features(volumes, params)
    report = MetricReport(task="segmentation")
    for fi, test_idx in enumerate(folds):
        train_idx = np.setdiff1d(np.arange(len(volumes)), test_idx)
        w, b = train_token_head(all_tokens[train_idx],
                                np.asarray([labelmaps[i] for i in train_idx]),
                                upsample, cfg, seed=cfg.seed * 1000 + fi,
                                val_tokens=all_tokens[test_idx],
                                val_labelmaps=[labelmaps[i] for i in test_idx])
        row = {"fold": fi}
        per_class_dice = {1: [], 2: []}
        per_class_hd = {1: [], 2: []}
        for i in test_idx:
            pred = predict_token_labels(all_tokens[i], w, b, upsample, extent)
            for c in (1, 2):
                per_class_dice[c].append(dice(pred, labelmaps[i], c))
                try:
                    per_class_hd[c].append(hd95(pred, labelmaps[i], c))
                except ValueError:
                    per_class_hd[c].append(float("nan"))
        for c in (1, 2):
            row[f"dice_{c}"] = float(np.mean(per_class_dice[c]))
            row[f"hd95_{c}"] = float(np.mean(per_class_hd[c]))
        report.fold_rows.append(row)
    report.aggregate()
    return report
