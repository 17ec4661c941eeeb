"""End-to-end orchestration: dataset IO, training, inference, metrics,
cross-validation, segment scoring, and model persistence.

On disk a dataset is one directory per subject::

    <subject>/frames/frame_00.pgm ... frame_24.pgm
    <subject>/mask.pgm                 # infarct ground truth
    <subject>/annulus.pgm              # optional myocardium mask
    <subject>/meta.json                # slice_level, center, reference_angle,
                                       # pixel_spacing_mm
    <subject>/flows/flow_00.flo ...    # optional ground-truth flow

Models persist as a single JSON document with base64-encoded little-endian
float64 weight arrays, so two identical training runs produce byte-identical
files.
"""
from __future__ import annotations

import base64
import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from pathlib import Path

from .config import Config
from .errors import (CorruptModel, DegenerateLabels, InvalidParameter,
                     UnsupportedVersion)
from .features import MODES, feature_matrix, normalize, patch_sequences
from .imaging import (ImageSequence, Image, PixelMask, read_flo, read_image,
                      read_mask, write_flo, write_image, write_mask)
from .neural import (Autoencoder, LstmStack, RmsPropState, SoftmaxHead,
                     classify_batch, init_autoencoder, init_lstm_stack,
                     init_softmax_head, fine_tune, lstm_train, sae_pretrain)
from .synth import PhantomDataset
from .varflow import FlowSequence, flow_sequence

MODEL_VERSION = 1
SEGMENTS_BY_LEVEL = {"basal": 6, "mid": 6, "apical": 4}


# ---------------------------------------------------------------------------
# dataset containers and disk layout
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Subject:
    id: str
    sequence: ImageSequence
    mask: PixelMask
    slice_level: str
    center: tuple
    reference_angle: float = 0.0
    pixel_spacing_mm: float = 1.0
    gt_flows: FlowSequence | None = None
    region: PixelMask | None = None  # myocardium mask; None = all pixels

    def __post_init__(self):
        if (self.mask.width, self.mask.height) != (self.sequence.width, self.sequence.height):
            raise InvalidParameter(f"subject {self.id}: mask does not match the frames")
        if self.slice_level not in SEGMENTS_BY_LEVEL:
            raise InvalidParameter(f"subject {self.id}: unknown slice level {self.slice_level!r}")


@dataclass(eq=False)
class Dataset:
    subjects: list

    def __post_init__(self):
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise InvalidParameter("subject ids must be unique")

    def __len__(self) -> int:
        return len(self.subjects)

    def by_id(self, sid: str) -> Subject:
        for s in self.subjects:
            if s.id == sid:
                return s
        raise InvalidParameter(f"no subject named {sid!r}")

    def subset(self, ids) -> "Dataset":
        return Dataset([self.by_id(i) for i in ids])

    @property
    def ids(self) -> list:
        return [s.id for s in self.subjects]


def subject_from_phantom(ds: PhantomDataset, sid: str) -> Subject:
    return Subject(id=sid, sequence=ds.sequence, mask=ds.mask,
                   slice_level=ds.slice_level, center=ds.params.center,
                   gt_flows=ds.gt_flows, region=ds.annulus)


def write_subject(root, subject: Subject) -> Path:
    base = Path(root) / subject.id
    (base / "frames").mkdir(parents=True, exist_ok=True)
    for j, frame in enumerate(subject.sequence.frames):
        write_image(frame, base / "frames" / f"frame_{j:02d}.pgm")
    write_mask(subject.mask, base / "mask.pgm")
    if subject.region is not None:
        write_mask(subject.region, base / "annulus.pgm")
    if subject.gt_flows is not None:
        (base / "flows").mkdir(exist_ok=True)
        for j, flow in enumerate(subject.gt_flows.flows):
            write_flo(flow, base / "flows" / f"flow_{j:02d}.flo")
    meta = {
        "slice_level": subject.slice_level,
        "center": list(subject.center),
        "reference_angle": subject.reference_angle,
        "pixel_spacing_mm": subject.pixel_spacing_mm,
        "frame_period_ms": subject.sequence.frame_period_ms,
    }
    (base / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return base


def _normalize_sequence(frames: list, period: float) -> ImageSequence:
    """Per-sequence min-max intensity normalization at ingestion."""
    stack = np.stack([f.data for f in frames])
    lo, hi = stack.min(), stack.max()
    if hi > lo:
        frames = [Image((f.data - lo) / (hi - lo)) for f in frames]
    return ImageSequence(frames=tuple(frames), frame_period_ms=period)


def read_subject(path) -> Subject:
    base = Path(path)
    frame_files = sorted((base / "frames").glob("frame_*.pgm"))
    if len(frame_files) < 2:
        raise InvalidParameter(f"{base}: need at least 2 frames")
    try:
        meta = json.loads((base / "meta.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidParameter(f"{base}: unreadable meta.json: {exc}") from exc
    frames = [read_image(f) for f in frame_files]
    seq = _normalize_sequence(frames, float(meta.get("frame_period_ms", 45.1)))
    gt = None
    flow_files = sorted((base / "flows").glob("flow_*.flo")) if (base / "flows").is_dir() else []
    if flow_files:
        gt = FlowSequence(tuple(read_flo(f) for f in flow_files))
    region = read_mask(base / "annulus.pgm") if (base / "annulus.pgm").exists() else None
    return Subject(
        id=base.name,
        sequence=seq,
        mask=read_mask(base / "mask.pgm"),
        slice_level=meta["slice_level"],
        center=tuple(meta["center"]),
        reference_angle=float(meta.get("reference_angle", 0.0)),
        pixel_spacing_mm=float(meta.get("pixel_spacing_mm", 1.0)),
        gt_flows=gt,
        region=region,
    )


def read_dataset(root) -> Dataset:
    root = Path(root)
    dirs = sorted(d for d in root.iterdir() if (d / "meta.json").exists())
    if not dirs:
        raise InvalidParameter(f"{root}: no subject directories found")
    return Dataset([read_subject(d) for d in dirs])


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class MetricsReport:
    accuracy: float
    sensitivity: float
    specificity: float
    roc: list
    roc_auc: float
    pr: list
    pr_auc: float
    n_pos: int
    n_neg: int
    degenerate: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "roc_auc": self.roc_auc,
            "pr_auc": self.pr_auc,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
            "degenerate": list(self.degenerate),
            "roc": [[float(a), float(b)] for a, b in self.roc],
            "pr": [[float(a), float(b)] for a, b in self.pr],
        }


def _flatten_scored(scores, truths, regions=None):
    if regions is None:
        regions = [None] * len(scores)
    if not (len(scores) == len(truths) == len(regions)):
        raise InvalidParameter("scores, truths, and regions must align")
    all_s, all_y = [], []
    for s, t, r in zip(scores, truths, regions):
        s = np.asarray(s, dtype=np.float64)
        y = t.labels if isinstance(t, PixelMask) else np.asarray(t)
        if s.shape != y.shape:
            raise InvalidParameter("score/truth shapes differ")
        if r is not None:
            keep = (r.labels if isinstance(r, PixelMask) else np.asarray(r)) > 0
            s, y = s[keep], y[keep]
        all_s.append(s.ravel())
        all_y.append(y.ravel().astype(np.int64))
    return np.concatenate(all_s), np.concatenate(all_y)


def evaluate(scores, truths, regions=None, threshold: float = 0.5) -> MetricsReport:
    """Pixel metrics pooled over subjects: rates at ``threshold``, ROC, PR.

    ``scores``: list of arrays in [0,1]; ``truths``: aligned masks/arrays;
    ``regions``: optional masks restricting evaluated pixels.
    """
    s, y = _flatten_scored(scores, truths, regions)
    if len(y) == 0:
        raise InvalidParameter("nothing to evaluate")
    pos = y == 1
    npos = int(pos.sum())
    nneg = len(y) - npos
    pred = s >= threshold
    tp = int(np.sum(pred & pos))
    tn = int(np.sum(~pred & ~pos))
    degenerate = []
    accuracy = (tp + tn) / len(y)
    sensitivity = tp / npos if npos else math.nan
    specificity = tn / nneg if nneg else math.nan
    if not npos:
        degenerate.append("sensitivity")
    if not nneg:
        degenerate.append("specificity")

    if npos and nneg:
        order = np.argsort(-s, kind="stable")
        ys = pos[order]
        tp_cum = np.cumsum(ys)
        fp_cum = np.cumsum(~ys)
        boundary = np.r_[np.flatnonzero(np.diff(s[order]) != 0), len(s) - 1]
        tpr = tp_cum[boundary] / npos
        fpr = fp_cum[boundary] / nneg
        roc = [(0.0, 0.0)] + list(zip(fpr.tolist(), tpr.tolist()))
        roc_auc = float(np.trapezoid(np.r_[0.0, tpr], np.r_[0.0, fpr]))
        precision = tp_cum[boundary] / (tp_cum[boundary] + fp_cum[boundary])
        recall = tpr
        pr = [(0.0, float(precision[0]))] + list(zip(recall.tolist(), precision.tolist()))
        pr_auc = float(np.trapezoid(np.r_[precision[0], precision], np.r_[0.0, recall]))
    else:
        roc, pr = [], []
        roc_auc = pr_auc = math.nan
        degenerate.append("auc")

    return MetricsReport(accuracy=accuracy, sensitivity=sensitivity,
                         specificity=specificity, roc=roc, roc_auc=roc_auc,
                         pr=pr, pr_auc=pr_auc, n_pos=npos, n_neg=nneg,
                         degenerate=degenerate)


def kfold_split(n_subjects: int, k: int, seed: int) -> list:
    """Seeded k-fold partition; returns [(train_idx, test_idx), ...]."""
    if k < 2:
        raise InvalidParameter("k must be >= 2")
    if n_subjects < k:
        raise InvalidParameter("need at least k subjects")
    perm = np.random.default_rng(seed).permutation(n_subjects)
    folds = np.array_split(perm, k)
    splits = []
    for i, fold in enumerate(folds):
        test = sorted(int(v) for v in fold)
        train = sorted(int(v) for f2 in folds[:i] + folds[i + 1:] for v in f2)
        splits.append((train, test))
    return splits


def segment_count(slice_level: str) -> int:
    if slice_level not in SEGMENTS_BY_LEVEL:
        raise InvalidParameter(f"unknown slice level {slice_level!r}")
    return SEGMENTS_BY_LEVEL[slice_level]


def aha_segments(mask: PixelMask, center, reference_angle: float, slice_level: str,
                 myocardium: PixelMask | None = None, fraction: float = 0.05) -> np.ndarray:
    """Angular segment labels: 1 where >= ``fraction`` of the segment's
    myocardial pixels are infarcted. 6 segments for basal/mid, 4 for apical."""
    nseg = segment_count(slice_level)
    cx, cy = float(center[0]), float(center[1])
    if not (0 <= cx < mask.width and 0 <= cy < mask.height):
        raise InvalidParameter("center lies outside the mask")
    span = 2 * math.pi / nseg
    ys, xs = np.mgrid[0:mask.height, 0:mask.width]
    theta = np.arctan2(ys - cy, xs - cx)
    idx = np.floor(np.mod(theta - reference_angle, 2 * math.pi) / span).astype(int)
    idx = np.minimum(idx, nseg - 1)
    myo = np.ones_like(mask.labels) if myocardium is None else myocardium.labels
    labels = np.zeros(nseg, dtype=int)
    for s in range(nseg):
        seg = (idx == s) & (myo > 0)
        total = int(seg.sum())
        if total and int((mask.labels > 0)[seg].sum()) >= fraction * total:
            labels[s] = 1
    return labels


# ---------------------------------------------------------------------------
# model persistence
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Model:
    version: int
    lstm: LstmStack
    ae: Autoencoder
    head: SoftmaxHead
    norm_mean: np.ndarray
    norm_std: np.ndarray
    config: Config
    input_size: int
    frames: int

    @property
    def mode(self) -> str:
        return self.config.features.mode


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape),
            "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(entry: dict) -> np.ndarray:
    try:
        shape = tuple(int(v) for v in entry["shape"])
        raw = base64.b64decode(entry["data"], validate=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptModel(f"bad weight entry: {exc}") from exc
    expect = int(np.prod(shape)) * 8 if shape else 8
    if len(raw) != expect:
        raise CorruptModel(f"weight payload is {len(raw)} bytes, shape implies {expect}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def _model_weights(model: Model) -> dict:
    weights = {}
    for i, layer in enumerate(model.lstm.layers):
        weights[f"lstm.{i}.W"] = layer.W
        weights[f"lstm.{i}.b"] = layer.b
    weights["lstm.w_hy"] = model.lstm.w_hy
    for i in range(model.ae.depth):
        weights[f"ae.enc.{i}.W"] = model.ae.enc_w[i]
        weights[f"ae.enc.{i}.b"] = model.ae.enc_b[i]
        weights[f"ae.dec.{i}.W"] = model.ae.dec_w[i]
        weights[f"ae.dec.{i}.b"] = model.ae.dec_b[i]
    weights["head.W"] = model.head.W
    weights["head.b"] = model.head.b
    return weights


def save_model(model: Model, path) -> None:
    """Write the model as one canonical JSON document (stable bytes)."""
    doc = {
        "version": model.version,
        "config": model.config.to_dict(),
        "meta": {"input_size": model.input_size, "frames": model.frames},
        "norm_stats": {"mean": _encode_array(model.norm_mean),
                       "std": _encode_array(model.norm_std)},
        "weights": {k: _encode_array(v) for k, v in _model_weights(model).items()},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")))


def load_model(path) -> Model:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptModel(f"unreadable model file: {exc}") from exc
    if not isinstance(doc, dict) or "version" not in doc:
        raise CorruptModel("model document lacks a version")
    if doc["version"] != MODEL_VERSION:
        raise UnsupportedVersion(f"model version {doc['version']} not supported")
    try:
        config = Config.from_dict(doc["config"])
        meta = doc["meta"]
        weights = {k: _decode_array(v) for k, v in doc["weights"].items()}
        mean = _decode_array(doc["norm_stats"]["mean"])
        std = _decode_array(doc["norm_stats"]["std"])

        from .neural import LstmLayer  # local import to keep module top tidy
        layers = []
        for i in range(config.neural.lstm_layers):
            layers.append(LstmLayer(W=weights[f"lstm.{i}.W"], b=weights[f"lstm.{i}.b"],
                                    dropout_rate=0.0 if i == 0 else config.neural.dropout))
        lstm = LstmStack(layers=layers, w_hy=weights["lstm.w_hy"])
        depth = len(config.neural.sae_dims)
        ae = Autoencoder(
            enc_w=[weights[f"ae.enc.{i}.W"] for i in range(depth)],
            enc_b=[weights[f"ae.enc.{i}.b"] for i in range(depth)],
            dec_w=[weights[f"ae.dec.{i}.W"] for i in range(depth)],
            dec_b=[weights[f"ae.dec.{i}.b"] for i in range(depth)],
        )
        head = SoftmaxHead(W=weights["head.W"], b=weights["head.b"])
        model = Model(version=MODEL_VERSION, lstm=lstm, ae=ae, head=head,
                      norm_mean=mean, norm_std=std, config=config,
                      input_size=int(meta["input_size"]), frames=int(meta["frames"]))
    except (KeyError, InvalidParameter, TypeError) as exc:
        raise CorruptModel(f"model structure invalid: {exc}") from exc
    return model


# ---------------------------------------------------------------------------
# training and inference
# ---------------------------------------------------------------------------

def compute_subject_flows(dataset: Dataset, config: Config, cache: dict | None = None) -> dict:
    """Solver flows for every subject, reusing any entries already in cache."""
    flows = dict(cache or {})
    m = config.matching
    for s in dataset.subjects:
        if s.id not in flows:
            flows[s.id] = flow_sequence(s.sequence, config.flow.params(),
                                        patch_size=m.patch_size, radius=m.radius,
                                        nu=m.nu, threshold=m.threshold)
    return flows


def _sample_pixels(subject: Subject, cap: int, rng: np.random.Generator):
    region = subject.region.labels if subject.region is not None \
        else np.ones_like(subject.mask.labels)
    pos = np.argwhere((subject.mask.labels > 0) & (region > 0))
    neg = np.argwhere((subject.mask.labels == 0) & (region > 0))
    per_class = max(cap // 2, 1)
    out = []
    for pool, label in ((pos, 1), (neg, 0)):
        if len(pool) == 0:
            continue
        take = min(per_class, len(pool))
        pick = pool[rng.choice(len(pool), size=take, replace=False)]
        out.append((pick[:, ::-1], np.full(take, label)))  # (y,x) -> (x,y)
    if not out:
        return np.zeros((0, 2), int), np.zeros(0, int)
    pts = np.concatenate([p for p, _ in out])
    labels = np.concatenate([l for _, l in out])
    return pts, labels


def train(dataset: Dataset, config: Config, seed: int, mode: str | None = None,
          flows: dict | None = None) -> Model:
    """Fit the full model on a dataset; deterministic given (data, config, seed)."""
    if len(dataset) < 2:
        raise InvalidParameter("training needs at least 2 subjects")
    mode = mode or config.features.mode
    if mode not in MODES:
        raise InvalidParameter(f"mode must be one of {MODES}")
    snapshot = replace(config, features=replace(config.features, mode=mode))
    nc = config.neural
    window = config.features.window
    size = dataset.subjects[0].sequence.width
    J = len(dataset.subjects[0].sequence)
    for s in dataset.subjects:
        if s.sequence.width != size or s.sequence.height != size or len(s.sequence) != J:
            raise InvalidParameter("all subjects must share frame geometry")

    flows = compute_subject_flows(dataset, config, flows)

    master = np.random.default_rng(seed)
    seed_sample, seed_lstm, seed_sae, seed_ft = (int(v) for v in
                                                 master.integers(2 ** 31, size=4))

    rng_sample = np.random.default_rng(seed_sample)
    per_subject = []
    for subject in dataset.subjects:
        pts, labels = _sample_pixels(subject, config.pipeline.pixel_cap, rng_sample)
        per_subject.append((subject, pts, labels))
    all_labels = np.concatenate([l for _, _, l in per_subject])
    if not (np.any(all_labels == 1) and np.any(all_labels == 0)):
        raise DegenerateLabels("training pixels must include both classes")

    lstm = init_lstm_stack(window * window, nc.hidden_dim, nc.lstm_layers,
                           classes=2, dropout=nc.dropout,
                           rng=np.random.default_rng(seed_lstm))
    use_local = mode in ("local_only", "combined")
    if use_local and nc.lstm_epochs > 0:
        seqs = np.concatenate([patch_sequences(s.sequence, pts, window)
                               for s, pts, _ in per_subject if len(pts)])
        lstm_train(lstm, seqs, all_labels,
                   RmsPropState(nc.lstm_lr, nc.opt_rho, nc.opt_eps),
                   epochs=nc.lstm_epochs, seed=seed_lstm, batch_size=nc.lstm_batch)

    rows = [feature_matrix(s.sequence, flows[s.id], pts, lstm, window, mode)
            for s, pts, _ in per_subject if len(pts)]
    features = np.concatenate(rows)
    norm_mean = features.mean(axis=0)
    norm_std = features.std(axis=0)
    features = normalize(features, (norm_mean, norm_std))

    ae = init_autoencoder((features.shape[1],) + tuple(nc.sae_dims),
                          rng=np.random.default_rng(seed_sae))
    if nc.sae_epochs > 0:
        sae_pretrain(ae, features, RmsPropState(nc.sae_lr, nc.opt_rho, nc.opt_eps),
                     epochs=nc.sae_epochs, seed=seed_sae, batch_size=nc.batch)
    head = init_softmax_head(nc.sae_dims[-1], 2, rng=np.random.default_rng(seed_ft))
    if nc.finetune_epochs > 0:
        fine_tune(ae, head, features, all_labels,
                  RmsPropState(nc.finetune_lr, nc.opt_rho, nc.opt_eps),
                  epochs=nc.finetune_epochs, seed=seed_ft, batch_size=nc.batch)

    return Model(version=MODEL_VERSION, lstm=lstm, ae=ae, head=head,
                 norm_mean=norm_mean, norm_std=norm_std, config=snapshot,
                 input_size=size, frames=J)


def infer(model: Model, sequence: ImageSequence, region: PixelMask | None = None,
          flows: FlowSequence | None = None):
    """Per-pixel scores and the thresholded mask over the evaluation region."""
    if sequence.width != model.input_size or sequence.height != model.input_size:
        raise InvalidParameter(
            f"model expects {model.input_size}x{model.input_size} sequences")
    if len(sequence) != model.frames:
        raise InvalidParameter(f"model expects {model.frames} frames")
    config = model.config
    if flows is None:
        m = config.matching
        flows = flow_sequence(sequence, config.flow.params(), patch_size=m.patch_size,
                              radius=m.radius, nu=m.nu, threshold=m.threshold)
    keep = region.labels > 0 if region is not None \
        else np.ones((sequence.height, sequence.width), bool)
    ys, xs = np.nonzero(keep)
    pts = np.stack([xs, ys], axis=1)
    feats = feature_matrix(sequence, flows, pts, model.lstm, config.features.window,
                           model.mode, stats=(model.norm_mean, model.norm_std))
    scores_vec = classify_batch(model.ae, model.head, feats)
    scores = np.zeros((sequence.height, sequence.width))
    scores[ys, xs] = scores_vec
    labels = (scores >= config.pipeline.decision_threshold) & keep
    return PixelMask(labels.astype(np.uint8)), scores


def evaluate_model(model: Model, subjects, flows: dict | None = None,
                   threshold: float | None = None) -> MetricsReport:
    """Run inference on held-out subjects and pool the pixel metrics."""
    scores, truths, regions = [], [], []
    for s in subjects:
        flow = None if flows is None else flows.get(s.id)
        _, sc = infer(model, s.sequence, region=s.region, flows=flow)
        scores.append(sc)
        truths.append(s.mask)
        regions.append(s.region)
    thr = model.config.pipeline.decision_threshold if threshold is None else threshold
    return evaluate(scores, truths, regions, threshold=thr)


def ablate(dataset: Dataset, config: Config, seed: int, train_ids, test_ids,
           flows: dict | None = None) -> dict:
    """Train and evaluate each feature mode on the same split and seed."""
    train_set = dataset.subset(train_ids)
    test_set = dataset.subset(test_ids)
    flows = compute_subject_flows(dataset, config, flows)
    reports = {}
    for mode in MODES:  # fixed order: local_only, global_only, combined
        model = train(train_set, config, seed, mode=mode, flows=flows)
        reports[mode] = evaluate_model(model, test_set.subjects, flows=flows)
    return reports


def patch_sweep(dataset: Dataset, sizes, config: Config, seed: int,
                train_ids, test_ids, flows: dict | None = None) -> list:
    """Accuracy and wall time per window size; returns [(size, acc, sec)]."""
    for size in sizes:
        if size < 3 or size % 2 == 0:
            raise InvalidParameter(f"window sizes must be odd and >= 3, got {size}")
    flows = compute_subject_flows(dataset, config, flows)
    train_set = dataset.subset(train_ids)
    test_set = dataset.subset(test_ids)
    results = []
    for size in sizes:
        cfg = replace(config, features=replace(config.features, window=int(size)))
        t0 = time.perf_counter()
        model = train(train_set, cfg, seed, flows=flows)
        report = evaluate_model(model, test_set.subjects, flows=flows)
        results.append((int(size), report.accuracy, time.perf_counter() - t0))
    return results
