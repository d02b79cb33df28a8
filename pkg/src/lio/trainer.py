"""Joint training of the classifier with detachable mask and context heads.

Each step runs, per attached stage: backbone forward, stop-gradient pseudo
mask from positive images, mask head, mask regression loss, reference
selection, ground-truth polar fields, context head, and the two context
losses.  The total objective is

    total = L_cls + alpha * sum_stages(L_oel) + beta * sum_stages(L_scl)

optimized with SGD plus momentum.  When alpha = beta = 0 no heads exist and
no positives are sampled, so training reduces bit-exactly to a plain
classifier.  Inference reads only backbone tensors.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import backbone, checkpoint, oel, scl
from . import tensor as T
from .backbone import BackboneConfig
from .dataset import Dataset, downsample_mask
from .errors import ContractViolation, FormatError
from .rng import Rng, derive_seed

log = logging.getLogger(__name__)

METRICS_COLUMNS = ["epoch", "L_cls", "L_oel", "L_dis", "L_angle", "L_scl", "total",
                   "train_acc", "val_acc", "mask_iou"]
DIAG_COLUMNS = ["epoch", "mean_L_dis", "mean_L_angle", "theta_out_of_range_frac",
                "degenerate_mask_count"]

# rng stream labels: 1 backbone init (see backbone.init_params), 2 head init,
# 10 anchor order, 11 positive choice, 12 flip coins
_STREAM_HEADS = 2
_STREAM_ANCHORS = 10
_STREAM_POSITIVES = 11
_STREAM_FLIPS = 12


class TrainingDiverged(RuntimeError):
    def __init__(self, message, bundle=None):
        super().__init__(message)
        self.bundle = bundle


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.1
    beta: float = 0.1
    positives: int = 3
    attached_stages: tuple[int, ...] = (1,)
    proj_channels: int = 32
    batch_size: int = 16
    epochs: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    lr_decay_every: int = 0       # epochs between step decays; 0 disables
    lr_decay_factor: float = 0.1
    seed: int = 0
    use_gt_mask: bool = False
    flip: bool = False
    eval_every: int = 1           # epochs between val metric passes

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ContractViolation("alpha and beta must be >= 0")
        if self.positives < 1:
            raise ContractViolation("need at least one positive image")

    @property
    def lio_active(self) -> bool:
        return (self.alpha > 0 or self.beta > 0) and bool(self.attached_stages)


def attach_stages(config: TrainConfig, stages, bconfig: BackboneConfig) -> TrainConfig:
    """New config with head sets on the given stage indices."""
    stages = tuple(stages)
    if not stages:
        raise ContractViolation("attached stage set must be nonempty")
    for s in stages:
        if not (0 <= s < len(bconfig.stage_channels)):
            raise ContractViolation(f"stage {s} not in backbone with {len(bconfig.stage_channels)} stages")
    if len(set(stages)) != len(stages):
        raise ContractViolation(f"duplicate stages in {stages}")
    return replace(config, attached_stages=stages)


# ---------------------------------------------------------------------------
# model = parameter dict + configs

@dataclass
class Model:
    bconfig: BackboneConfig
    tconfig: TrainConfig
    params: dict[str, T.Value]

    def head_prefix(self, stage: int) -> str:
        side = self.bconfig.grid_sides()[stage]
        return f"head.n{side}."

    def head_params(self, stage: int, group: str) -> tuple[T.Value, ...]:
        p = self.head_prefix(stage)
        if group == "oel":
            return self.params[p + "oel.w"], self.params[p + "oel.b"]
        if group == "proj":
            return self.params[p + "scl.proj.w"], self.params[p + "scl.proj.b"]
        if group == "fc":
            return self.params[p + "scl.fc.w"], self.params[p + "scl.fc.b"]
        raise KeyError(group)


def init_model(bconfig: BackboneConfig, tconfig: TrainConfig) -> Model:
    params = backbone.init_params(bconfig)
    if tconfig.lio_active:
        sides = bconfig.grid_sides()
        for s in tconfig.attached_stages:
            if not (0 <= s < len(sides)):
                raise ContractViolation(f"attached stage {s} out of range")
            hr = Rng(derive_seed(bconfig.seed, _STREAM_HEADS, sides[s]))
            c = bconfig.stage_channels[s]
            prefix = f"head.n{sides[s]}."
            for k, v in oel.init_params(c, hr).items():
                params[prefix + k] = v
            for k, v in scl.init_params(c, tconfig.proj_channels, hr).items():
                params[prefix + k] = v
    return Model(bconfig, tconfig, params)


# ---------------------------------------------------------------------------
# batches

@dataclass
class Batch:
    images: np.ndarray                 # (B, H, W, 3)
    labels: np.ndarray                 # (B, K) one-hot
    positives: np.ndarray | None       # (B, P, H, W, 3)
    anchor_indices: list[int]
    gt_masks: np.ndarray | None = None


def sample_positive_indices(by_class: list[list[int]], label: int, anchor_idx: int,
                            P: int, rng: Rng) -> list[int]:
    """Positive picks share the anchor's label.

    With at least P other images in the class, draw P distinct non-anchor
    indices; otherwise fall back to drawing with replacement (a singleton
    class yields P copies of the anchor).
    """
    pool = [i for i in by_class[label] if i != anchor_idx]
    if len(pool) >= P:
        picks = rng.choice_without_replacement(len(pool), P)
        return [pool[i] for i in picks]
    if not pool:
        return [anchor_idx] * P
    return [pool[rng.randint(0, len(pool))] for _ in range(P)]


def assemble_batch(dataset: Dataset, anchor_indices, tconfig: TrainConfig,
                   rng_pos: Rng | None, rng_flip: Rng | None = None,
                   need_masks: bool = False) -> Batch:
    K = dataset.class_count
    by_class = dataset.by_class()
    images, labels, positives, masks = [], [], [], []
    want_pos = tconfig.lio_active and not tconfig.use_gt_mask
    for idx in anchor_indices:
        s = dataset.samples[idx]
        img = s.image
        if tconfig.flip and rng_flip is not None and rng_flip.floats(()) < 0.5:
            img = img[:, ::-1, :]
        images.append(img)
        onehot = np.zeros(K)
        onehot[s.label] = 1.0
        labels.append(onehot)
        if want_pos:
            picks = sample_positive_indices(by_class, s.label, idx, tconfig.positives, rng_pos)
            positives.append(np.stack([dataset.samples[p].image for p in picks]))
        if need_masks:
            if s.mask is None:
                raise ContractViolation("ground-truth masks required but missing")
            masks.append(s.mask)
    return Batch(
        images=np.stack(images),
        labels=np.stack(labels),
        positives=np.stack(positives) if positives else None,
        anchor_indices=list(anchor_indices),
        gt_masks=np.stack(masks) if masks else None,
    )


def sample_batch_with_positives(dataset: Dataset, batch_size: int, P: int, rng: Rng,
                                tconfig: TrainConfig | None = None) -> Batch:
    """Uniform anchors without replacement plus per-anchor positive sets."""
    if len(dataset) == 0:
        raise ContractViolation("empty dataset")
    if tconfig is None:
        tconfig = TrainConfig(positives=P)
    n = min(batch_size, len(dataset))
    anchors = rng.choice_without_replacement(len(dataset), n)
    return assemble_batch(dataset, anchors, tconfig, rng, need_masks=tconfig.use_gt_mask)


# ---------------------------------------------------------------------------
# losses

@dataclass
class LossBundle:
    l_cls: float
    l_oel: float
    l_dis: float
    l_angle: float
    l_scl: float
    total: float
    alpha: float
    beta: float
    per_stage: dict[int, dict[str, float]] = field(default_factory=dict)

    def decomposition_error(self) -> float:
        return abs(self.total - (self.l_cls + self.alpha * self.l_oel + self.beta * self.l_scl))


@dataclass
class StepTargets:
    """Stop-gradient quantities captured at a step's base point.

    Holding these fixed makes the training objective a plain function of
    the parameters, which is what finite-difference checks must probe.
    """
    per_stage: dict[int, dict] = field(default_factory=dict)


def build_losses(model: Model, batch: Batch, frozen: StepTargets | None = None):
    """Construct the step's loss graph.

    Returns (total Value, LossBundle, StepTargets, SclStats, logits Value).
    """
    cfg = model.tconfig
    grids, logits = backbone.forward(model.params, batch.images, model.bconfig)
    l_cls = backbone.classification_loss(logits, batch.labels)
    total = l_cls
    bundle = LossBundle(float(l_cls.data), 0.0, 0.0, 0.0, 0.0, float(l_cls.data),
                        cfg.alpha, cfg.beta)
    captured = StepTargets()
    stats = scl.SclStats()
    if not cfg.lio_active:
        return total, bundle, captured, stats, logits

    pos_grids = None
    if frozen is None and not cfg.use_gt_mask:
        B, P = batch.positives.shape[:2]
        flat = batch.positives.reshape((B * P,) + batch.positives.shape[2:])
        pos_grids = backbone.forward_raw(model.params, flat, model.bconfig,
                                         upto=max(cfg.attached_stages))

    oel_sum = None
    scl_sum = None
    for s in cfg.attached_stages:
        f = grids[s]
        Bsz, N = f.shape[0], f.shape[1]
        ow, ob = model.head_params(s, "oel")
        m_pred = oel.mask_head(f, ow, ob)                       # (B, N, N)

        if frozen is not None:
            cap = frozen.per_stage[s]
        else:
            cap = {}
            if cfg.use_gt_mask:
                cap["mask_target"] = np.stack(
                    [downsample_mask(m, N).astype(np.float64) for m in batch.gt_masks])
            else:
                pg = pos_grids[s].reshape((Bsz, -1) + pos_grids[s].shape[1:])
                f_const = T.detach(f)
                masks = [oel.region_correlation(f_const, T.const(pg[:, p])).data
                         for p in range(pg.shape[1])]
                cap["mask_target"] = oel.mean_correlation(masks)
            cap["refs"] = None
            cap["weights"] = None

        l_oel = oel.oel_loss(m_pred, T.const(cap["mask_target"]))

        if cap["refs"] is None:
            cap["refs"] = scl.select_reference(m_pred)
            truth = scl.ground_truth_polar_batch(N, cap["refs"])
            cap["gamma"], cap["theta"] = truth.gamma, truth.theta
            cap["weights"] = m_pred.data.copy()
        truth = scl.PolarField(cap["gamma"], cap["theta"], cap["refs"])

        pw, pb = model.head_params(s, "proj")
        h = scl.project(f, pw, pb)
        fw, fb = model.head_params(s, "fc")
        pred = scl.scl_head(h, cap["refs"], fw, fb)
        l_dis, _ = scl.distance_loss_with_stats(pred, truth, cap["weights"])
        l_ang, st = scl.angle_loss_with_stats(pred, truth, cap["weights"])
        l_scl = T.add(l_dis, l_ang)
        stats.merge(st)
        captured.per_stage[s] = cap

        oel_sum = l_oel if oel_sum is None else T.add(oel_sum, l_oel)
        scl_sum = l_scl if scl_sum is None else T.add(scl_sum, l_scl)
        bundle.per_stage[s] = {"L_oel": float(l_oel.data), "L_dis": float(l_dis.data),
                               "L_angle": float(l_ang.data), "L_scl": float(l_scl.data)}
        bundle.l_oel += float(l_oel.data)
        bundle.l_dis += float(l_dis.data)
        bundle.l_angle += float(l_ang.data)
        bundle.l_scl += float(l_scl.data)

    total = T.add(T.add(l_cls, T.scale(oel_sum, cfg.alpha)), T.scale(scl_sum, cfg.beta))
    bundle.total = float(total.data)
    return total, bundle, captured, stats, logits


# ---------------------------------------------------------------------------
# optimization

@dataclass
class SgdState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    lr: float = 0.0


def sgd_step(model: Model, grads_by_name: dict[str, np.ndarray], state: SgdState,
             momentum: float) -> None:
    for name in sorted(model.params):
        p = model.params[name]
        g = grads_by_name.get(name)
        if g is None:
            g = np.zeros(p.shape)
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros(p.shape)
            state.velocity[name] = v
        v *= momentum
        v += g
        p.data -= state.lr * v


def train_step(model: Model, batch: Batch, state: SgdState) -> tuple[LossBundle, scl.SclStats]:
    """One forward/backward/update; raises TrainingDiverged on non-finite loss."""
    total, bundle, _, stats, _ = build_losses(model, batch)
    if not np.isfinite(bundle.total):
        raise TrainingDiverged(f"non-finite loss: {bundle!r}", bundle)
    id_grads = T.backward(total, leaves=model.params.values())
    grads = {name: id_grads[id(v)] for name, v in model.params.items()}
    sgd_step(model, grads, state, model.tconfig.momentum)
    return bundle, stats


# ---------------------------------------------------------------------------
# evaluation / inference

def _forward_chunks(model: Model, images: np.ndarray, chunk: int = 64, upto=None):
    for i in range(0, len(images), chunk):
        yield backbone.forward(model.params, images[i:i + chunk], model.bconfig, upto=upto)


def evaluate(dataset: Dataset, model: Model, mode: str = "accuracy",
             stage: int | None = None) -> float:
    if mode == "accuracy":
        images = np.stack([s.image for s in dataset.samples])
        labels = np.array([s.label for s in dataset.samples])
        correct = 0
        pos = 0
        for _, logits in _forward_chunks(model, images):
            pred = np.argmax(logits.data, axis=1)
            correct += int((pred == labels[pos:pos + len(pred)]).sum())
            pos += len(pred)
        return correct / len(dataset)
    if mode == "mask-iou":
        if not dataset.has_masks():
            raise ContractViolation("mask-iou needs ground-truth masks")
        if stage is None:
            stage = model.tconfig.attached_stages[0]
        return _mask_iou(dataset, model, stage)
    raise ContractViolation(f"unknown evaluate mode {mode!r}")


def _mask_iou(dataset: Dataset, model: Model, stage: int) -> float:
    N = model.bconfig.grid_sides()[stage]
    ow, ob = model.head_params(stage, "oel")
    images = np.stack([s.image for s in dataset.samples])
    gts = [downsample_mask(s.mask, N) for s in dataset.samples]
    ious = []
    pos = 0
    for grids, _ in _forward_chunks(model, images, upto=stage):
        m = oel.mask_head(grids[stage], ow, ob).data           # (b, N, N)
        for row in m:
            binary = row >= row.mean()
            gt = gts[pos].astype(bool)
            union = np.logical_or(binary, gt).sum()
            inter = np.logical_and(binary, gt).sum()
            ious.append(inter / union if union else 1.0)
            pos += 1
    return float(np.mean(ious))


def inference(images, source) -> tuple[np.ndarray, np.ndarray]:
    """Classify with the backbone alone.

    ``source`` is a Model or a loaded Checkpoint; only backbone tensors are
    read, so head tensors (present, absent, or poisoned) cannot affect the
    result.  Returns (predicted class indices, logits); exact logit ties
    resolve to the lowest class index.
    """
    if isinstance(source, checkpoint.Checkpoint):
        bconfig = backbone_config_from_header(source.header)
        params = {k: T.param(v) for k, v in source.backbone_tensors().items()}
    else:
        bconfig = source.bconfig
        params = {k: v for k, v in source.params.items() if k.startswith("backbone.")}
    single = np.asarray(images).ndim == 3
    batch = np.asarray(images)[None] if single else np.asarray(images)
    _, logits = backbone.forward(params, batch, bconfig)
    pred = np.argmax(logits.data, axis=1)
    if single:
        return int(pred[0]), logits.data[0]
    return pred, logits.data


# ---------------------------------------------------------------------------
# checkpoint glue

def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def make_header(model: Model, epoch: int, rng_state: dict[str, int] | None = None) -> dict[str, str]:
    b, t = model.bconfig, model.tconfig
    header = {
        "backbone.input_size": _fmt(b.input_size),
        "backbone.stem_channels": _fmt(b.stem_channels),
        "backbone.stage_channels": _fmt(b.stage_channels),
        "backbone.stem_stride": _fmt(b.stem_stride),
        "backbone.stage_strides": _fmt(b.stage_strides),
        "backbone.class_count": _fmt(b.class_count),
        "backbone.seed": _fmt(b.seed),
        "train.alpha": _fmt(t.alpha),
        "train.beta": _fmt(t.beta),
        "train.positives": _fmt(t.positives),
        "train.attached_stages": _fmt(t.attached_stages),
        "train.proj_channels": _fmt(t.proj_channels),
        "train.batch_size": _fmt(t.batch_size),
        "train.epochs": _fmt(t.epochs),
        "train.lr": _fmt(t.lr),
        "train.momentum": _fmt(t.momentum),
        "train.seed": _fmt(t.seed),
        "train.use_gt_mask": _fmt(int(t.use_gt_mask)),
        "train.flip": _fmt(int(t.flip)),
        "epoch": str(epoch),
    }
    for k, v in (rng_state or {}).items():
        header[f"rng.{k}"] = str(v)
    return header


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x != "")


def backbone_config_from_header(header: dict[str, str]) -> BackboneConfig:
    try:
        return BackboneConfig(
            input_size=int(header["backbone.input_size"]),
            stem_channels=int(header["backbone.stem_channels"]),
            stage_channels=_ints(header["backbone.stage_channels"]),
            stem_stride=int(header["backbone.stem_stride"]),
            stage_strides=_ints(header["backbone.stage_strides"]),
            class_count=int(header["backbone.class_count"]),
            seed=int(header["backbone.seed"]),
        )
    except KeyError as e:
        raise FormatError(f"checkpoint header missing {e}") from None


def train_config_from_header(header: dict[str, str]) -> TrainConfig:
    try:
        return TrainConfig(
            alpha=float(header["train.alpha"]),
            beta=float(header["train.beta"]),
            positives=int(header["train.positives"]),
            attached_stages=_ints(header["train.attached_stages"]),
            proj_channels=int(header["train.proj_channels"]),
            batch_size=int(header["train.batch_size"]),
            epochs=int(header["train.epochs"]),
            lr=float(header["train.lr"]),
            momentum=float(header["train.momentum"]),
            seed=int(header["train.seed"]),
            use_gt_mask=bool(int(header.get("train.use_gt_mask", "0"))),
            flip=bool(int(header.get("train.flip", "0"))),
        )
    except KeyError as e:
        raise FormatError(f"checkpoint header missing {e}") from None


def save_model(path, model: Model, epoch: int, rng_state: dict[str, int] | None = None) -> None:
    tensors = {name: v.data for name, v in model.params.items()}
    checkpoint.save(path, make_header(model, epoch, rng_state), tensors)


_warned_ignored_heads = False


def model_from_checkpoint(cp: checkpoint.Checkpoint, include_lio_heads: bool = True) -> Model:
    global _warned_ignored_heads
    bconfig = backbone_config_from_header(cp.header)
    tconfig = train_config_from_header(cp.header)
    tensors = dict(cp.tensors)
    if not include_lio_heads:
        dropped = [k for k in tensors if k.startswith("head.")]
        for k in dropped:
            del tensors[k]
        if dropped and not _warned_ignored_heads:
            log.warning("ignoring %d head tensors (inference-only load)", len(dropped))
            _warned_ignored_heads = True
        tconfig = replace(tconfig, alpha=0.0, beta=0.0)
    params = {k: T.param(v) for k, v in tensors.items()}
    return Model(bconfig, tconfig, params)


# ---------------------------------------------------------------------------
# the training loop

@dataclass
class TrainResult:
    model: Model
    history: list[dict]
    final_val_acc: float | None
    final_mask_iou: float | None


def _append_csv(path, columns, row) -> None:
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(columns)
        w.writerow(row)


def train(train_ds: Dataset, val_ds: Dataset | None, bconfig: BackboneConfig,
          tconfig: TrainConfig, out_dir=None, quiet: bool = True) -> TrainResult:
    if len(train_ds) == 0:
        raise ContractViolation("empty training dataset")
    model = init_model(bconfig, tconfig)
    state = SgdState(lr=tconfig.lr)
    r_anchor = Rng(derive_seed(tconfig.seed, _STREAM_ANCHORS))
    r_pos = Rng(derive_seed(tconfig.seed, _STREAM_POSITIVES))
    r_flip = Rng(derive_seed(tconfig.seed, _STREAM_FLIPS))
    need_masks = tconfig.lio_active and tconfig.use_gt_mask

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    history = []
    val_acc = iou = None
    for epoch in range(1, tconfig.epochs + 1):
        if tconfig.lr_decay_every and epoch > 1 and (epoch - 1) % tconfig.lr_decay_every == 0:
            state.lr *= tconfig.lr_decay_factor
        perm = r_anchor.shuffle(len(train_ds))
        sums = {"L_cls": 0.0, "L_oel": 0.0, "L_dis": 0.0, "L_angle": 0.0, "L_scl": 0.0,
                "total": 0.0}
        epoch_stats = scl.SclStats()
        correct = seen = 0
        steps = 0
        for start in range(0, len(perm) - tconfig.batch_size + 1, tconfig.batch_size):
            anchors = perm[start:start + tconfig.batch_size]
            batch = assemble_batch(train_ds, anchors, tconfig, r_pos, r_flip, need_masks)
            total, bundle, _, stats, logits = build_losses(model, batch)
            if not np.isfinite(bundle.total):
                if out_dir is not None:
                    save_model(os.path.join(out_dir, "diverged.lioc"), model, epoch)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}: {bundle!r}", bundle)
            id_grads = T.backward(total, leaves=model.params.values())
            grads = {name: id_grads[id(v)] for name, v in model.params.items()}
            sgd_step(model, grads, state, tconfig.momentum)
            pred = np.argmax(logits.data, axis=1)
            correct += int((pred == np.argmax(batch.labels, axis=1)).sum())
            seen += len(pred)
            for k, v in (("L_cls", bundle.l_cls), ("L_oel", bundle.l_oel),
                         ("L_dis", bundle.l_dis), ("L_angle", bundle.l_angle),
                         ("L_scl", bundle.l_scl), ("total", bundle.total)):
                sums[k] += v
            epoch_stats.merge(stats)
            steps += 1

        means = {k: (v / steps if steps else 0.0) for k, v in sums.items()}
        train_acc = correct / seen if seen else 0.0
        run_eval = val_ds is not None and (
            epoch == tconfig.epochs or (tconfig.eval_every and epoch % tconfig.eval_every == 0))
        if run_eval:
            val_acc = evaluate(val_ds, model, "accuracy")
            iou = None
            if tconfig.lio_active and val_ds.has_masks():
                iou = evaluate(val_ds, model, "mask-iou")
        row = {"epoch": epoch, **means, "train_acc": train_acc,
               "val_acc": val_acc if run_eval else "",
               "mask_iou": iou if (run_eval and iou is not None) else ""}
        history.append(row)
        if not quiet:
            log.info("epoch %d: %s", epoch, row)
        if out_dir is not None:
            _append_csv(os.path.join(out_dir, "metrics.csv"), METRICS_COLUMNS,
                        [row[c] for c in METRICS_COLUMNS])
            _append_csv(os.path.join(out_dir, "scl_diagnostics.csv"), DIAG_COLUMNS,
                        [epoch, means["L_dis"], means["L_angle"],
                         epoch_stats.theta_out_of_range_frac, epoch_stats.degenerate_masks])
            rng_state = {"anchor": r_anchor.counter, "positive": r_pos.counter,
                         "flip": r_flip.counter}
            save_model(os.path.join(out_dir, f"epoch{epoch:03d}.lioc"), model, epoch, rng_state)
            save_model(os.path.join(out_dir, "final.lioc"), model, epoch, rng_state)
    return TrainResult(model, history, val_acc, iou)
