"""Coarse-to-fine segmentation pipeline.

Stage one is a cascade of two plain U-Nets that localizes the left-ventricle
region. Stage two crops that region with a margin, masks it, drops the
structure channel and runs two fine networks: one separating scar from
myocardium, one separating all pathology (scar and edema) from myocardium.
Their outputs are merged into the four-label map, optionally after a
majority vote over several independently trained learners.
"""

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from . import das, kernels
from . import networks as nw
from .errors import ConfigError, TrainingError
from .losses import LossConfig, hybrid_layer_loss, dice_loss, weighted_total_loss
from .metrics import metric_dice
from .synthdata import BG, EDEMA, MYO, SCAR, lv_region

ROLES = ("scar", "pathology")
# fine-network label sets: 0 background, 1 myocardium, 2 scar / pathology
ROLE_MAPS = {
    "scar": np.array([0, 1, 2, 1], dtype=np.int64),
    "pathology": np.array([0, 1, 2, 2], dtype=np.int64),
}
ROLE_CLASSES = {
    "scar": ((1, "myocardium"), (2, "scar")),
    "pathology": ((1, "myocardium"), (2, "pathology")),
}
MERGED_CLASSES = ((MYO, "myocardium"), (SCAR, "scar"), (EDEMA, "edema"))
OPTIMAL_ALPHA = (0.156, 0.200, 0.240, 0.404)


@dataclass
class PipelineConfig:
    coarse_size: int = 96
    margin: int = 10
    fine_size: int = 48
    epochs_fixed: int = 60
    epochs_auto: int = 20
    coarse_epochs: int = 30
    K: int = 10
    lambda_ce: float = 0.25
    batch_size: int = 16
    lr: float = 1e-3
    controller_lr: float = 1e-3
    gamma: float = 0.99
    step: float = 0.15
    base_width: int = 4
    convs_per_block: int = 2
    attention: bool = True
    deep_supervision: bool = True
    augment: bool = True
    roi_source: str = "gt"
    seed: int = 0

    def __post_init__(self):
        if self.fine_size % 8:
            raise ConfigError(f"fine_size must be divisible by 8, got {self.fine_size}")
        if self.coarse_size % 8:
            raise ConfigError(f"coarse_size must be divisible by 8, got {self.coarse_size}")
        if self.margin < 0:
            raise ConfigError("margin must be >= 0")
        if self.epochs_fixed < 0 or self.epochs_auto < 0 or self.epochs_fixed + self.epochs_auto < 1:
            raise ConfigError("training needs at least one epoch")
        if self.K < 1 or self.batch_size < 1:
            raise ConfigError("K and batch_size must be positive")
        if self.roi_source not in ("gt", "coarse"):
            raise ConfigError(f"roi_source must be 'gt' or 'coarse', got {self.roi_source!r}")

    @property
    def loss(self):
        return LossConfig(lambda_ce=self.lambda_ce)

    def fine_net_config(self):
        return nw.fine_config(base_width=self.base_width, convs_per_block=self.convs_per_block,
                              attention=self.attention, deep_supervision=self.deep_supervision)

    def coarse_net_config(self):
        return nw.vanilla_config(base_width=self.base_width, convs_per_block=self.convs_per_block)


@dataclass
class EnsembleConfig:
    n_learners: int = 3
    beta_perturb: float = 0.1
    seeds: tuple = ()

    def __post_init__(self):
        if self.n_learners < 1 or self.n_learners % 2 == 0:
            raise ConfigError(f"n_learners must be odd, got {self.n_learners}")

    def learner_seed(self, base, i):
        return self.seeds[i] if i < len(self.seeds) else base + 1000 * (i + 1)


@dataclass(frozen=True)
class ROI:
    row0: int
    row1: int
    col0: int
    col1: int

    @property
    def shape(self):
        return self.row1 - self.row0 + 1, self.col1 - self.col0 + 1

    def slices(self):
        return slice(self.row0, self.row1 + 1), slice(self.col0, self.col1 + 1)


# ---------------------------------------------------------------------------
# Geometry helpers


def crop_roi(mask, margin, shape=None):
    """Bounding box of ``mask`` grown by ``margin`` and clipped to the image.

    An empty mask yields the whole image.
    """
    mask = np.asarray(mask).astype(bool)
    H, W = shape if shape is not None else mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return ROI(0, H - 1, 0, W - 1)
    return ROI(max(0, rows[0] - margin), min(H - 1, rows[-1] + margin),
               max(0, cols[0] - margin), min(W - 1, cols[-1] + margin))


def mask_apply(image, mask):
    """Element-wise product of an image (C, H, W) with a binary (H, W) mask."""
    mask = np.asarray(mask, dtype=np.float64)
    if isinstance(image, ad.Tensor):
        return ad.mul(image, mask)
    return np.asarray(image, dtype=np.float64) * mask


def _positions(n_out, n_in):
    if n_out == 1:
        return np.zeros(1)
    return np.arange(n_out) * (n_in - 1) / (n_out - 1)


def _linear_matrix(n_out, n_in):
    pos = _positions(n_out, n_in)
    A = np.zeros((n_out, n_in))
    if n_in == 1:
        A[:, 0] = 1.0
        return A
    lo = np.minimum(np.floor(pos).astype(np.intp), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    A[rows, lo] += 1.0 - frac
    A[rows, lo + 1] += frac
    return A


def resize_bilinear(img, out_hw):
    """Align-corners bilinear resize of the last two axes."""
    Ah = _linear_matrix(out_hw[0], img.shape[-2])
    Aw = _linear_matrix(out_hw[1], img.shape[-1])
    return np.matmul(np.matmul(Ah, img), Aw.T)


def resize_nearest(labels, out_hw):
    r = np.rint(_positions(out_hw[0], labels.shape[-2])).astype(np.intp)
    c = np.rint(_positions(out_hw[1], labels.shape[-1])).astype(np.intp)
    return labels[..., r[:, None], c[None, :]]


def paste(crop_labels, roi, shape):
    """Resize crop-space labels back to ``roi`` and place them in a zero canvas."""
    out = np.zeros(shape, dtype=np.asarray(crop_labels).dtype)
    out[roi.slices()] = resize_nearest(np.asarray(crop_labels), roi.shape)
    return out


def center_crop(img, size):
    H, W = img.shape[-2:]
    if H < size or W < size:
        raise ConfigError(f"image {H}x{W} is smaller than coarse_size {size}")
    r0, c0 = (H - size) // 2, (W - size) // 2
    return img[..., r0:r0 + size, c0:c0 + size], (r0, c0)


# ---------------------------------------------------------------------------
# Augmentation


def flip(image, mask, axis):
    """Flip along a spatial axis: 0 vertical, 1 horizontal."""
    return np.flip(image, axis=image.ndim - 2 + axis).copy(), np.flip(mask, axis=axis).copy()


def rotate(image, mask, angle_deg):
    if angle_deg == 0:
        return image.copy(), mask.copy()
    img = ndimage.rotate(image, angle_deg, axes=(-1, -2), reshape=False, order=1, mode="constant")
    lab = ndimage.rotate(mask, angle_deg, axes=(-1, -2), reshape=False, order=0, mode="constant")
    return np.clip(img, 0.0, None), lab


def augment(image, mask, rng, max_rotation=10.0, gain=(0.9, 1.1)):
    """Random flips, rotation up to ``max_rotation`` degrees, global brightness
    and per-channel gain. Labels follow with nearest-neighbour resampling."""
    if rng.random() < 0.5:
        image, mask = flip(image, mask, 1)
    if rng.random() < 0.5:
        image, mask = flip(image, mask, 0)
    image, mask = rotate(image, mask, rng.uniform(-max_rotation, max_rotation))
    bright = rng.uniform(*gain)
    sat = rng.uniform(*gain, size=image.shape[0]).reshape(-1, 1, 1)
    return image * bright * sat, mask


# ---------------------------------------------------------------------------
# Fine-stage data


@dataclass
class FineData:
    case_ids: list
    X: np.ndarray  # (N, 2, S, S) masked crops, structure channel dropped
    Y: np.ndarray  # (N, S, S) role labels
    rois: list
    full_labels: list  # original 4-code label maps, for evaluation in image space
    role: str

    def __len__(self):
        return len(self.case_ids)


def fine_sample(case, lv_mask, cfg, role):
    roi = crop_roi(lv_mask, cfg.margin)
    rs, cs = roi.slices()
    size = (cfg.fine_size, cfg.fine_size)
    img = resize_bilinear(case.images[1:, rs, cs], size)
    lv = resize_nearest(np.asarray(lv_mask)[rs, cs].astype(np.uint8), size)
    lab = ROLE_MAPS[role][resize_nearest(case.labels[rs, cs], size)]
    return mask_apply(img, lv), lab, roi


def build_fine_data(cases, cfg, role, lv_masks=None):
    if role not in ROLES:
        raise ConfigError(f"unknown role {role!r}")
    xs, ys, rois = [], [], []
    for i, case in enumerate(cases):
        lv = lv_region(case.labels) if lv_masks is None else lv_masks[i]
        x, y, roi = fine_sample(case, lv, cfg, role)
        xs.append(x)
        ys.append(y)
        rois.append(roi)
    S = cfg.fine_size
    X = np.stack(xs) if xs else np.zeros((0, 2, S, S))
    Y = np.stack(ys) if ys else np.zeros((0, S, S), dtype=np.int64)
    return FineData([c.case_id for c in cases], X, Y, rois, [c.labels for c in cases], role)


# ---------------------------------------------------------------------------
# Training primitives


def _rng(*key):
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def train_epoch(net, adam, X, Y, alpha, loss_cfg, batch_size, rng, augment_on=True, dice_only=False):
    """One shuffled pass over ``(X, Y)``; returns the mean total loss."""
    order = rng.permutation(len(X))
    params = net.parameters()
    total = 0.0
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        xb, yb = X[idx], Y[idx]
        if augment_on:
            pairs = [augment(x, y, rng) for x, y in zip(xb, yb)]
            xb = np.stack([p[0] for p in pairs])
            yb = np.stack([p[1] for p in pairs])
        xb = np.ascontiguousarray(xb.transpose(1, 0, 2, 3))
        with np.errstate(over="ignore", invalid="ignore"), ad.Tape() as tape:
            outs = net.forward(xb)
            if dice_only:
                layer = [dice_loss(ad.softmax_channel(o), ad.one_hot(yb, o.shape[0]), loss_cfg.eps) for o in outs]
            else:
                layer = [hybrid_layer_loss(o, yb, loss_cfg) for o in outs]
            loss = weighted_total_loss(layer, alpha)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at batch starting {start}")
            tape.backward(loss)
        ad.adam_step(params, [p.grad for p in params], adam)
        net.zero_grad()
        total += value * len(idx)
    return total / max(1, len(X))


def predict_proba(net, X, batch_size=32):
    """Final-head softmax for ``X`` (N, C, H, W); returns (N, classes, H, W)."""
    out = []
    with ad.no_record(), np.errstate(over="ignore", invalid="ignore"):
        for s in range(0, len(X), batch_size):
            xb = np.ascontiguousarray(X[s:s + batch_size].transpose(1, 0, 2, 3))
            logits = net.forward(xb)[-1]
            out.append(ad.softmax_channel(logits).data.transpose(1, 0, 2, 3))
    return np.concatenate(out) if out else np.zeros((0,))


def foreground_dice(pred, Y, n_classes):
    """Mean over cases and foreground classes of the binary Dice."""
    scores = [metric_dice(p == c, y == c) for p, y in zip(pred, Y) for c in range(1, n_classes)]
    return float(np.mean(scores)) if scores else 0.0


def class_dice(pred, Y, code):
    return float(np.mean([metric_dice(p == code, y == code) for p, y in zip(pred, Y)]))


def _workers():
    try:
        return max(1, int(os.environ.get("AWSUP_THREADS", "1")))
    except ValueError:
        raise ConfigError("AWSUP_THREADS must be an integer") from None


def map_jobs(fn, jobs):
    """``[fn(j) for j in jobs]``, in worker processes when AWSUP_THREADS > 1."""
    n = min(_workers(), len(jobs))
    if n <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, jobs))


def _replica_job(job):
    net, adam, train, val, alpha, cfg, key = job
    rng = _rng(*key)
    try:
        train_epoch(net, adam, train[0], train[1], alpha, cfg.loss, cfg.batch_size, rng, cfg.augment)
    except TrainingError as exc:
        raise TrainingError(f"replica {key[-1]}: {exc}") from exc
    pred = predict_proba(net, val[0]).argmax(axis=1)
    eps = foreground_dice(pred, val[1], net.cfg.num_classes)
    return net, adam, eps


# ---------------------------------------------------------------------------
# Fine-stage training


@dataclass
class FineResult:
    net: nw.UNet
    adam: ad.AdamState
    role: str
    mode: str
    beta: np.ndarray
    trace: list = field(default_factory=list)
    search: das.WeightSearch = None

    @property
    def alpha(self):
        return das.softmax_weights(self.beta)


def _check_epoch(fn, where):
    try:
        return fn()
    except TrainingError as exc:
        raise TrainingError(f"{where}: {exc}") from exc


def train_fixed_phase(cfg, train, seed, alpha, epochs, net=None, adam=None, tag=1):
    """``epochs`` epochs of deep supervision with constant head weights."""
    if net is None:
        net = nw.UNet(cfg.fine_net_config(), seed=seed)
        adam = ad.AdamState(net.parameters(), lr=cfg.lr)
    if not cfg.deep_supervision:
        alpha = [1.0]
    for e in range(epochs):
        rng = _rng(seed, tag, e)
        _check_epoch(lambda: train_epoch(net, adam, train.X, train.Y, alpha, cfg.loss,
                                         cfg.batch_size, rng, cfg.augment),
                     f"epoch {e} (fixed weights)")
    return net, adam


def run_search(cfg, net, adam, train, val, seed, mode, beta_init=das.BETA_INIT, on_epoch=None):
    """Auto-weighted (``auto``) or best-pick-only (``norl``) phase.

    Each epoch: K replicas of the current network train for one epoch under
    sampled head weights, are scored on ``val``, and training continues from
    the best one.
    """
    crng = _rng(seed, 3)
    state = das.ControllerState.initial(crng, lr=cfg.controller_lr, gamma=cfg.gamma, step=cfg.step)
    search = das.WeightSearch(mode, state, np.array(beta_init, dtype=np.float64), K=cfg.K)
    trace = []
    for t in range(cfg.epochs_auto):
        samples = search.propose(crng)
        jobs = [(net.clone(), adam.copy(), (train.X, train.Y), (val.X, val.Y), s.alpha, cfg, (seed, 2, t, s.replica))
                for s in samples]
        try:
            results = map_jobs(_replica_job, jobs)
        except TrainingError as exc:
            raise TrainingError(f"auto-weighted epoch {t}: {exc}") from exc
        for s, (_, _, eps) in zip(samples, results):
            s.eps = eps
        best = search.finish(samples)
        net, adam, _ = results[best]
        # keep the attention-mask range seen by every replica, not just the winner
        net.mask_min = min(r[0].mask_min for r in results)
        net.mask_max = max(r[0].mask_max for r in results)
        rows = das.trace_rows(t, samples, state.baseline)
        trace.extend(rows)
        if on_epoch is not None:
            on_epoch(t, rows)
    return net, adam, search, trace


def fine_train(cfg, train, val, mode="auto", seed=None, beta_init=das.BETA_INIT, fixed_alpha=None, on_epoch=None):
    """Full fine-network schedule.

    ``epochs_fixed`` epochs with ``softmax(beta_init)``, then ``epochs_auto``
    epochs of weight search (``auto``/``norl``) or of the same fixed weights
    (``fixed``; ``fixed_alpha`` overrides the weights for both phases).
    """
    seed = cfg.seed if seed is None else seed
    beta_init = np.asarray(beta_init, dtype=np.float64)
    alpha0 = das.softmax_weights(beta_init) if fixed_alpha is None else np.asarray(fixed_alpha)
    if mode == "fixed":
        net, adam = train_fixed_phase(cfg, train, seed, alpha0, cfg.epochs_fixed + cfg.epochs_auto)
        beta = beta_init if fixed_alpha is None else np.log(np.asarray(fixed_alpha))
        return FineResult(net, adam, train.role, mode, beta)
    if mode not in ("auto", "norl"):
        raise ConfigError(f"unknown training mode {mode!r}")
    net, adam = train_fixed_phase(cfg, train, seed, alpha0, cfg.epochs_fixed)
    if cfg.epochs_auto == 0:
        return FineResult(net, adam, train.role, mode, beta_init)
    net, adam, search, trace = run_search(cfg, net, adam, train, val, seed, mode, beta_init, on_epoch)
    return FineResult(net, adam, train.role, mode, search.beta.copy(), trace, search)


def train_ensemble(cfg, ens, train, val, mode="auto", seed=None):
    """Independently trained learners whose initial beta is jittered by N(0, beta_perturb)."""
    seed = cfg.seed if seed is None else seed
    out = []
    for i in range(ens.n_learners):
        s = ens.learner_seed(seed, i)
        jitter = _rng(s, 7).normal(0.0, ens.beta_perturb, size=das.N_LAYERS)
        out.append(fine_train(cfg, train, val, mode, seed=s, beta_init=np.array(das.BETA_INIT) + jitter))
    return out


# ---------------------------------------------------------------------------
# Coarse cascade


@dataclass
class CoarseModel:
    net1: nw.UNet
    net2: nw.UNet
    margin: int
    coarse_size: int
    crop_size: int


def _coarse_inputs(cases, size):
    return np.stack([center_crop(c.images, size)[0] for c in cases])


def _refine_sample(image, lv, margin, crop_size):
    roi = crop_roi(lv, margin)
    rs, cs = roi.slices()
    return resize_bilinear(image[:, rs, cs], (crop_size, crop_size)), roi


def coarse_train(cases, cfg, seed=None, epochs=None):
    """Train both cascade networks with the Dice loss on LV-region targets."""
    seed = cfg.seed if seed is None else seed
    epochs = cfg.coarse_epochs if epochs is None else epochs
    size, crop = cfg.coarse_size, cfg.fine_size
    X1 = _coarse_inputs(cases, size)
    Y1 = np.stack([center_crop(lv_region(c.labels), size)[0] for c in cases]).astype(np.int64)
    X2, Y2 = [], []
    for x, y in zip(X1, Y1):
        xc, roi = _refine_sample(x, y, cfg.margin, crop)
        X2.append(xc)
        rs, cs = roi.slices()
        Y2.append(resize_nearest(y[rs, cs], (crop, crop)))
    X2, Y2 = np.stack(X2), np.stack(Y2)
    loss_cfg = LossConfig(lambda_ce=0.0)
    nets = []
    for k, (X, Y) in enumerate(((X1, Y1), (X2, Y2)), start=1):
        net = nw.UNet(cfg.coarse_net_config(), seed=seed + 100 * k)
        adam = ad.AdamState(net.parameters(), lr=cfg.lr)
        for e in range(epochs):
            _check_epoch(lambda: train_epoch(net, adam, X, Y, [1.0], loss_cfg, cfg.batch_size,
                                             _rng(seed, 10 + k, e), cfg.augment, dice_only=True),
                         f"coarse net {k} epoch {e}")
        nets.append(net)
    return CoarseModel(nets[0], nets[1], cfg.margin, size, crop)


def coarse_stage(model, cases):
    """LV-region mask per case, at each case's full image size."""
    size = model.coarse_size
    X1 = _coarse_inputs(cases, size)
    m1 = predict_proba(model.net1, X1).argmax(axis=1)
    out = []
    for case, x, m in zip(cases, X1, m1):
        xc, roi = _refine_sample(x, m, model.margin, model.crop_size)
        m2 = predict_proba(model.net2, xc[None]).argmax(axis=1)[0]
        lv = paste(m2.astype(np.uint8), roi, (size, size))
        full = np.zeros(case.labels.shape, dtype=bool)
        _, (r0, c0) = center_crop(case.labels, size)
        full[r0:r0 + size, c0:c0 + size] = lv > 0
        out.append(full)
    return out


# ---------------------------------------------------------------------------
# Inference, merging and voting


def predict_cases(net, data):
    """Per-case (probabilities, crop labels, image-space labels)."""
    proba = predict_proba(net, data.X)
    crop = proba.argmax(axis=1)
    full = [paste(c, roi, lab.shape) for c, roi, lab in zip(crop, data.rois, data.full_labels)]
    return proba, crop, full


def dual_merge(scar_pred, pathology_pred):
    """Merge the two fine outputs: scar > edema > myocardium > background.

    Edema is pathology without scar; myocardium is the union of both
    networks' myocardium calls.
    """
    s = np.asarray(scar_pred)
    p = np.asarray(pathology_pred)
    out = np.full(s.shape, BG, dtype=np.uint8)
    out[(s == 1) | (p == 1)] = MYO
    out[p == 2] = EDEMA
    out[s == 2] = SCAR
    return out


def ensemble_vote(predictions, probabilities=None, n_classes=None):
    """Per-pixel majority label over learners.

    Ties go to the tied class with the highest summed probability across
    learners (when ``probabilities`` of shape (L, C, H, W) is given), then to
    the lowest class code.
    """
    preds = np.asarray(predictions).astype(np.int64)
    if n_classes is None:
        n_classes = int(preds.max()) + 1 if probabilities is None else np.asarray(probabilities).shape[1]
    counts = kernels.vote_counts(preds, n_classes)
    top = counts.max(axis=0)
    tied = counts == top
    if probabilities is None:
        return tied.argmax(axis=0).astype(preds.dtype)
    psum = np.asarray(probabilities, dtype=np.float64).sum(axis=0)
    score = np.where(tied, psum, -np.inf)
    return score.argmax(axis=0).astype(preds.dtype)
