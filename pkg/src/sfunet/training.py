"""Training recipe: combined cross-entropy + Dice loss, Adam with poly
learning-rate decay, flip/rotation augmentation, the epoch loop with top-3
checkpoint retention, and the finite-difference gradient-check harness.

The loop is bit-deterministic given (seed, config, dataset order): every
random draw flows from one seeded generator, and the metric log uses fixed
numeric formatting.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace

import numpy as np

from . import blocks, metrics, network, ops
from .data import SegmentationSample
from .errors import ConfigError, DataError, NumericError
from .tensor import GradTape, ParameterRegistry, RealTensor4, active_tape

# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    epochs: int = 200
    batch_size: int = 8
    poly_power: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0  # decoupled when nonzero
    dice_epsilon: float = 1e-5
    w_ce: float = 1.0
    w_dice: float = 1.0
    seed: int = 0
    aug_hflip: bool = True
    aug_vflip: bool = True
    aug_rot90: bool = True
    aug_rotate_any: bool = False  # arbitrary-angle mode, nearest-neighbor labels

    #: probability of each enabled augmentation
    AUG_PROB = 0.5

    def validate(self) -> None:
        checks = [
            (self.lr0 > 0, f"lr0 must be > 0, got {self.lr0}"),
            (self.epochs >= 1, f"epochs must be >= 1, got {self.epochs}"),
            (self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}"),
            (self.poly_power > 0, f"poly_power must be > 0, got {self.poly_power}"),
            (0 <= self.beta1 < 1, f"beta1 must lie in [0, 1), got {self.beta1}"),
            (0 <= self.beta2 < 1, f"beta2 must lie in [0, 1), got {self.beta2}"),
            (self.adam_eps > 0, f"adam_eps must be > 0, got {self.adam_eps}"),
            (self.weight_decay >= 0, f"weight_decay must be >= 0, got {self.weight_decay}"),
            (self.dice_epsilon > 0, f"dice_epsilon must be > 0, got {self.dice_epsilon}"),
            (self.w_ce >= 0 and self.w_dice >= 0, "loss weights must be >= 0"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got '{value}'")


_TRAIN_FIELD_PARSERS = {
    "lr0": float,
    "epochs": int,
    "batch_size": int,
    "poly_power": float,
    "beta1": float,
    "beta2": float,
    "adam_eps": float,
    "weight_decay": float,
    "dice_epsilon": float,
    "w_ce": float,
    "w_dice": float,
    "seed": int,
    "aug_hflip": _parse_bool,
    "aug_vflip": _parse_bool,
    "aug_rot90": _parse_bool,
    "aug_rotate_any": _parse_bool,
}

#: keys accepted in the [data] section of config files
DATA_SECTION_KEYS = ("aug_hflip", "aug_vflip", "aug_rot90", "aug_rotate_any")


def set_train_field(cfg: TrainConfig, key: str, value: str) -> None:
    parser = _TRAIN_FIELD_PARSERS.get(key)
    if parser is None:
        raise ConfigError(f"unknown train config key '{key}'")
    try:
        setattr(cfg, key, parser(value))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for '{key}': {value!r} ({exc})") from None


# ---------------------------------------------------------------------------
# losses


def _softmax_parts(logits: RealTensor4, target: np.ndarray):
    z = logits.data
    n, k, h, w = logits.dims
    t = np.asarray(target)
    if t.shape != (n, h, w):
        raise DataError(f"target shape {t.shape} does not match logits {logits.dims}")
    if not np.issubdtype(t.dtype, np.integer):
        raise DataError(f"target must hold integer class indices, got dtype {t.dtype}")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise DataError(f"target class indices must lie in [0, {k}), got range [{t.min()}, {t.max()}]")
    s = z - z.max(axis=1, keepdims=True)
    e = np.exp(s)
    denom = e.sum(axis=1, keepdims=True)
    p = e / denom
    logp = s - np.log(denom)
    return t, p, logp


def _onehot(target: np.ndarray, k: int, dtype) -> np.ndarray:
    n, h, w = target.shape
    out = np.zeros((n, k, h, w), dtype=dtype)
    np.put_along_axis(out, target[:, None], 1.0, axis=1)
    return out


def _scalar(value: float, dtype) -> RealTensor4:
    return RealTensor4(np.full((1, 1, 1, 1), value, dtype=dtype), copy=False)


def softmax_ce_loss(logits: RealTensor4, target: np.ndarray) -> RealTensor4:
    """Mean per-pixel cross entropy of softmax(logits) against integer labels."""
    t, p, logp = _softmax_parts(logits, target)
    n, k, h, w = logits.dims
    picked = np.take_along_axis(logp, t[:, None], axis=1)
    loss = _scalar(-picked.mean(), logits.dtype)

    def backward(g):
        onehot = _onehot(t, k, p.dtype)
        return (g.reshape(())[()] * (p - onehot) / (n * h * w),)

    tape = active_tape()
    if tape is not None:
        tape.record(loss, (logits,), backward)
    return loss


def dice_loss(logits: RealTensor4, target: np.ndarray, epsilon: float = 1e-5) -> RealTensor4:
    """1 - mean_k of the soft Dice overlap between softmax(logits) and labels.

    Class sums pool over the whole batch (N*H*W); all K classes participate
    in the mean, background included.
    """
    t, p, _ = _softmax_parts(logits, target)
    n, k, h, w = logits.dims
    onehot = _onehot(t, k, p.dtype)
    inter = (p * onehot).sum(axis=(0, 2, 3))
    psum = p.sum(axis=(0, 2, 3))
    gsum = onehot.sum(axis=(0, 2, 3))
    denom = psum + gsum + epsilon
    dice_k = (2.0 * inter + epsilon) / denom
    loss = _scalar(1.0 - dice_k.mean(), logits.dtype)

    def backward(g):
        dldp = -(2.0 * onehot - dice_k[None, :, None, None]) / (k * denom[None, :, None, None])
        dldz = p * (dldp - (dldp * p).sum(axis=1, keepdims=True))
        return (g.reshape(())[()] * dldz,)

    tape = active_tape()
    if tape is not None:
        tape.record(loss, (logits,), backward)
    return loss


def total_loss(logits: RealTensor4, target: np.ndarray, cfg: TrainConfig) -> RealTensor4:
    ce = softmax_ce_loss(logits, target)
    dl = dice_loss(logits, target, cfg.dice_epsilon)
    return ops.add(ops.scale(ce, cfg.w_ce), ops.scale(dl, cfg.w_dice))


# ---------------------------------------------------------------------------
# optimizer


def poly_lr(iteration: int, max_iter: int, lr0: float, power: float) -> float:
    """lr0 * (1 - iteration/max_iter) ** power."""
    if max_iter <= 0:
        raise ConfigError(f"max_iter must be positive, got {max_iter}")
    if not 0 <= iteration <= max_iter:
        raise ConfigError(f"iteration {iteration} outside [0, {max_iter}]")
    return lr0 * (1.0 - iteration / max_iter) ** power


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, registry: ParameterRegistry):
        self.m = {p.name: np.zeros(p.dims, dtype=p.value.dtype) for p in registry if p.trainable}
        self.v = {p.name: np.zeros(p.dims, dtype=p.value.dtype) for p in registry if p.trainable}
        self.step = 0

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {"adam.step": np.full((1, 1, 1, 1), float(self.step))}
        for name, m in self.m.items():
            out[f"adam.m.{name}"] = m
        for name, v in self.v.items():
            out[f"adam.v.{name}"] = v
        return out

    @classmethod
    def from_tensors(cls, registry: ParameterRegistry, tensors: dict[str, np.ndarray]) -> "AdamState":
        state = cls(registry)
        state.step = int(tensors["adam.step"].reshape(())[()])
        for name in state.m:
            state.m[name] = tensors[f"adam.m.{name}"].copy()
            state.v[name] = tensors[f"adam.v.{name}"].copy()
        return state


def adam_step(registry: ParameterRegistry, state: AdamState, lr: float, cfg: TrainConfig) -> None:
    """Bias-corrected Adam update with optional decoupled weight decay.

    Gradients must have been populated by a backward pass since the last
    zero-grad; the caller zeroes them afterwards.
    """
    if registry.grad_events() == 0:
        raise NumericError("adam_step called with no gradients populated since the last zero-grad")
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for p in registry:
        if not p.trainable:
            continue
        g = p._grad
        m = state.m[p.name]
        v = state.v[p.name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        denom = np.sqrt(v)
        denom *= 1.0 / np.sqrt(bc2)
        denom += cfg.adam_eps
        update = m / denom
        update *= lr / bc1
        if cfg.weight_decay > 0:
            update += (lr * cfg.weight_decay) * p.value.data
        np.subtract(p.value.data, update, out=update)
        p.assign(update, copy=False)


# ---------------------------------------------------------------------------
# augmentation


def _sample_bilinear_zero(img: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2:]
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    ty, tx = sy - y0, sx - x0
    acc = np.zeros(img.shape[:-2] + sy.shape, dtype=img.dtype)
    for yy, wy in ((y0, 1.0 - ty), (y0 + 1, ty)):
        for xx, wx in ((x0, 1.0 - tx), (x0 + 1, tx)):
            inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            yc = np.clip(yy, 0, h - 1)
            xc = np.clip(xx, 0, w - 1)
            acc += np.where(inside, wy * wx, 0.0) * img[..., yc, xc]
    return acc


def _rotate_pair(img: np.ndarray, label: np.ndarray, theta: float):
    """Rotate image (bilinear) and label (nearest) about the center, zero fill."""
    h, w = label.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w]
    dy, dx = ys - cy, xs - cx
    sy = cy + math.cos(theta) * dy - math.sin(theta) * dx
    sx = cx + math.sin(theta) * dy + math.cos(theta) * dx
    new_img = _sample_bilinear_zero(img, sy, sx)
    ny = np.round(sy).astype(np.intp)
    nx = np.round(sx).astype(np.intp)
    inside = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
    new_label = np.zeros_like(label)
    new_label[inside] = label[ny[inside], nx[inside]]
    return new_img, new_label


def augment(sample: SegmentationSample, rng: np.random.Generator, cfg: TrainConfig) -> SegmentationSample:
    """Apply each enabled transform with probability 0.5, identically to
    image and label. Flips and right-angle rotations are index permutations;
    non-square inputs restrict rot90 to 180 degrees."""
    img = sample.image.data[0]
    label = sample.label
    changed = False
    if cfg.aug_hflip and rng.random() < cfg.AUG_PROB:
        img, label, changed = img[:, :, ::-1], label[:, ::-1], True
    if cfg.aug_vflip and rng.random() < cfg.AUG_PROB:
        img, label, changed = img[:, ::-1, :], label[::-1, :], True
    if cfg.aug_rot90 and rng.random() < cfg.AUG_PROB:
        k = int(rng.integers(1, 4))
        if label.shape[0] != label.shape[1]:
            k = 2
        img = np.rot90(img, k, axes=(1, 2))
        label = np.rot90(label, k, axes=(0, 1))
        changed = True
    if cfg.aug_rotate_any and rng.random() < cfg.AUG_PROB:
        theta = float(rng.uniform(0.0, 2.0 * math.pi))
        img, label = _rotate_pair(img, label, theta)
        changed = True
    if not changed:
        return sample
    return SegmentationSample(RealTensor4(img[None].copy()), np.ascontiguousarray(label), sample.id)


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_dsc: float
    val_iou: float

    def log_line(self) -> str:
        return (
            f"{self.epoch}\t{self.lr:.8e}\t{self.train_loss:.6f}"
            f"\t{self.val_dsc:.6f}\t{self.val_iou:.6f}"
        )


@dataclass
class TrainResult:
    epochs: list[EpochStats]
    log_lines: list[str]
    best_paths: list[str]


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


class _TopK:
    """Keeps the K best (iou, epoch) snapshots on disk; earlier epoch wins ties."""

    def __init__(self, out_dir: str | None, k: int = 3):
        self.out_dir = out_dir
        self.k = k
        self.entries: list[tuple[float, int, str]] = []

    def offer(self, iou: float, epoch: int, model) -> None:
        if self.out_dir is None:
            return
        path = os.path.join(self.out_dir, f"ckpt_epoch{epoch}.sfun")
        self.entries.append((iou, epoch, path))
        self.entries.sort(key=lambda e: (-e[0], e[1]))
        if (iou, epoch, path) in self.entries[: self.k]:
            network.save(model, path)
        if len(self.entries) > self.k:
            _, _, dropped = self.entries.pop()
            if os.path.exists(dropped):
                os.remove(dropped)

    def finalize(self) -> list[str]:
        paths = []
        if self.out_dir is None:
            return paths
        for rank, (_, _, path) in enumerate(self.entries, start=1):
            final = os.path.join(self.out_dir, f"best_{rank}.sfun")
            os.replace(path, final)
            paths.append(final)
        return paths


def train_loop(model, train_samples, val_samples, cfg: TrainConfig,
               out_dir: str | None = None) -> TrainResult:
    """Run the full recipe; returns per-epoch stats and best-checkpoint paths.

    Per epoch: seeded shuffle, augmentation, forward, combined loss, backward,
    Adam with the poly schedule advanced per iteration, then a validation
    DSC/IoU evaluation. The top three val-IoU epochs are retained as
    checkpoints (``best_1..3.sfun``). With an empty validation split the
    training split doubles as the evaluation set.
    """
    cfg.validate()
    if not train_samples:
        raise DataError("training split is empty")
    eval_samples = val_samples if val_samples else train_samples
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "train.log") if out_dir is not None else None
    if log_path is not None and os.path.exists(log_path):
        os.remove(log_path)

    rng = np.random.default_rng(cfg.seed)
    state = AdamState(model.registry)
    dtype = model.config.dtype
    iters_per_epoch = math.ceil(len(train_samples) / cfg.batch_size)
    max_iter = cfg.epochs * iters_per_epoch
    iteration = 0
    top = _TopK(out_dir)
    stats_rows: list[EpochStats] = []
    log_lines: list[str] = []

    def emit(line: str) -> None:
        log_lines.append(line)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_samples))
        epoch_lr = poly_lr(iteration, max_iter, cfg.lr0, cfg.poly_power)
        batch_losses = []
        for idx in _batches(order, cfg.batch_size):
            samples = [augment(train_samples[i], rng, cfg) for i in idx]
            images = np.concatenate([s.image.data for s in samples]).astype(dtype)
            labels = np.stack([s.label for s in samples])
            lr = poly_lr(iteration, max_iter, cfg.lr0, cfg.poly_power)
            tape = GradTape()
            with tape:
                logits = model.forward(RealTensor4(images, copy=False))
                loss = total_loss(logits, labels, cfg)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                emit(f"error\tnon-finite loss at epoch {epoch} iteration {iteration}")
                raise NumericError(f"non-finite loss at epoch {epoch}, iteration {iteration}")
            tape.backward(loss)
            adam_step(model.registry, state, lr, cfg)
            model.registry.zero_grad()
            batch_losses.append(loss_value)
            iteration += 1
        report = metrics.evaluate(model, eval_samples, model.config.n_classes)
        row = EpochStats(epoch, epoch_lr, float(np.mean(batch_losses)), report.mean_dsc, report.mean_iou)
        stats_rows.append(row)
        emit(row.log_line())
        top.offer(report.mean_iou, epoch, model)

    return TrainResult(stats_rows, log_lines, top.finalize())


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradcheckEntry:
    name: str
    rel_error: float


@dataclass
class GradcheckReport:
    block: str
    tolerance: float
    entries: list[GradcheckEntry]

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.rel_error < self.tolerance for e in self.entries)

    def format_lines(self) -> list[str]:
        lines = [f"{e.name}\t{e.rel_error:.3e}\t{'pass' if e.rel_error < self.tolerance else 'FAIL'}"
                 for e in self.entries]
        lines.append(f"{self.block}\tmax={self.max_rel_error:.3e}\t{'PASS' if self.passed else 'FAIL'}")
        return lines


GRADCHECK_BLOCKS = ("encoder", "mpca", "sa", "fsa", "decoder", "head", "ce_loss", "dice_loss")

_FD_EPS = 1e-4


def _rand_tensor(rng, dims) -> RealTensor4:
    return RealTensor4(rng.uniform(-1.0, 1.0, size=dims))


def _build_gradcheck_case(block: str, seed: int):
    """Tiny double-precision instance of the named block at 4x4 resolution.

    Returns (registry, loss_fn); loss_fn recomputes the scalar loss from the
    registry's current parameter values.
    """
    rng = np.random.default_rng(seed)
    reg = ParameterRegistry()
    dtype = np.float64

    def weighted(out_dims, forward):
        w = _rand_tensor(rng, out_dims)

        def loss_fn():
            return ops.sum_all(ops.broadcast_mul(forward(), w))

        return loss_fn

    if block == "encoder":
        stage = blocks.EncoderStage(reg, "enc", 2, 3, 2, rng, dtype)
        x = _rand_tensor(rng, (1, 2, 4, 4))
        return reg, weighted((1, 3, 4, 4), lambda: stage(x))
    if block == "mpca":
        mpca = blocks.MPCABlock(reg, "mpca", 2, 3, rng, dtype)
        x_cur = _rand_tensor(rng, (1, 2, 4, 4))
        x_next = _rand_tensor(rng, (1, 3, 2, 2))
        return reg, weighted((1, 2, 4, 4), lambda: mpca(x_cur, x_next))
    if block == "sa":
        sa = blocks.SpatialAttention(reg, "sa", rng, dtype)
        x = _rand_tensor(rng, (1, 3, 4, 4))
        return reg, weighted((1, 3, 4, 4), lambda: sa(x))
    if block == "fsa":
        fsa = blocks.FSABlock(reg, "fsa", 2, (4, 4), 0.5, "broadcast", rng, dtype)
        x = _rand_tensor(rng, (1, 2, 4, 4))
        return reg, weighted((1, 2, 4, 4), lambda: fsa(x))
    if block == "decoder":
        dec = blocks.DecoderBlock(reg, "dec", 2, 3, rng, dtype)
        skip = _rand_tensor(rng, (1, 2, 4, 4))
        below = _rand_tensor(rng, (1, 3, 2, 2))
        return reg, weighted((1, 2, 4, 4), lambda: dec(skip, below))
    if block == "head":
        head = blocks.PredictionHead(reg, "head", 3, 2, rng, dtype)
        x = _rand_tensor(rng, (1, 3, 4, 4))
        return reg, weighted((1, 2, 4, 4), lambda: head(x))
    if block in ("ce_loss", "dice_loss"):
        logits = reg.create("logits", rng.uniform(-1.0, 1.0, size=(1, 3, 4, 4)))
        target = rng.integers(0, 3, size=(1, 4, 4))
        if block == "ce_loss":
            return reg, lambda: softmax_ce_loss(logits.value, target)
        return reg, lambda: dice_loss(logits.value, target)
    raise ConfigError(f"unknown gradcheck block '{block}' (known: {', '.join(GRADCHECK_BLOCKS)})")


def gradcheck(block: str, tolerance: float = 1e-4, seed: int = 0) -> GradcheckReport:
    """Central finite differences (eps=1e-4) against tape gradients for every
    parameter of the named block; the relative error per tensor is
    max|fd - analytic| / max(1, max|fd|, max|analytic|)."""
    reg, loss_fn = _build_gradcheck_case(block, seed)
    if len(reg) == 0:
        return GradcheckReport(block, tolerance, [])
    reg.zero_grad()
    tape = GradTape()
    with tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {p.name: p._grad.copy() for p in reg}
    entries = []
    for p in reg:
        base = p.value.data.copy()
        fd = np.zeros_like(base)
        flat = base.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            for sign in (1.0, -1.0):
                bumped = flat.copy()
                bumped[i] += sign * _FD_EPS
                p.assign(bumped.reshape(base.shape))
                fd_flat[i] += sign * loss_fn().item()
            fd_flat[i] /= 2.0 * _FD_EPS
        p.assign(base)
        an = analytic[p.name]
        scale_ref = max(1.0, float(np.abs(fd).max()), float(np.abs(an).max()))
        entries.append(GradcheckEntry(p.name, float(np.abs(fd - an).max()) / scale_ref))
    return GradcheckReport(block, tolerance, entries)


def gradcheck_all(tolerance: float = 1e-4, seed: int = 0) -> list[GradcheckReport]:
    return [gradcheck(block, tolerance, seed) for block in GRADCHECK_BLOCKS]


# ---------------------------------------------------------------------------
# ablation harness


ABLATION_VARIANTS = (
    ("baseline", False, False),
    ("fsa_only", False, True),
    ("mpca_only", True, False),
    ("full", True, True),
)


def ablation_table(model_cfg, train_cfg: TrainConfig, train_samples, val_samples) -> list[dict]:
    """Train all four MPCA/FSA on-off variants and report their val metrics.

    No ordering is asserted between variants; this is a comparison harness.
    """
    rows = []
    eval_samples = val_samples if val_samples else train_samples
    for name, use_mpca, use_fsa in ABLATION_VARIANTS:
        cfg_v = replace(model_cfg, use_mpca=use_mpca, use_fsa=use_fsa)
        model = network.SFUNet(cfg_v, seed=train_cfg.seed)
        train_loop(model, train_samples, val_samples, train_cfg)
        report = metrics.evaluate(model, eval_samples, cfg_v.n_classes)
        rows.append(
            {
                "variant": name,
                "mpca": use_mpca,
                "fsa": use_fsa,
                "params": model.registry.total_parameters(),
                "val_dsc": report.mean_dsc,
                "val_iou": report.mean_iou,
            }
        )
    return rows


def format_ablation_table(rows: list[dict]) -> str:
    lines = ["variant\tmpca\tfsa\tparams\tval_dsc\tval_iou"]
    for r in rows:
        lines.append(
            f"{r['variant']}\t{'yes' if r['mpca'] else 'no'}\t{'yes' if r['fsa'] else 'no'}"
            f"\t{r['params']}\t{r['val_dsc']:.6f}\t{r['val_iou']:.6f}"
        )
    return "\n".join(lines) + "\n"
