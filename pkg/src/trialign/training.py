"""Training loops: stage-0 bimodal pre-training of the frozen backbone,
the alternating-optimizer 3D alignment loop, fine-tuning, the linear
probe, and the finite-difference gradient checker.

Every batch, augmentation, and init draw is derived from (seed, step), so
a resumed run recomputes exactly the samples an uninterrupted run would
have seen; together with optimizer moments stored in the checkpoint this
makes resume bitwise identical.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .checkpoint import Checkpoint, snapshot
from .corpus import AugmentConfig, Batch, Manifest, load_batch, training_records
from .encoders import EncoderConfig, PointSetEncoder, TriModalModel, Vocab, tokenize_batch
from .losses import loss_3d, loss_prompt, pair_loss
from .prompts import init_prompts
from .seeding import derive_int, derive_rng


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass(frozen=True)
class OptimConfig:
    kind: str = "adamw"  # "adamw" (adaptive-moment) or "sgd" (stochastic-gradient)
    lr: float = 1e-3
    weight_decay: float = 0.0
    min_lr: float = 1e-6


@dataclass
class TrainConfig:
    batch_size: int = 32
    steps: int = 2000
    seed: int = 0
    tau: float = 0.07
    positive_mode: str = "class"  # "class" | "instance"
    n_points: int = 256
    eval_frac: float = 0.25
    use_3d2d: bool = True
    use_3dtext: bool = True
    use_prompts: bool = True
    optimizer_3d: OptimConfig = field(
        default_factory=lambda: OptimConfig("adamw", 5e-5, 0.05))
    optimizer_prompt: OptimConfig = field(
        default_factory=lambda: OptimConfig("sgd", 2e-3, 1e-4))
    optimizer_bimodal: OptimConfig = field(
        default_factory=lambda: OptimConfig("adamw", 3e-4, 0.01))
    optimizer_finetune: OptimConfig = field(
        default_factory=lambda: OptimConfig("adamw", 2e-4, 0.05))
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.positive_mode not in ("class", "instance"):
            raise ValueError("positive_mode must be 'class' or 'instance'")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        kwargs = dict(data)
        kwargs.pop("corpus", None)  # gen-data section of a shared config file
        for key in ("optimizer_3d", "optimizer_prompt", "optimizer_bimodal",
                    "optimizer_finetune"):
            if key in kwargs and isinstance(kwargs[key], dict):
                base = asdict(getattr(cls(), key))
                base.update(kwargs[key])
                kwargs[key] = OptimConfig(**base)
        if "encoder" in kwargs and isinstance(kwargs["encoder"], dict):
            kwargs["encoder"] = EncoderConfig(**kwargs["encoder"])
        if "augment" in kwargs and isinstance(kwargs["augment"], dict):
            kwargs["augment"] = AugmentConfig(**kwargs["augment"])
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_canonical_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_canonical_json().encode()).hexdigest()


def cosine_lr(lr0: float, min_lr: float, step: int, total: int) -> float:
    """Cosine decay from lr0 to min_lr over `total` steps, no warmup."""
    if total <= 1:
        return lr0
    t = min(step, total - 1) / (total - 1)
    return min_lr + 0.5 * (lr0 - min_lr) * (1.0 + math.cos(math.pi * t))


def make_optimizer(cfg: OptimConfig, params) -> torch.optim.Optimizer:
    params = list(params)
    if cfg.kind == "adamw":
        return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    if cfg.kind == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    raise ValueError(f"unknown optimizer kind {cfg.kind!r}")


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


# ---------------------------------------------------------------------------
# optimizer state <-> checkpoint extras

def optimizer_extras(optimizer: torch.optim.Optimizer, names: Sequence[str],
                     prefix: str) -> Dict[str, np.ndarray]:
    """Flatten AdamW moments (and the shared step count) into named arrays.

    SGD without momentum carries no state and produces nothing.
    """
    out: Dict[str, np.ndarray] = {}
    params = [p for g in optimizer.param_groups for p in g["params"]]
    for name, p in zip(names, params):
        state = optimizer.state.get(p, {})
        if not state:
            continue
        out[f"{prefix}/{name}/exp_avg"] = state["exp_avg"].numpy().astype(np.float32)
        out[f"{prefix}/{name}/exp_avg_sq"] = state["exp_avg_sq"].numpy().astype(np.float32)
        out[f"{prefix}/{name}/step"] = np.asarray([float(state["step"])], dtype=np.float32)
    return out


def restore_optimizer(optimizer: torch.optim.Optimizer, names: Sequence[str],
                      prefix: str, extras: Dict[str, np.ndarray]) -> None:
    params = [p for g in optimizer.param_groups for p in g["params"]]
    for name, p in zip(names, params):
        key = f"{prefix}/{name}/exp_avg"
        if key not in extras:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(extras[f"{prefix}/{name}/step"][0])),
            "exp_avg": torch.from_numpy(extras[key].copy()).reshape(p.shape),
            "exp_avg_sq": torch.from_numpy(
                extras[f"{prefix}/{name}/exp_avg_sq"].copy()).reshape(p.shape),
        }


# ---------------------------------------------------------------------------
# batches

def sample_indices(seed: int, tag: str, step: int, n: int, batch_size: int) -> np.ndarray:
    rng = derive_rng(seed, tag, step)
    return rng.choice(n, size=batch_size, replace=n < batch_size)


def batch_tensors(batch: Batch, vocab: Vocab, text_len: int, dtype=torch.float32):
    points = torch.from_numpy(batch.points).to(dtype)
    images = torch.from_numpy(batch.images).to(dtype)
    tokens, eos = tokenize_batch(batch.captions, vocab, text_len)
    labels = torch.from_numpy(batch.class_idx)
    return points, images, tokens, eos, labels


class TrainLog:
    """CSV training log: step, loss_3d, loss_p, lr_3d, lr_p."""

    COLUMNS = ("step", "loss_3d", "loss_p", "lr_3d", "lr_p")

    def __init__(self, path: Optional[Path] = None, append: bool = False):
        self.path = Path(path) if path else None
        self.rows: List[dict] = []
        if self.path and not append:
            self.path.write_text(",".join(self.COLUMNS) + "\n")
        elif self.path and append and not self.path.exists():
            self.path.write_text(",".join(self.COLUMNS) + "\n")

    def add(self, step: int, loss_3d_val=None, loss_p_val=None,
            lr_3d=None, lr_p=None) -> None:
        row = {"step": step, "loss_3d": loss_3d_val, "loss_p": loss_p_val,
               "lr_3d": lr_3d, "lr_p": lr_p}
        self.rows.append(row)
        if self.path:
            def fmt(v):
                return "" if v is None else repr(float(v))
            with open(self.path, "a") as fh:
                fh.write(f"{step},{fmt(loss_3d_val)},{fmt(loss_p_val)},"
                         f"{fmt(lr_3d)},{fmt(lr_p)}\n")


# ---------------------------------------------------------------------------
# stage-0: bimodal image-text pre-training (the frozen-backbone stand-in)

FROZEN_GROUPS = ("base_2d", "base_text", "proj_2d", "proj_text")


def pretrain_bimodal(manifest: Manifest, cfg: TrainConfig,
                     log_path: Optional[Path] = None,
                     steps: Optional[int] = None) -> Tuple[Checkpoint, List[float]]:
    """Train image and text towers plus their projections with the symmetric
    image-text loss over the full corpus, then freeze all four groups.
    """
    steps = steps if steps is not None else cfg.steps
    vocab = Vocab.build([r.caption for r in manifest.records])
    model = TriModalModel.create(cfg.encoder, vocab, cfg.seed)
    names, params = zip(*(list(model.group_parameters("base_2d"))
                          + list(model.group_parameters("base_text"))
                          + list(model.group_parameters("proj_2d"))
                          + list(model.group_parameters("proj_text"))))
    opt = make_optimizer(cfg.optimizer_bimodal, params)
    records = manifest.records
    log = TrainLog(log_path)
    losses: List[float] = []
    for step in range(steps):
        idx = sample_indices(cfg.seed, "bimodal-batch", step, len(records), cfg.batch_size)
        batch = load_batch(manifest, idx, cfg.n_points, train=True, aug=cfg.augment,
                           rng=derive_rng(cfg.seed, "bimodal-aug", step))
        _, images, tokens, eos, labels = batch_tensors(batch, vocab, cfg.encoder.text_len)
        if cfg.positive_mode == "instance":
            labels = None
        lr = cosine_lr(cfg.optimizer_bimodal.lr, cfg.optimizer_bimodal.min_lr, step, steps)
        set_lr(opt, lr)
        opt.zero_grad()
        loss = pair_loss(model.embed_image(images), model.embed_text(tokens, eos),
                         labels, cfg.tau)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(step, value)
        loss.backward()
        opt.step()
        losses.append(value)
        log.add(step, loss_p_val=value, lr_p=lr)
    model.freeze(*FROZEN_GROUPS)
    ckpt = snapshot(model, manifest.classes, steps, cfg.digest(),
                    meta={"stage": "bimodal", "train_config": asdict(cfg)})
    return ckpt, losses


# ---------------------------------------------------------------------------
# 3D alignment with alternating optimizers

@dataclass
class CG3DState:
    model: TriModalModel
    opt_3d: torch.optim.Optimizer
    opt_prompt: torch.optim.Optimizer
    names_3d: List[str]
    step: int = 0


def _init_cg3d_model(base: Checkpoint, cfg: TrainConfig, seed: int) -> TriModalModel:
    """Frozen towers from the stage-0 checkpoint, fresh 3D tower and prompts."""
    n_prompts = cfg.encoder.n_prompt_tokens if cfg.use_prompts else 0
    model_cfg = replace(base.cfg, n_prompt_tokens=n_prompts)
    torch.manual_seed(derive_int(seed, "cg3d-init"))
    model = TriModalModel(model_cfg, base.vocab)
    with torch.no_grad():
        for gname in FROZEN_GROUPS:
            stored = base.groups[gname]
            for pname, tensor in model.group_parameters(gname):
                tensor.copy_(torch.from_numpy(stored[pname].copy()))
        ps = init_prompts(model_cfg.layers, n_prompts, model_cfg.width,
                          derive_rng(seed, "prompt-init"))
        if ps.n > 0:
            model.prompt_tokens.copy_(ps.to_tensor())
    model.freeze(*FROZEN_GROUPS)
    return model


def cg3d_setup(base: Checkpoint, cfg: TrainConfig,
               resume: Optional[Checkpoint] = None) -> CG3DState:
    if not (cfg.use_3d2d or cfg.use_3dtext):
        raise ValueError("at least one of use_3d2d/use_3dtext must be enabled")
    if resume is not None:
        model = resume.build_model()
        start = resume.step
    else:
        model = _init_cg3d_model(base, cfg, cfg.seed)
        start = 0
    names_3d, params_3d = zip(*(list(model.group_parameters("enc_3d"))
                                + list(model.group_parameters("proj_3d"))))
    opt_3d = make_optimizer(cfg.optimizer_3d, params_3d)
    opt_prompt = make_optimizer(cfg.optimizer_prompt, [model.prompt_tokens])
    if resume is not None:
        restore_optimizer(opt_3d, names_3d, "opt3d", resume.extras)
        restore_optimizer(opt_prompt, ["prompt_tokens"], "optp", resume.extras)
    return CG3DState(model=model, opt_3d=opt_3d, opt_prompt=opt_prompt,
                     names_3d=list(names_3d), step=start)


def cg3d_step(state: CG3DState, batch: Batch, cfg: TrainConfig,
              total_steps: int) -> Tuple[Optional[float], Optional[float]]:
    """One alternating step: even indices train the 3D tower, odd indices the
    prompt tokens. Frozen groups never receive gradients or updates.
    """
    model = state.model
    step = state.step
    points, images, tokens, eos, labels = batch_tensors(
        batch, model.vocab, model.cfg.text_len)
    labels_3d = None if cfg.positive_mode == "instance" else labels
    loss_3d_val = loss_p_val = None
    if step % 2 == 0:
        with torch.no_grad():
            f2d = model.embed_image(images, use_prompts=cfg.use_prompts) \
                if cfg.use_3d2d else None
            ftext = model.embed_text(tokens, eos) if cfg.use_3dtext else None
        f3d = model.embed_3d(points)
        loss = loss_3d(f3d, f2d, ftext, labels_3d, cfg.tau)
        loss_3d_val = float(loss.detach())
        if not math.isfinite(loss_3d_val):
            raise TrainingDiverged(step, loss_3d_val)
        set_lr(state.opt_3d, cosine_lr(cfg.optimizer_3d.lr, cfg.optimizer_3d.min_lr,
                                       step, total_steps))
        state.opt_3d.zero_grad()
        loss.backward()
        state.opt_3d.step()
    elif cfg.use_prompts and model.prompt_tokens.numel():
        f2d = model.embed_image(images, use_prompts=True)
        with torch.no_grad():
            ftext = model.embed_text(tokens, eos)
        # image-text positives are always class-level: captions repeat per
        # class, so identity positives would fight identical text targets
        loss = loss_prompt(f2d, ftext, labels, cfg.tau)
        loss_p_val = float(loss.detach())
        if not math.isfinite(loss_p_val):
            raise TrainingDiverged(step, loss_p_val)
        set_lr(state.opt_prompt, cosine_lr(cfg.optimizer_prompt.lr,
                                           cfg.optimizer_prompt.min_lr, step, total_steps))
        state.opt_prompt.zero_grad()
        loss.backward()
        state.opt_prompt.step()
    state.step += 1
    return loss_3d_val, loss_p_val


def pretrain_cg3d(manifest: Manifest, base: Checkpoint, cfg: TrainConfig,
                  log_path: Optional[Path] = None,
                  resume: Optional[Checkpoint] = None,
                  steps: Optional[int] = None,
                  stop_step: Optional[int] = None) -> Tuple[Checkpoint, TrainLog]:
    """Full alternating loop over the training split (seen classes only).

    `steps` overrides the schedule horizon; `stop_step` checkpoints early
    while keeping the horizon, so a resumed run is bitwise identical to an
    uninterrupted one.
    """
    total = steps if steps is not None else cfg.steps
    stop = total if stop_step is None else min(stop_step, total)
    state = cg3d_setup(base, cfg, resume)
    records = training_records(manifest, cfg.eval_frac)
    if not records:
        raise ValueError("manifest has no training records")
    position = {id(r): i for i, r in enumerate(manifest.records)}
    rec_idx = np.asarray([position[id(r)] for r in records])
    log = TrainLog(log_path, append=resume is not None)
    while state.step < stop:
        step = state.step
        idx = sample_indices(cfg.seed, "cg3d-batch", step, len(records), cfg.batch_size)
        batch = load_batch(manifest, rec_idx[idx], cfg.n_points, train=True,
                           aug=cfg.augment, rng=derive_rng(cfg.seed, "cg3d-aug", step))
        l3, lp = cg3d_step(state, batch, cfg, total)
        log.add(step, loss_3d_val=l3, loss_p_val=lp,
                lr_3d=cosine_lr(cfg.optimizer_3d.lr, cfg.optimizer_3d.min_lr, step, total),
                lr_p=cosine_lr(cfg.optimizer_prompt.lr, cfg.optimizer_prompt.min_lr,
                               step, total))
    extras = optimizer_extras(state.opt_3d, state.names_3d, "opt3d")
    extras.update(optimizer_extras(state.opt_prompt, ["prompt_tokens"], "optp"))
    ckpt = snapshot(state.model, manifest.classes, state.step, cfg.digest(),
                    extras=extras,
                    meta={"stage": "cg3d", "train_config": asdict(cfg)})
    return ckpt, log


# ---------------------------------------------------------------------------
# fine-tuning

class PointClassifier(torch.nn.Module):
    def __init__(self, n_classes: int):
        super().__init__()
        self.encoder = PointSetEncoder()
        self.head = torch.nn.Linear(self.encoder.out_dim, n_classes)

    def forward(self, pts: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(pts))


@dataclass
class FinetuneResult:
    model: PointClassifier
    train_accuracy: float
    test_accuracy: float
    losses: List[float]


def finetune(train_points: np.ndarray, train_labels: np.ndarray,
             test_points: np.ndarray, test_labels: np.ndarray,
             n_classes: int, cfg: TrainConfig, seed: int,
             init: Optional[Checkpoint] = None,
             steps: Optional[int] = None) -> FinetuneResult:
    """Cross-entropy fine-tuning of the point tower plus a linear head.

    With `init`, the encoder starts from the checkpoint's 3D tower weights;
    otherwise from random init.
    """
    for name, labels in (("train", train_labels), ("test", test_labels)):
        bad = set(np.unique(labels)) - set(range(n_classes))
        if bad:
            raise ValueError(f"{name} labels {sorted(bad)} outside the "
                             f"{n_classes}-class label set")
    steps = steps if steps is not None else cfg.steps
    torch.manual_seed(derive_int(seed, "finetune-init"))
    model = PointClassifier(n_classes)
    if init is not None:
        stored = init.groups["enc_3d"]
        with torch.no_grad():
            for pname, tensor in model.encoder.named_parameters():
                tensor.copy_(torch.from_numpy(stored["point_encoder." + pname].copy()))
    opt = make_optimizer(cfg.optimizer_finetune, model.parameters())
    xs = torch.from_numpy(np.asarray(train_points, dtype=np.float32))
    ys = torch.from_numpy(np.asarray(train_labels, dtype=np.int64))
    losses = []
    n = xs.shape[0]
    for step in range(steps):
        idx = sample_indices(seed, "finetune-batch", step, n, min(cfg.batch_size, n))
        set_lr(opt, cosine_lr(cfg.optimizer_finetune.lr, cfg.optimizer_finetune.min_lr,
                              step, steps))
        opt.zero_grad()
        logits = model(xs[idx])
        loss = torch.nn.functional.cross_entropy(logits, ys[idx])
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(step, value)
        loss.backward()
        opt.step()
        losses.append(value)
    model.eval()
    with torch.no_grad():
        train_acc = float((model(xs).argmax(1) == ys).float().mean())
        xt = torch.from_numpy(np.asarray(test_points, dtype=np.float32))
        yt = torch.from_numpy(np.asarray(test_labels, dtype=np.int64))
        test_acc = float((model(xt).argmax(1) == yt).float().mean())
    return FinetuneResult(model=model, train_accuracy=train_acc,
                          test_accuracy=test_acc, losses=losses)


# ---------------------------------------------------------------------------
# linear probe

@dataclass
class ProbeResult:
    weights: np.ndarray  # (d, C)
    bias: np.ndarray     # (C,)
    accuracy: float      # on the training inputs
    iterations: int
    converged: bool

    def predict(self, features: np.ndarray) -> np.ndarray:
        scores = np.asarray(features, dtype=np.float64) @ self.weights + self.bias
        return scores.argmax(axis=1)

    def score(self, features: np.ndarray, labels: np.ndarray) -> float:
        return float((self.predict(features) == np.asarray(labels)).mean())


def linear_probe(features: np.ndarray, labels: np.ndarray, l2: float = 1e-3,
                 max_iter: int = 5000, tol: float = 1e-5) -> ProbeResult:
    """Multinomial logistic regression by full-batch gradient descent.

    Deterministic: starts from zero weights with a step size set from the
    data's curvature bound; stops when the gradient norm drops below tol.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("linear probe needs at least two classes")
    n, d = x.shape
    c = int(classes.max()) + 1
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0
    w = np.zeros((d, c))
    b = np.zeros(c)
    # Lipschitz bound for softmax cross-entropy over [X, 1]: 0.5 lmax/n + l2
    xa = np.concatenate([x, np.ones((n, 1))], axis=1)
    lmax = float(np.linalg.eigvalsh((xa.T @ xa) / n).max())
    lr = 1.0 / (0.5 * lmax + l2)
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        scores = x @ w + b
        scores -= scores.max(axis=1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=1, keepdims=True)
        err = (p - onehot) / n
        gw = x.T @ err + l2 * w
        gb = err.sum(axis=0)
        gnorm = math.sqrt(float((gw ** 2).sum() + (gb ** 2).sum()))
        if gnorm < tol:
            converged = True
            break
        w -= lr * gw
        b -= lr * gb
    result = ProbeResult(weights=w, bias=b, accuracy=0.0, iterations=it,
                         converged=converged)
    result.accuracy = result.score(x, y)
    return result


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
               eps: float = 1e-5, n_coords: int = 200, seed: int = 0) -> float:
    """Max relative error between autograd and central finite differences.

    Checks a random subset of at least `n_coords` coordinates across all
    parameter tensors; run in float64 for meaningful tolerances.
    """
    params = list(params)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=False)
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    rng = derive_rng(seed, "grad-check")
    chosen = rng.choice(total, size=min(n_coords, total), replace=False)
    bounds = np.cumsum([0] + sizes)
    worst = 0.0
    for flat in chosen:
        pi = int(np.searchsorted(bounds, flat, side="right") - 1)
        off = int(flat - bounds[pi])
        view = params[pi].data.view(-1)
        orig = view[off].item()
        view[off] = orig + eps
        lp = float(loss_fn())
        view[off] = orig - eps
        lm = float(loss_fn())
        view[off] = orig
        numeric = (lp - lm) / (2.0 * eps)
        analytic = float(grads[pi].reshape(-1)[off])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        worst = max(worst, rel)
    return worst
