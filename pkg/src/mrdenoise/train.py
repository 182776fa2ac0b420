"""Adam training on patch pairs, evaluation on full volumes, and the ablation harness."""
import contextlib
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from mrdenoise import kernels
from mrdenoise.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from mrdenoise.data import build_patch_dataset, epoch_permutation
from mrdenoise.errors import ConfigError, MissingGradientError, NumericalError
from mrdenoise.metrics import MetricReport
from mrdenoise.model import (
    VARIANT_LABELS,
    ModelConfig,
    Params,
    check_params,
    forward,
    init_params,
    with_variant,
)
from mrdenoise.patches import assemble, patchify
from mrdenoise.tensor import BatchNormStats, Tape, Tensor, mse_loss

log = logging.getLogger(__name__)

# reference-only values from the original study (private data, not reproducible here)
PUBLISHED_ABLATION = {"MLP+MLP": (29.8472, 0.8118), "CNN+CNN": (29.8285, 0.8131), "MLP+CNN": (32.2679, 0.8690)}
PUBLISHED_TEST_RESULTS = {0.03: (38.8119, 0.9378), 0.09: (34.8806, 0.9000), 0.15: (32.4347, 0.8536)}


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig.desk)
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    noise_level: float = 0.15
    noise_levels: list | None = None  # mixed-level training when set
    stride: int = 10
    inference_stride: int | None = None
    eval_batch_size: int = 64
    n_train: int = 20
    n_val: int = 5
    n_test: int = 5
    checkpoint_every: int = 1
    deterministic: bool = True

    def validate(self):
        self.model.validate()
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 0 or self.stride < 1:
            raise ConfigError("batch_size >= 1, epochs >= 0 and stride >= 1 required")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("invalid Adam hyperparameters")
        levels = self.noise_levels or [self.noise_level]
        if any(not 0 <= lv <= 1 for lv in levels):
            raise ConfigError("noise levels must lie in [0, 1]")
        if self.n_train < 1 or self.n_val < 0 or self.n_test < 0:
            raise ConfigError("need at least one training volume")
        return self

    @property
    def eval_stride(self):
        return self.inference_stride or self.stride

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        model = ModelConfig.from_dict(data.pop("model", {})) if "model" in data else ModelConfig.desk()
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(model=model, **data)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params):
        return cls({k: np.zeros_like(t.values) for k, t in params},
                   {k: np.zeros_like(t.values) for k, t in params}, 0)

    def copy(self):
        return AdamState({k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()}, self.step)


def adam_step(params, state, config, lr=None):
    """One bias-corrected Adam update; parameter arrays are replaced, not mutated."""
    lr = config.learning_rate if lr is None else lr
    b1, b2, eps = config.beta1, config.beta2, config.adam_eps
    for name, t in params:
        if t.grad is None:
            raise MissingGradientError(f"parameter {name!r} has no gradient")
    t_next = state.step + 1
    bc1 = 1.0 - b1 ** t_next
    bc2 = 1.0 - b2 ** t_next
    for name, t in params:
        t.values, state.m[name], state.v[name] = kernels.adam_update(
            t.values, t.grad, state.m[name], state.v[name], b1, b2, lr, bc1, bc2, eps)
    state.step = t_next
    return params, state


# ---------------------------------------------------------------------------
# training state <-> checkpoint


@dataclass
class TrainState:
    params: Params
    adam: AdamState
    epoch: int = 0  # completed epochs
    best_val_psnr: float | None = None
    best_epoch: int | None = None
    losses: list = field(default_factory=list)  # (epoch, batch, loss)
    val_history: list = field(default_factory=list)

    def copy(self):
        return TrainState(self.params.copy(), self.adam.copy(), self.epoch, self.best_val_psnr,
                          self.best_epoch, list(self.losses), [dict(r) for r in self.val_history])


def to_checkpoint(state, config):
    """Snapshot ``state``; arrays are shared, which is safe because training
    only ever rebinds parameter, moment and running-stat arrays."""
    arrays = {}
    for name, t in state.params:
        arrays[f"param/{name}"] = t.values
        arrays[f"adam_m/{name}"] = state.adam.m[name]
        arrays[f"adam_v/{name}"] = state.adam.v[name]
    for name, s in state.params.bn.items():
        arrays[f"bn_mean/{name}"] = s.mean
        arrays[f"bn_var/{name}"] = s.var
    meta = {
        "train_config": config.to_dict(),
        "epoch": state.epoch,
        "adam_step": state.adam.step,
        "bn_counts": {k: s.count for k, s in state.params.bn.items()},
        "best_val_psnr": state.best_val_psnr,
        "best_epoch": state.best_epoch,
        "rng": {"kind": "per-epoch", "seed": config.seed, "next_epoch": state.epoch},
        "losses": [[e, b, l] for e, b, l in state.losses],
        "val_history": [dict(r) for r in state.val_history],
    }
    return Checkpoint(arrays, meta)


def from_checkpoint(ckpt):
    """Rebuild ``(TrainConfig, TrainState)`` from a checkpoint."""
    config = TrainConfig.from_dict(ckpt.meta["train_config"])
    names = [k[len("param/"):] for k in ckpt.arrays if k.startswith("param/")]
    tensors = {n: Tensor(ckpt.arrays[f"param/{n}"], requires_grad=True, name=n) for n in sorted(names)}
    bn = {}
    for name, count in ckpt.meta["bn_counts"].items():
        s = BatchNormStats(len(ckpt.arrays[f"bn_mean/{name}"]))
        s.mean = ckpt.arrays[f"bn_mean/{name}"].copy()
        s.var = ckpt.arrays[f"bn_var/{name}"].copy()
        s.count = int(count)
        bn[name] = s
    params = Params(tensors, bn)
    check_params(config.model, params)
    adam = AdamState({n: ckpt.arrays[f"adam_m/{n}"].copy() for n in tensors},
                     {n: ckpt.arrays[f"adam_v/{n}"].copy() for n in tensors},
                     int(ckpt.meta["adam_step"]))
    state = TrainState(params, adam, int(ckpt.meta["epoch"]), ckpt.meta["best_val_psnr"],
                       ckpt.meta["best_epoch"], [tuple(r) for r in ckpt.meta["losses"]],
                       list(ckpt.meta["val_history"]))
    return config, state


# ---------------------------------------------------------------------------
# inference


def denoise_volume(volume, cfg, params, stride, batch_size=64):
    """Patch, denoise in eval mode, and average overlaps back into a volume.

    Negative model outputs are clipped to zero (magnitude images).
    """
    ps = patchify(volume, cfg.P, stride, cover_edges=True)
    out = np.empty_like(ps.patches, dtype=np.float32)
    for start in range(0, len(ps), batch_size):
        chunk = Tensor(ps.patches[start:start + batch_size])
        out[start:start + batch_size] = forward(chunk, cfg, params, mode="eval").values
    return np.maximum(assemble(ps.with_patches(out)), 0).astype(np.float32)


def evaluate_params(params, cfg, pairs, stride, batch_size=64):
    report = MetricReport()
    denoised = []
    for vid, clean, noisy in zip(pairs.ids, pairs.clean, pairs.noisy):
        out = denoise_volume(noisy, cfg, params, stride, batch_size)
        report.add(vid, out, clean)
        denoised.append(out)
    return report, denoised


def evaluate(checkpoint, pairs, stride=None):
    """Denoise every noisy volume of ``pairs`` and score it against its clean twin."""
    config, state = from_checkpoint(checkpoint) if isinstance(checkpoint, Checkpoint) else checkpoint
    report, _ = evaluate_params(state.params, config.model, pairs, stride or config.eval_stride,
                                config.eval_batch_size)
    return report


def noisy_baseline(pairs):
    report = MetricReport()
    for vid, clean, noisy in zip(pairs.ids, pairs.clean, pairs.noisy):
        report.add(vid, noisy, clean)
    return report


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    state: TrainState
    config: TrainConfig

    @property
    def losses(self):
        return self.state.losses

    def epoch_means(self):
        by_epoch = {}
        for e, _, l in self.state.losses:
            by_epoch.setdefault(e, []).append(l)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def _threads(deterministic):
    if not deterministic:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=1)


def write_loss_csv(losses, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "batch", "loss"])
        for e, b, l in losses:
            w.writerow([e, b, repr(float(l))])


def _param_norms(params):
    return {name: float(np.linalg.norm(t.values)) for name, t in params}


def train(config, data, out_dir=None, resume=None, lr_schedule=None):
    """Minimise patch MSE with Adam.

    ``data`` maps ``"train"`` (and optionally ``"val"``) to
    :class:`~mrdenoise.data.VolumePairs`. ``resume`` is a checkpoint whose
    training continues from its completed epoch. ``lr_schedule(epoch)``, when
    given, overrides the constant learning rate.

    Writes ``last.ckpt`` every ``checkpoint_every`` epochs, ``best.ckpt`` on
    each validation-PSNR improvement and ``loss.csv`` at the end when
    ``out_dir`` is set.
    """
    config.validate()
    cfg = config.model
    if resume is not None:
        saved_cfg, state = from_checkpoint(resume)
        if saved_cfg.model != cfg:
            raise ConfigError("checkpoint model config differs from the requested one")
    else:
        params = init_params(cfg)
        state = TrainState(params, AdamState.zeros(params))
    best = None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume is not None and (out / "best.ckpt").exists():
            best = load_checkpoint(out / "best.ckpt")

    pairs = build_patch_dataset(data["train"], cfg.P, config.stride)
    val = data.get("val")
    n = len(pairs)
    log.info("training %s on %d patches for %d epochs", cfg.variant, n, config.epochs)

    with _threads(config.deterministic):
        for epoch in range(state.epoch, config.epochs):
            lr = config.learning_rate if lr_schedule is None else lr_schedule(epoch)
            order = epoch_permutation(n, config.seed, epoch)
            for b, start in enumerate(range(0, n, config.batch_size)):
                idx = order[start:start + config.batch_size]
                x = Tensor(pairs.noisy[idx])
                state.params.zero_grad()
                with Tape() as tape:
                    loss = mse_loss(forward(x, cfg, state.params, mode="train"), pairs.clean[idx])
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalError(
                        f"non-finite loss at epoch {epoch}, batch {b}; parameter norms: {_param_norms(state.params)}")
                tape.backward(loss)
                adam_step(state.params, state.adam, config, lr)
                state.losses.append((epoch, b, value))
            state.epoch = epoch + 1

            epoch_mean = float(np.mean([l for e, _, l in state.losses if e == epoch]))
            row = {"epoch": epoch, "train_loss": epoch_mean}
            improved = False
            if val is not None and len(val):
                report, _ = evaluate_params(state.params, cfg, val, config.eval_stride, config.eval_batch_size)
                row.update(val_psnr=report.mean_psnr, val_ssim=report.mean_ssim)
                if state.best_val_psnr is None or report.mean_psnr > state.best_val_psnr:
                    state.best_val_psnr = report.mean_psnr
                    state.best_epoch = epoch
                    improved = True
            else:
                improved = True
            state.val_history.append(row)
            log.info("epoch %d: %s", epoch, row)

            if improved:
                state.best_epoch = epoch
                best = to_checkpoint(state, config)
                if out is not None:
                    save_checkpoint(best, out / "best.ckpt")
            if out is not None and (state.epoch % config.checkpoint_every == 0 or state.epoch == config.epochs):
                save_checkpoint(to_checkpoint(state, config), out / "last.ckpt")

    final = to_checkpoint(state, config)
    if best is None:
        best = final
    if out is not None:
        write_loss_csv(state.losses, out / "loss.csv")
    return TrainResult(final, best, state, config)


def resume_training(path, config=None, data=None, out_dir=None):
    ckpt = load_checkpoint(path)
    saved, _ = from_checkpoint(ckpt)
    return train(config or saved, data, out_dir, resume=ckpt)


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationRow:
    model: str
    psnr: float
    ssim: float
    first_epoch_loss: float
    final_epoch_loss: float

    @property
    def converged(self):
        return self.final_epoch_loss < 0.5 * self.first_epoch_loss


@dataclass
class AblationTable:
    rows: list
    noise_level: float

    def published_ordering_reproduced(self):
        hybrid = next(r for r in self.rows if r.model == "MLP+CNN")
        others = [r for r in self.rows if r.model != "MLP+CNN"]
        return all(hybrid.psnr > r.psnr and hybrid.ssim > r.ssim for r in others)

    def to_dict(self):
        return {
            "noise_level": self.noise_level,
            "evaluated_on": "validation",
            "columns": ["model", "PSNR", "SSIM"],
            "rows": [{"model": r.model, "PSNR": r.psnr, "SSIM": r.ssim,
                      "first_epoch_loss": r.first_epoch_loss, "final_epoch_loss": r.final_epoch_loss,
                      "converged": r.converged} for r in self.rows],
            "published_ordering_reproduced": self.published_ordering_reproduced(),
            "published_reference": {k: {"PSNR": v[0], "SSIM": v[1]} for k, v in PUBLISHED_ABLATION.items()},
        }

    def to_markdown(self):
        lines = ["| Model | PSNR | SSIM | converged |", "|---|---|---|---|"]
        for r in self.rows:
            lines.append(f"| {r.model} | {r.psnr:.4f} | {r.ssim:.4f} | {'yes' if r.converged else 'NO'} |")
        return "\n".join(lines)


def ablate(base, data, out_dir=None):
    """Train MLP+MLP, CNN+CNN and MLP+CNN with identical seeds and data; score on validation."""
    rows = []
    for variant in ("MLP_MLP", "CNN_CNN", "MLP_CNN"):
        config = replace(base, model=with_variant(base.model, variant))
        sub = Path(out_dir) / variant if out_dir is not None else None
        result = train(config, data, sub)
        report = evaluate(result.best, data["val"])
        means = result.epoch_means()
        row = AblationRow(VARIANT_LABELS[variant], report.mean_psnr, report.mean_ssim, means[0], means[-1])
        if not row.converged:
            log.warning("%s did not halve its training loss (%.4g -> %.4g)", row.model, means[0], means[-1])
        rows.append(row)
    return AblationTable(rows, base.noise_level)
