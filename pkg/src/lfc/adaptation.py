"""Source-free adaptation: triplet branches, EMA teacher, pseudo labels, losses.

The loop keeps three networks. The source branch is frozen and only provides
cached hard pseudo labels and reference probabilities. The target branch is
initialised from the source by BN recalibration and is the only one that is
optimised. The momentum branch tracks the target by exponential averaging and
produces soft pseudo labels on augmented views.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import curriculum
from .core import adam_step, backward, cross_entropy_soft, no_grad, softmax_channels
from .errors import ConfigurationError, DegenerateInputError, DivergenceError
from .model import ModelBranch, adabn_init, assert_same_architecture, clone_into_momentum, forward, predict_logits
from .source import evaluate
from .synth import Dataset
from .transforms import TransformOp, apply, invert, sample_transform

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no_easy2hard", "no_src2tgt")


@dataclass
class AdaptConfig:
    seed: int = 0
    epochs: int = 10
    batch_size: int = 2
    lr: float = 1e-3
    tau: float = 0.99
    r_max: int = 5
    delta: float = 1.5
    ablation: str = "full"
    adabn_batch_size: int = 8
    bn_mode: str = "train"

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(f"unknown ablation mode {self.ablation!r}; expected one of {ABLATIONS}")
        if self.bn_mode not in ("train", "eval"):
            raise ConfigurationError(f"bn_mode must be 'train' or 'eval', got {self.bn_mode!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.r_max < 1 or not 0.0 <= self.tau < 1.0:
            raise ConfigurationError(f"invalid adaptation config {self}")


@dataclass
class LossBreakdown:
    l_fix: np.ndarray  # per sample
    l_sl: np.ndarray | None  # per sample; None without the momentum branch
    omega: np.ndarray
    alpha: float
    l_total: float
    mode: str = "full"

    def recompute_total(self) -> float:
        if self.mode == "no_src2tgt":
            per = self.omega * self.l_fix
        else:
            per = self.omega * (self.alpha * self.l_fix + (1.0 - self.alpha) * self.l_sl)
        return float(per.mean())


@dataclass
class StepRecord:
    epoch: int
    step: int
    sample_ids: np.ndarray
    difficulty: np.ndarray
    transforms: list
    loss: LossBreakdown


@dataclass
class AdaptResult:
    target: ModelBranch
    momentum: ModelBranch | None
    epochs: list[dict] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    rankings: list[list[tuple[int, float]]] = field(default_factory=list)
    y_src_hash: tuple[str, str] = ("", "")
    ema_updates: int = 0


def array_hash(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def branch_hash(branch: ModelBranch) -> str:
    return array_hash(*branch.state_arrays().values())


def ema_update(momentum: ModelBranch, target: ModelBranch, tau: float) -> None:
    """In place: every parameter and BN statistic m <- tau*m + (1-tau)*t."""
    assert_same_architecture(momentum, target)
    m_arrays, t_arrays = momentum.state_arrays(), target.state_arrays()
    if m_arrays.keys() != t_arrays.keys():
        raise ConfigurationError("architecture mismatch between momentum and target branches")
    for name, m in m_arrays.items():
        t = t_arrays[name]
        if m.shape != t.shape:
            raise ConfigurationError(f"architecture mismatch at {name}: {m.shape} vs {t.shape}")
        m *= tau
        m += (1.0 - tau) * t


def pseudo_label_source(f_s: ModelBranch, x: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Hard one-hot labels from the frozen source model (argmax, lowest index on ties)."""
    probs = softmax_channels(predict_logits(f_s, x, batch_size)).data
    idx = probs.argmax(axis=1)
    return (idx[:, None] == np.arange(probs.shape[1])[None, :, None, None]).astype(np.float64)


def pseudo_label_momentum(f_m: ModelBranch, x: np.ndarray, T: TransformOp) -> tuple[np.ndarray, np.ndarray]:
    """softmax(T^-1(f_m(T(x)))) and the validity mask of the inverted frame."""
    with no_grad():
        logits = forward(f_m, apply(T, x), "eval").data
    back, mask = invert(T, logits)
    return softmax_channels(back).data, mask


def total_loss(p_t, y_src: np.ndarray, y_psd: np.ndarray | None, valid_mask: np.ndarray | None,
               omega: np.ndarray, alpha: float, mode: str = "full"):
    """Batch mean of omega_b * (alpha*L_fix,b + (1-alpha)*L_sl,b).

    Returns the differentiable scalar and its :class:`LossBreakdown`.
    In ``no_src2tgt`` mode the consistency term is absent and the loss is the
    omega-weighted L_fix alone.
    """
    omega = np.asarray(omega, dtype=np.float64)
    B = omega.shape[0]
    l_fix = cross_entropy_soft(p_t, y_src, None, per_sample=True)
    if mode == "no_src2tgt":
        loss = (l_fix * (omega / B)).sum()
        l_sl_vals = None
    else:
        l_sl = cross_entropy_soft(p_t, y_psd, valid_mask, per_sample=True)
        loss = (l_fix * (omega * alpha / B)).sum() + (l_sl * (omega * (1.0 - alpha) / B)).sum()
        l_sl_vals = l_sl.data.copy()
    breakdown = LossBreakdown(l_fix.data.copy(), l_sl_vals, omega.copy(), float(alpha), loss.item(), mode)
    return loss, breakdown


def _divergence(out_dir, state: dict) -> DivergenceError:
    if out_dir is not None:
        from pathlib import Path

        Path(out_dir).mkdir(parents=True, exist_ok=True)
        lines = [f"{k}={v!r}" for k, v in state.items()]
        (Path(out_dir) / "divergence_dump.txt").write_text("\n".join(lines) + "\n")
    return DivergenceError(f"non-finite adaptation loss at epoch {state['epoch']} step {state['step']}", state)


def adapt(f_s: ModelBranch, target_train: Dataset, cfg: AdaptConfig, monitor: Dataset | None = None,
          out_dir=None, on_step=None) -> AdaptResult:
    """Run the curriculum adaptation and return the final target branch with logs.

    ``on_step(record, f_t, f_m)`` is called after every optimizer step and EMA update.
    """
    if len(target_train) == 0:
        raise DegenerateInputError("adaptation needs a non-empty target set")
    if f_s.role != "source":
        raise ConfigurationError("adapt expects a source-role branch")
    mode = cfg.ablation
    images, ids = target_train.images, np.asarray(target_train.ids)
    n, _, h, w = images.shape
    multiple = 2 ** f_s.config.depth

    f_t = adabn_init(f_s, images, cfg.adabn_batch_size)
    f_m = clone_into_momentum(f_t) if mode != "no_src2tgt" else None
    y_src = pseudo_label_source(f_s, images)
    p_src = softmax_channels(predict_logits(f_s, images)).data
    result = AdaptResult(target=f_t, momentum=f_m)
    y_src_hash0 = array_hash(y_src)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))

    for R in range(cfg.epochs):
        a = curriculum.alpha(R, cfg.r_max)
        difficulty = curriculum.score_dataset(p_src, f_t, images)
        if not np.all(np.isfinite(difficulty)):
            bad = ids[~np.isfinite(difficulty)].tolist()
            raise _divergence(out_dir, {"epoch": R, "step": 0, "sample_ids": bad, "alpha": a,
                                        "reason": "non-finite difficulty score"})
        order_rank = np.lexsort((ids, difficulty))
        result.rankings.append([(int(ids[i]), float(difficulty[i])) for i in order_rank])
        order = rng.permutation(n)
        sums = {"omega": [], "l_fix": [], "l_sl": [], "l_total": []}
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = np.sort(order[start:start + cfg.batch_size])
            d_b = difficulty[idx]
            omega = np.ones(len(idx)) if mode == "no_easy2hard" else curriculum.batch_weights(d_b, a, cfg.delta)

            transforms: list = []
            y_psd = mask = None
            if f_m is not None:
                y_psd = np.empty((len(idx), f_s.config.num_classes, h, w))
                mask = np.empty((len(idx), 1, h, w))
                for j, i in enumerate(idx):
                    T = sample_transform(rng, h, w, multiple)
                    transforms.append(T)
                    y_psd[j], mask[j] = (v[0] for v in pseudo_label_momentum(f_m, images[i:i + 1], T))

            p_t = softmax_channels(forward(f_t, images[idx], cfg.bn_mode))
            loss, bd = total_loss(p_t, y_src[idx], y_psd, mask, omega, a, mode)
            if not np.isfinite(bd.l_total):
                raise _divergence(out_dir, {"epoch": R, "step": step, "sample_ids": ids[idx].tolist(), "alpha": a,
                                            "omega": omega.tolist(), "l_fix": bd.l_fix.tolist(),
                                            "l_sl": None if bd.l_sl is None else bd.l_sl.tolist()})
            backward(loss)
            adam_step(f_t.parameters, lr=cfg.lr)
            if f_m is not None:
                ema_update(f_m, f_t, cfg.tau)
                result.ema_updates += 1
            record = StepRecord(R, step, ids[idx].copy(), d_b.copy(), transforms, bd)
            result.steps.append(record)
            if on_step is not None:
                on_step(record, f_t, f_m)
            sums["omega"].append(bd.omega.mean())
            sums["l_fix"].append(bd.l_fix.mean())
            sums["l_sl"].append(np.nan if bd.l_sl is None else bd.l_sl.mean())
            sums["l_total"].append(bd.l_total)

        dice_val = evaluate(f_t, monitor).mean_dice() if monitor is not None else float("nan")
        row = {"epoch": R, "alpha": a, **{k: float(np.mean(v)) for k, v in sums.items()}, "dice_val": dice_val}
        result.epochs.append(row)
        log.info("epoch %d alpha %.4f l_total %.5f dice_val %.4f", R, a, row["l_total"], dice_val)

    result.y_src_hash = (y_src_hash0, array_hash(y_src))
    return result


def ablate(mode: str, f_s: ModelBranch, target_train: Dataset, cfg: AdaptConfig, **kwargs) -> AdaptResult:
    """Run adapt with one of the curricula switched off (``full`` runs it unchanged)."""
    from dataclasses import replace

    return adapt(f_s, target_train, replace(cfg, ablation=mode), **kwargs)
