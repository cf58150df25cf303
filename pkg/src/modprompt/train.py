"""Strategies and optimization loops for pretraining and adaptation."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .detector import Detector, assign_targets, loss_from_targets
from .pipeline import Pipeline, state_hash
from .prompts import init_prompt, init_translator
from .text import EmbeddingBank

log = logging.getLogger(__name__)

STRATEGIES = (
    "zs", "hft", "ft",
    "vp-fixed", "vp-random", "vp-padding", "vp-wm", "vp-wm2",
    "modprompt-mb", "modprompt-res",
)
PROMPT_STRATEGIES = STRATEGIES[3:]
STATIC_KIND = {
    "vp-fixed": "fixed", "vp-random": "random", "vp-padding": "padding",
    "vp-wm": "weight_map", "vp-wm2": "weight_map_v2",
}
TRANSLATOR_VARIANT = {"modprompt-mb": "MB", "modprompt-res": "RES"}
DEFAULT_LR = {"prompt": 1e-3, "translator": 1e-3, "residual": 1e-3, "finetune": 1e-3}


class DivergenceError(FloatingPointError):
    pass


@dataclass
class StrategySpec:
    kind: str
    with_task_residuals: bool = False
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    weight_decay: float = 0.01
    epochs: int = 20
    batch_size: int = 8
    patch_size: int = 12
    tune_base_embeddings: bool = False  # ft only; breaks knowledge preservation on purpose

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {STRATEGIES}")
        if self.with_task_residuals and self.kind == "ft":
            raise ValueError("ft already tunes every parameter; task residuals are not applicable")
        if self.tune_base_embeddings and self.kind != "ft":
            raise ValueError("only ft may tune base embeddings")
        if isinstance(self.lr, (int, float)):
            self.lr = {k: float(self.lr) for k in DEFAULT_LR}
        else:
            self.lr = {**DEFAULT_LR, **self.lr}

    @property
    def label(self) -> str:
        return self.kind + ("+tr" if self.with_task_residuals else "")


def _group_of(key: str) -> str:
    if key.startswith(("backbone.", "head.")):
        return "finetune"
    if key.startswith("prompt."):
        return "prompt"
    if key.startswith("translator."):
        return "translator"
    if key == "embed.residual":
        return "residual"
    if key == "embed.base":
        return "base"
    raise ValueError(f"parameter {key!r} belongs to no known group")


def trainable_parameters(strategy: StrategySpec, named: dict) -> dict:
    """Select the parameters a strategy optimizes from ``Pipeline.named_groups()``."""
    kind = strategy.kind
    if kind == "zs":
        prefixes = ()
    elif kind == "hft":
        prefixes = ("head.",)
    elif kind == "ft":
        prefixes = ("backbone.", "head.")
    elif kind in STATIC_KIND:
        prefixes = ("prompt.",)
    elif kind in TRANSLATOR_VARIANT:
        prefixes = ("translator.",)
    else:
        raise ValueError(f"unknown strategy {kind!r}")
    chosen = {k: p for k, p in named.items() if k.startswith(prefixes)} if prefixes else {}
    if strategy.with_task_residuals:
        chosen["embed.residual"] = named["embed.residual"]
    if strategy.tune_base_embeddings:
        chosen["embed.base"] = named["embed.base"]
    return chosen


def build_pipeline(detector: Detector, bank: EmbeddingBank, strategy: StrategySpec,
                   image_shape=(3, 96, 96), seed: int = 0) -> Pipeline:
    """Fresh (identity-initialized) adaptation around deep copies of detector and bank."""
    detector = copy.deepcopy(detector)
    bank = copy.deepcopy(bank)
    with torch.no_grad():
        bank.residual.zero_()
    prompt = translator = None
    if strategy.kind in STATIC_KIND:
        prompt = init_prompt(STATIC_KIND[strategy.kind], strategy.patch_size, image_shape, seed)
    elif strategy.kind in TRANSLATOR_VARIANT:
        translator = init_translator(TRANSLATOR_VARIANT[strategy.kind], seed)
    return Pipeline(detector, bank, prompt, translator)


# -- data tensors --------------------------------------------------------------


@dataclass
class TensorData:
    images: torch.Tensor  # N x 3 x H x W
    labels: torch.Tensor  # N x Gh x Gw
    targets: torch.Tensor  # N x Gh x Gw x 4

    def __len__(self):
        return len(self.images)


def prepare(samples, vocab, stride: int = 8) -> TensorData:
    images = torch.stack([torch.as_tensor(img.pixels).permute(2, 0, 1) for img, _ in samples])
    h, w = images.shape[-2:]
    grid = (h // stride, w // stride)
    labels, targets = zip(*(assign_targets(gt, grid, (h, w), list(vocab)) for _, gt in samples))
    return TensorData(
        images.contiguous(),
        torch.as_tensor(np.stack(labels)),
        torch.as_tensor(np.stack(targets), dtype=torch.float32),
    )


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


# -- optimization ---------------------------------------------------------------


@dataclass
class TrainState:
    """Everything needed to resume: the step counter, optimizer moments, loss
    history and the seed from which every random choice is derived."""

    step: int
    optimizer: dict
    losses: list
    seed: int

    def to_dict(self) -> dict:
        return {"step": self.step, "optimizer": self.optimizer, "losses": list(self.losses), "seed": self.seed}

    @classmethod
    def from_dict(cls, d) -> TrainState:
        return cls(d["step"], d["optimizer"], list(d["losses"]), d["seed"])


def _make_optimizer(params: dict, lrs: dict, weight_decay: float):
    groups = {}
    for k, p in params.items():
        groups.setdefault(_group_of(k), []).append(p)
    return torch.optim.AdamW(
        [{"params": ps, "lr": lrs[g] if g in lrs else lrs["finetune"], "name": g} for g, ps in groups.items()],
        weight_decay=weight_decay,
    )


def optimize(pipeline: Pipeline, data: TensorData, params: dict, lrs: dict, weight_decay: float,
             epochs: int, batch_size: int, seed: int, state: TrainState | None = None,
             max_steps: int | None = None, use_prompt: bool = True) -> TrainState:
    """Mini-batch AdamW over ``params``; everything else gets no gradient.

    Batch order comes from (seed, epoch) and random patch placement from
    (prompt seed, step), so a run resumed from a ``TrainState`` follows the
    same trajectory as an uninterrupted one.
    """
    for p in pipeline.parameters():
        p.requires_grad_(False)
    for p in params.values():
        p.requires_grad_(True)
    opt = _make_optimizer(params, lrs, weight_decay)
    state = state or TrainState(0, {}, [], seed)
    if state.optimizer:
        opt.load_state_dict(state.optimizer)
    n = len(data)
    per_epoch = (n + batch_size - 1) // batch_size
    total = epochs * per_epoch if max_steps is None else min(max_steps, epochs * per_epoch)
    random_prompt = pipeline.prompt is not None and pipeline.prompt.kind == "random"
    while state.step < total:
        epoch, b = divmod(state.step, per_epoch)
        idx = torch.as_tensor(epoch_order(seed, epoch, n)[b * batch_size : (b + 1) * batch_size])
        x = data.images[idx]
        placements = pipeline.prompt.placements(len(idx), state.step) if random_prompt else None
        raw = pipeline(x, placements=placements, use_prompt=use_prompt)
        loss = loss_from_targets(raw, data.labels[idx], data.targets[idx]).total
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss.item()} at step {state.step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        state.losses.append(float(loss.detach()))
        state.step += 1
    state.optimizer = opt.state_dict()
    for p in pipeline.parameters():
        p.requires_grad_(False)
    return state


@dataclass
class PretrainConfig:
    epochs: int = 30
    lr: float = 2e-3
    weight_decay: float = 1e-4
    batch_size: int = 16
    seed: int = 0
    embed_dim: int = 32


def pretrain(samples, vocab, cfg: PretrainConfig = PretrainConfig()) -> tuple[Pipeline, TrainState]:
    """Train a detector from scratch on the source (RGB) modality; embeddings stay frozen."""
    torch.manual_seed(cfg.seed)
    detector = Detector(cfg.embed_dim)
    bank = EmbeddingBank(vocab, cfg.embed_dim, seed=0)
    pipe = Pipeline(detector, bank)
    data = prepare(samples, vocab, detector.stride)
    params = {k: p for k, p in pipe.named_groups().items() if k.startswith(("backbone.", "head."))}
    t0 = time.perf_counter()
    state = optimize(pipe, data, params, {"finetune": cfg.lr}, cfg.weight_decay,
                     cfg.epochs, cfg.batch_size, cfg.seed)
    log.info("pretrained %d steps in %.1fs, final loss %.4f", state.step,
             time.perf_counter() - t0, state.losses[-1])
    return pipe, state


@dataclass
class AdaptResult:
    pipeline: Pipeline
    state: TrainState
    frozen_hash_before: str
    frozen_hash_after: str
    trainable: tuple


def adapt(zeroshot: Pipeline, samples, strategy: StrategySpec, seed: int = 0) -> AdaptResult:
    """Adapt a copy of the zero-shot pipeline to target-modality samples.

    Only ``trainable_parameters(strategy)`` move; every other array is hashed
    before and after and a mismatch is a hard failure.
    """
    image_shape = (samples[0][0].pixels.shape[2],) + tuple(samples[0][0].pixels.shape[:2])
    pipe = build_pipeline(zeroshot.detector, zeroshot.embed, strategy, image_shape, seed)
    named = pipe.named_groups()
    params = trainable_parameters(strategy, named)
    frozen = [k for k in named if k not in params]
    before = state_hash(pipe.arrays(), frozen)
    torch.manual_seed(seed)
    if params:
        data = prepare(samples, pipe.vocab, pipe.detector.stride)
        state = optimize(pipe, data, params, strategy.lr, strategy.weight_decay,
                         strategy.epochs, strategy.batch_size, seed)
    else:
        state = TrainState(0, {}, [], seed)
    after = state_hash(pipe.arrays(), frozen)
    if before != after:
        raise AssertionError(f"frozen parameters changed during {strategy.label} adaptation")
    return AdaptResult(pipe, state, before, after, tuple(sorted(params)))


# -- finite-difference harness -------------------------------------------------------


def gradient_check(loss_fn, params, n_samples: int = 20, eps: float = 1e-4, seed: int = 0,
                   indices=None, floor: float = 1e-10) -> float:
    """Max relative error between autograd and central differences.

    ``params`` is a list of leaf tensors that ``loss_fn()`` reads; ``indices``
    optionally fixes the (tensor, flat index) pairs, otherwise ``n_samples``
    are drawn at random. Relative error is |a - n| / max(|a|, |n|, floor).
    """
    params = list(params)
    for p in params:
        p.requires_grad_(True)
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise FloatingPointError("loss is not finite at the check point")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    if indices is None:
        rng = np.random.default_rng(seed)
        sizes = np.array([p.numel() for p in params])
        flat = rng.choice(int(sizes.sum()), size=min(n_samples, int(sizes.sum())), replace=False)
        bounds = np.cumsum(sizes)
        indices = []
        for f in flat:
            t = int(np.searchsorted(bounds, f, side="right"))
            indices.append((t, int(f - (bounds[t - 1] if t else 0))))
    worst = 0.0
    with torch.no_grad():
        for t, i in indices:
            at = np.unravel_index(i, tuple(params[t].shape))
            orig = params[t][at].item()
            params[t][at] = orig + eps
            up = loss_fn().item()
            params[t][at] = orig - eps
            down = loss_fn().item()
            params[t][at] = orig
            numeric = (up - down) / (2 * eps)
            analytic = grads[t][at].item()
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            worst = max(worst, err)
    return worst
