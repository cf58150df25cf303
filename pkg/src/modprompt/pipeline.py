"""The adapted detector: optional input prompt -> frozen-or-tuned detector, scored
against (optionally residual-adapted) category embeddings. Also checkpoint IO."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .boxes import Detection
from .data import Image
from .detector import Detector, RawPredictions, decode
from .prompts import StaticPrompt, Translator, compose

CKPT_SCHEMA = "modprompt-ckpt/1"


class CheckpointError(RuntimeError):
    pass


class Pipeline(nn.Module):
    def __init__(self, detector: Detector, bank, prompt: StaticPrompt | None = None,
                 translator: Translator | None = None):
        super().__init__()
        if prompt is not None and translator is not None:
            raise ValueError("a pipeline carries a static prompt or a translator, not both")
        self.detector = detector
        self.embed = bank
        self.prompt = prompt
        self.translator = translator

    @property
    def vocab(self) -> list[str]:
        return self.embed.vocab

    def adapt_images(self, x: torch.Tensor, placements=None) -> torch.Tensor:
        if self.prompt is not None:
            return self.prompt(x, placements)
        if self.translator is not None:
            return compose(x, self.translator(x))
        return x

    def forward(self, x: torch.Tensor, placements=None, use_prompt: bool = True,
                use_residual: bool = True) -> RawPredictions:
        if use_prompt:
            x = self.adapt_images(x, placements)
        return self.detector(x, self.embed(use_residual))

    def named_groups(self) -> dict[str, nn.Parameter]:
        """All parameters under stable dotted keys (``backbone.*``, ``head.*``,
        ``embed.base``, ``embed.residual``, ``prompt.*``, ``translator.*``)."""
        out = {}
        for name, p in self.named_parameters():
            out[name.removeprefix("detector.")] = p
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.detach().cpu().numpy().copy() for k, p in self.named_groups().items()}

    def predictor(self, score_threshold=0.05, nms_iou=0.5, max_detections=100,
                  use_prompt=True, use_residual=True):
        """Callable mapping an ``Image`` to its decoded detections."""

        def predict(image: Image) -> list[Detection]:
            x = torch.as_tensor(image.pixels).permute(2, 0, 1)[None]
            with torch.no_grad():
                raw = self(x, use_prompt=use_prompt, use_residual=use_residual)
            return decode(raw, score_threshold, nms_iou, max_detections, image_size=image.pixels.shape[:2])

        return predict

    def predict_batch(self, images: torch.Tensor, batch_size=64, score_threshold=0.05, nms_iou=0.5,
                      max_detections=100, use_prompt=True, use_residual=True) -> list[list[Detection]]:
        out = []
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                raw = self(images[i : i + batch_size], use_prompt=use_prompt, use_residual=use_residual)
                for j in range(raw.logits.shape[0]):
                    out.append(decode(raw[j], score_threshold, nms_iou, max_detections,
                                      image_size=tuple(images.shape[-2:])))
        return out

    def metadata(self) -> dict:
        meta = {
            "schema": CKPT_SCHEMA,
            "grid": None,
            "D": self.detector.embed_dim,
            "vocab": list(self.vocab),
            "prompt": None,
            "translator": None,
        }
        if self.prompt is not None:
            meta["prompt"] = {
                "kind": self.prompt.kind,
                "patch_size": self.prompt.patch_size,
                "image_shape": list(self.prompt.image_shape),
                "seed": self.prompt.seed,
            }
        if self.translator is not None:
            meta["translator"] = {"variant": self.translator.variant}
        return meta


def state_hash(arrays: dict[str, np.ndarray], prefixes=None) -> str:
    """SHA-256 over keys, dtypes, shapes and raw bytes (optionally only keys with given prefixes)."""
    h = hashlib.sha256()
    for k in sorted(arrays):
        if prefixes is not None and not k.startswith(tuple(prefixes)):
            continue
        a = np.ascontiguousarray(arrays[k])
        h.update(k.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_checkpoint(path, pipeline: Pipeline, grid=None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = pipeline.metadata()
    meta["grid"] = list(grid) if grid is not None else None
    meta.update(extra or {})
    arrays = pipeline.arrays()
    with open(path, "wb") as f:
        np.savez(f, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files if k != "__meta__"}
            meta = json.loads(str(z["__meta__"]))
    except (OSError, KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from e
    if meta.get("schema") != CKPT_SCHEMA:
        raise CheckpointError(f"{path}: schema {meta.get('schema')!r} != {CKPT_SCHEMA!r}")
    return arrays, meta


def load_pipeline(path, vocab=None) -> tuple[Pipeline, dict]:
    """Rebuild a pipeline (including any prompt/translator) from a checkpoint."""
    from .text import EmbeddingBank

    arrays, meta = read_checkpoint(path)
    if vocab is not None and list(vocab) != meta["vocab"]:
        raise CheckpointError(f"{path}: vocab {meta['vocab']} does not match expected {list(vocab)}")
    detector = Detector(embed_dim=meta["D"])
    bank = EmbeddingBank(meta["vocab"], base=torch.as_tensor(arrays["embed.base"]))
    prompt = translator = None
    if meta.get("prompt"):
        p = meta["prompt"]
        prompt = StaticPrompt(p["kind"], p["patch_size"], tuple(p["image_shape"]), p["seed"])
    if meta.get("translator"):
        translator = Translator(meta["translator"]["variant"])
    pipe = Pipeline(detector, bank, prompt, translator)
    groups = pipe.named_groups()
    missing = sorted(set(groups) - set(arrays))
    unexpected = sorted(set(arrays) - set(groups))
    if missing or unexpected:
        raise CheckpointError(f"{path}: missing keys {missing}, unexpected keys {unexpected}")
    with torch.no_grad():
        for k, p in groups.items():
            if tuple(arrays[k].shape) != tuple(p.shape):
                raise CheckpointError(f"{path}: {k} has shape {arrays[k].shape}, expected {tuple(p.shape)}")
            p.copy_(torch.as_tensor(arrays[k]))
    return pipe, meta
