"""Downstream heads over trained encoders: linear probe and zero-shot.

The probe is five independent logistic regressions on frozen global image
features. Zero-shot scoring encodes per-pathology text prompts with the
trained text encoder and ranks images by a mix of global cosine and local
attention alignment against each prompt.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .crossmodal import (
    attention_contexts,
    global_similarity,
    local_alignment_score,
    similarity_matrix,
)
from .datapipe import PATHOLOGIES, labels_to_matrix
from .encoders import LocalGlobalFeatures, encode_image_toy, encode_text_toy
from .errors import ShapeError
from .trainer import Checkpoint, encode_report


@dataclass
class ProbeConfig:
    epochs: int = 500
    learning_rate: float = 1e-2
    uncertain_policy: str = "exclude"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.uncertain_policy not in ("exclude", "pos", "neg"):
            raise ValueError(f"unknown uncertain policy {self.uncertain_policy!r}")


@dataclass
class ProbeModel:
    """Per-pathology logistic weights over frozen D-dim global features."""

    weights: np.ndarray
    bias: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.shape[0] != len(PATHOLOGIES) or self.bias.shape != (len(PATHOLOGIES),):
            raise ShapeError(
                f"probe needs {len(PATHOLOGIES)} output rows, got weights "
                f"{self.weights.shape} and bias {self.bias.shape}"
            )
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("probe parameters must be finite")

    def save(self, path) -> None:
        payload = {"weights": self.weights.tolist(), "bias": self.bias.tolist(),
                   "metadata": self.metadata}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ProbeModel":
        payload = json.loads(Path(path).read_text())
        return cls(weights=np.array(payload["weights"]), bias=np.array(payload["bias"]),
                   metadata=payload.get("metadata", {}))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def fit_linear_probe(features, labels, config: ProbeConfig | None = None) -> ProbeModel:
    """Full-batch gradient descent on masked sigmoid cross-entropy.

    `features` is an [N x D] array (or Tensor) of frozen global vectors;
    `labels` a sequence of N LabelVectors. Uncertain labels follow
    config.uncertain_policy; blanks count as negative. A pathology whose
    visible labels are single-class is skipped with a warning and keeps its
    zero initialization.
    """
    config = config if config is not None else ProbeConfig()
    x = np.asarray(getattr(features, "data", features), dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"features must be [N x D], got shape {x.shape}")

    y, mask = labels_to_matrix(labels, uncertain_policy=config.uncertain_policy)
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"{x.shape[0]} feature rows vs {y.shape[0]} label rows")

    n, d = x.shape
    w = np.zeros((len(PATHOLOGIES), d))
    b = np.zeros(len(PATHOLOGIES))
    active = []
    for k, name in enumerate(PATHOLOGIES):
        visible = y[mask[:, k], k]
        if visible.size == 0 or visible.min() == visible.max():
            warnings.warn(f"probe skips {name!r}: labels are single-class or fully masked")
        else:
            active.append(k)

    history = []
    for _ in range(config.epochs):
        z = x @ w.T + b
        p = _sigmoid(z)
        losses = []
        for k in active:
            mk = mask[:, k]
            count = mk.sum()
            err = (p[mk, k] - y[mk, k])
            w[k] -= config.learning_rate * (err @ x[mk]) / count
            b[k] -= config.learning_rate * err.sum() / count
            eps = 1e-12
            losses.append(float(-np.mean(
                y[mk, k] * np.log(p[mk, k] + eps)
                + (1 - y[mk, k]) * np.log(1 - p[mk, k] + eps)
            )))
        history.append(float(np.mean(losses)) if losses else 0.0)

    skipped = [PATHOLOGIES[k] for k in range(len(PATHOLOGIES)) if k not in active]
    return ProbeModel(
        weights=w, bias=b,
        metadata={
            "epochs": config.epochs,
            "learning_rate": config.learning_rate,
            "uncertain_policy": config.uncertain_policy,
            "skipped": skipped,
            "final_loss": history[-1] if history else None,
            "loss_history": history,
        },
    )


def probe_predict(model: ProbeModel, features) -> np.ndarray:
    """Sigmoid probabilities, [M x 5]."""
    x = np.asarray(getattr(features, "data", features), dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.weights.shape[1]:
        raise ShapeError(
            f"features {x.shape} do not match probe dimension {model.weights.shape[1]}"
        )
    return _sigmoid(x @ model.weights.T + model.bias)


# ---------------------------------------------------------------------------
# Prompts and zero-shot scoring
# ---------------------------------------------------------------------------


@dataclass
class PromptSet:
    """At least one prompt string per pathology.

    Repeated prompts within a class are dropped (first occurrence wins), so
    listing a prompt twice cannot tilt the class mean.
    """

    prompts: dict[str, list[str]]

    def __post_init__(self):
        for name in PATHOLOGIES:
            plist = self.prompts.get(name)
            if not plist:
                raise ValueError(f"prompt set missing pathology {name!r}")
            if any(not p.strip() for p in plist):
                raise ValueError(f"empty prompt for pathology {name!r}")
            self.prompts[name] = list(dict.fromkeys(plist))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.prompts, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "PromptSet":
        return cls(prompts=json.loads(Path(path).read_text()))


def default_prompts() -> PromptSet:
    """The pathology name plus two phrase variants per class."""
    return PromptSet(prompts={
        name: [name, f"findings consistent with {name}", f"{name} is present"]
        for name in PATHOLOGIES
    })


def image_features(records, ckpt: Checkpoint) -> list[LocalGlobalFeatures]:
    """Frozen encoder outputs for records carrying inline images."""
    feats = []
    for rec in records:
        if rec.image is None:
            raise ValueError(f"record {rec.study_id!r} has no image attached")
        feats.append(encode_image_toy(rec.image, ckpt.params))
    return feats


def global_feature_matrix(feats: list[LocalGlobalFeatures]) -> np.ndarray:
    """[N x D] matrix of global vectors, detached from any tape."""
    return np.stack([f.global_feat.numpy() for f in feats])


def zero_shot_scores(feats: list[LocalGlobalFeatures], prompts: PromptSet,
                     ckpt: Checkpoint, global_weight: float = 0.5,
                     local_weight: float = 0.5) -> np.ndarray:
    """[M x 5] class scores from trained-encoder prompt similarities.

    For each image and prompt: global_weight * cosine of globals plus
    local_weight * attention alignment of prompt words against the image
    regions; a class scores the mean over its prompts. Defaults give the
    equal global/local mix.
    """
    loss_cfg = ckpt.config.loss
    encoded = {
        name: [encode_text_toy(encode_report(p, ckpt.vocab, ckpt.config), ckpt.params)
               for p in prompts.prompts[name]]
        for name in PATHOLOGIES
    }
    scores = np.zeros((len(feats), len(PATHOLOGIES)))
    for i, img in enumerate(feats):
        for k, name in enumerate(PATHOLOGIES):
            vals = []
            for txt in encoded[name]:
                g = global_similarity(img.global_feat, txt.global_feat).item()
                sim = similarity_matrix(txt.local, img.local)
                att = attention_contexts(sim, img.local, loss_cfg.lambda1)
                l = local_alignment_score(att, txt.local, loss_cfg.lambda2).item()
                vals.append(global_weight * g + local_weight * l)
            scores[i, k] = float(np.mean(vals))
    return scores


def classify_argmax(scores) -> np.ndarray:
    """Row-wise best class; ties resolve to the lowest class index."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise ShapeError(f"scores must be 2-D, got shape {s.shape}")
    return np.argmax(s, axis=1)
