"""Trainable pieces: encoder, projection head, prototype classifier, OVA heads.

Encoder and projector are small tanh MLPs trained from scratch (a hidden
width of zero degrades a head to a single affine layer). The classifier is a
bank of learnable prototypes scored by temperature-scaled cosine similarity.
One-vs-all heads are per-known-class binary classifiers over the projected
feature; their max sigmoid score splits unlabeled samples softly into
known-like and novel-like mass.

Checkpoints are a single file: a text manifest (name, shape, offset, length
per array) terminated by a blank line, followed by raw little-endian float64
blocks. Round-trips are bit-exact.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DataFormatError, ShapeError

CHECKPOINT_MAGIC = "RPCCKPT1"


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 64
    feat_dim: int = 16
    proj_hidden_dim: int = 32
    proj_dim: int = 16
    prototype_source: str = "classifier"  # or "ema_means"
    proto_ema_decay: float = 0.9


@dataclass
class ModelParams:
    """All trainable state. Layer lists hold (weights, bias) pairs."""

    encoder: list[tuple[Tensor, Tensor]]
    projector: list[tuple[Tensor, Tensor]]
    prototypes: Tensor  # (num_classes_total, feat_dim), unit rows at init
    ova_w: Tensor  # (num_known, proj_dim)
    ova_b: Tensor  # (num_known,)

    def named(self):
        for i, (w, b) in enumerate(self.encoder):
            yield f"enc{i}.w", w
            yield f"enc{i}.b", b
        for i, (w, b) in enumerate(self.projector):
            yield f"proj{i}.w", w
            yield f"proj{i}.b", b
        yield "prototypes", self.prototypes
        yield "ova.w", self.ova_w
        yield "ova.b", self.ova_b

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def num_known(self) -> int:
        return self.ova_w.shape[0]

    @property
    def input_dim(self) -> int:
        return self.encoder[0][0].shape[0]


def _mlp_layers(rng: np.random.Generator, in_dim: int, hidden: int, out_dim: int) -> list[tuple[Tensor, Tensor]]:
    def layer(fan_in: int, fan_out: int) -> tuple[Tensor, Tensor]:
        w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        return (
            Tensor(w, requires_grad=True),
            Tensor(np.zeros(fan_out), requires_grad=True),
        )

    if hidden <= 0:
        return [layer(in_dim, out_dim)]
    return [layer(in_dim, hidden), layer(hidden, out_dim)]


def init_params(
    cfg: ModelConfig,
    input_dim: int,
    num_classes: int,
    num_known: int,
    rng: np.random.Generator,
) -> ModelParams:
    protos = rng.standard_normal((num_classes, cfg.feat_dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    return ModelParams(
        encoder=_mlp_layers(rng, input_dim, cfg.hidden_dim, cfg.feat_dim),
        projector=_mlp_layers(rng, cfg.feat_dim, cfg.proj_hidden_dim, cfg.proj_dim),
        prototypes=Tensor(protos, requires_grad=True),
        # Zero-initialized heads score exactly 0.5 everywhere: neutral split.
        ova_w=Tensor(np.zeros((num_known, cfg.proj_dim)), requires_grad=True),
        ova_b=Tensor(np.zeros(num_known), requires_grad=True),
    )


def _run_mlp(layers: list[tuple[Tensor, Tensor]], x: Tensor) -> Tensor:
    h = x
    for i, (w, b) in enumerate(layers):
        h = ad.add(ad.matmul(h, w), b)
        if i + 1 < len(layers):
            h = ad.tanh(h)
    return h


def _as_batch(x) -> Tensor:
    if isinstance(x, Tensor):
        if x.ndim != 2:
            raise ShapeError(f"expected a batch matrix, got tensor shape {x.shape}")
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    return Tensor(arr)


def encode(params: ModelParams, x) -> Tensor:
    """Features f(x); accepts a batch matrix or a single vector."""
    t = _as_batch(x)
    if t.shape[1] != params.input_dim:
        raise ShapeError(f"input dim {t.shape[1]} does not match encoder dim {params.input_dim}")
    return _run_mlp(params.encoder, t)


def project(params: ModelParams, h: Tensor) -> Tensor:
    """Projection z = g(h) used by the contrastive losses and OVA heads."""
    return _run_mlp(params.projector, h)


def soft_label(params: ModelParams, h: Tensor, tau: float) -> Tensor:
    """Softmax over cosine similarities between features and prototypes.

    Invariant to positive rescaling of the features and of each prototype.
    """
    cos = ad.matmul(ad.l2_normalize_rows(h), ad.transpose(ad.l2_normalize_rows(params.prototypes)))
    return ad.softmax_rows(cos, tau)


def ova_logits(params: ModelParams, z: Tensor) -> Tensor:
    return ad.add(ad.matmul(z, ad.transpose(params.ova_w)), params.ova_b)


def ova_weights(params: ModelParams, x) -> tuple[Tensor, Tensor]:
    """Soft (known, novel) weights for each sample; they sum to one.

    The known score is the max over per-class head sigmoids applied to the
    projected feature.
    """
    z = project(params, encode(params, x))
    s_known = ad.tmax(ad.sigmoid(ova_logits(params, z)), axis=1)
    return s_known, ad.sub(ad.constant(1.0), s_known)


def relational_signature(params: ModelParams, x, prototypes: np.ndarray | None = None) -> Tensor:
    """Cosine of f(x) against each known-class prototype.

    By default the known-class prototypes are the first ``num_known``
    classifier prototypes; pass ``prototypes`` to use externally maintained
    ones (e.g. running means of labeled features).
    """
    feats = encode(params, x)
    return signature_from_features(feats, params, prototypes)


def signature_from_features(feats: Tensor, params: ModelParams, prototypes: np.ndarray | None = None) -> Tensor:
    if prototypes is None:
        protos = ad.gather_rows(params.prototypes, np.arange(params.num_known))
    else:
        protos = ad.constant(prototypes)
    return ad.matmul(ad.l2_normalize_rows(feats), ad.transpose(ad.l2_normalize_rows(protos)))


def ova_bce_loss(params: ModelParams, x_labeled, y_labeled: np.ndarray) -> Tensor:
    """Mean one-vs-all binary cross-entropy over a labeled batch.

    Target 1 for a sample's own class head, 0 for every other head; computed
    from logits via softplus so saturated heads stay finite.
    """
    y = np.asarray(y_labeled, dtype=np.int64)
    if y.size == 0:
        raise ContractError("ova_bce_loss needs a nonempty labeled batch")
    if y.max() >= params.num_known or y.min() < 0:
        raise ContractError("labeled class id outside the known range")
    z = project(params, encode(params, x_labeled))
    logits = ova_logits(params, z)
    targets = np.zeros(logits.shape)
    targets[np.arange(y.size), y] = 1.0
    # softplus(l) - t*l is BCE-with-logits up to the standard identity.
    per_elem = ad.sub(ad.softplus(logits), ad.mul(ad.constant(targets), logits))
    return ad.tmean(per_elem)


@dataclass
class Scores:
    """Detached per-sample scores used for pool statistics and evaluation."""

    soft_label: np.ndarray  # (n, num_classes)
    known_weight: np.ndarray  # (n,)
    novel_weight: np.ndarray  # (n,)
    signature: np.ndarray  # (n, num_known)


def score_batch(params: ModelParams, x, tau: float, prototypes: np.ndarray | None = None) -> Scores:
    feats = encode(params, ad.constant(np.asarray(x, dtype=np.float64)))
    labels = soft_label(params, feats, tau).data
    z = project(params, feats)
    known = np.max(expit(ova_logits(params, z).data), axis=1)
    sig = signature_from_features(feats, params, prototypes).data
    return Scores(soft_label=labels, known_weight=known, novel_weight=1.0 - known, signature=sig)


# ---------------------------------------------------------------------------
# Checkpoints


def save_arrays(path: str | os.PathLike, arrays: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays: text manifest, blank line, raw LE blocks."""
    manifest = [CHECKPOINT_MAGIC]
    blocks = []
    offset = 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f8")
        shape = "x".join(str(d) for d in data.shape) if data.ndim else "scalar"
        manifest.append(f"{name} {shape} {offset} {data.nbytes}")
        blocks.append(data.tobytes())
        offset += data.nbytes
    payload = ("\n".join(manifest) + "\n\n").encode("ascii") + b"".join(blocks)
    Path(path).write_bytes(payload)


def load_arrays(path: str | os.PathLike) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    sep = raw.find(b"\n\n")
    if sep == -1:
        raise DataFormatError(f"{path}: missing manifest terminator")
    lines = raw[:sep].decode("ascii", errors="replace").split("\n")
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: bad magic, expected {CHECKPOINT_MAGIC!r}")
    base = sep + 2
    out: dict[str, np.ndarray] = {}
    for line in lines[1:]:
        parts = line.split()
        if len(parts) != 4:
            raise DataFormatError(f"{path}: malformed manifest line {line!r}")
        name, shape_s, off_s, len_s = parts
        try:
            offset, nbytes = int(off_s), int(len_s)
            shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
        except ValueError:
            raise DataFormatError(f"{path}: malformed manifest line {line!r}") from None
        block = raw[base + offset : base + offset + nbytes]
        if len(block) != nbytes:
            raise DataFormatError(f"{path}: truncated block for {name!r} at byte {base + offset}")
        out[name] = np.frombuffer(block, dtype="<f8").reshape(shape).copy()
    return out


def save_params(path: str | os.PathLike, params: ModelParams, extras: dict[str, np.ndarray] | None = None) -> None:
    arrays = {name: t.data for name, t in params.named()}
    for key, arr in (extras or {}).items():
        arrays[f"extra.{key}"] = arr
    save_arrays(path, arrays)


def load_params(path: str | os.PathLike) -> tuple[ModelParams, dict[str, np.ndarray]]:
    """Rebuild params (grad-enabled) plus any extra arrays saved alongside."""
    arrays = load_arrays(path)
    extras = {k[len("extra.") :]: v for k, v in arrays.items() if k.startswith("extra.")}

    def layers(prefix: str) -> list[tuple[Tensor, Tensor]]:
        out = []
        i = 0
        while f"{prefix}{i}.w" in arrays:
            out.append(
                (
                    Tensor(arrays[f"{prefix}{i}.w"], requires_grad=True),
                    Tensor(arrays[f"{prefix}{i}.b"], requires_grad=True),
                )
            )
            i += 1
        if not out:
            raise DataFormatError(f"{path}: checkpoint missing {prefix!r} layers")
        return out

    for key in ("prototypes", "ova.w", "ova.b"):
        if key not in arrays:
            raise DataFormatError(f"{path}: checkpoint missing array {key!r}")
    params = ModelParams(
        encoder=layers("enc"),
        projector=layers("proj"),
        prototypes=Tensor(arrays["prototypes"], requires_grad=True),
        ova_w=Tensor(arrays["ova.w"], requires_grad=True),
        ova_b=Tensor(arrays["ova.b"], requires_grad=True),
    )
    return params, extras
