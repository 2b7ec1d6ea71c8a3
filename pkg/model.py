"""
The multimodal network: one residual 1-D convolutional encoder per modality, a
contrastive alignment head over the pooled embeddings, cross-attention in which
EEG tokens query fNIRS tokens, a SiLU-gated refinement, and per-task decoder heads.

All learnable state lives in TensorNode parameters so every forward pass can be
differentiated with diffcore.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

import diffcore as dc
from diffcore import TensorNode
from errors import ConfigError, ContractError, ShapeError, UnknownHeadError
from signalio import MultimodalEpoch

logger = logging.getLogger(__name__)

MODALITIES = ("fused", "eeg", "fnirs")
MAX_ALPHA = 100.0


@dataclass(frozen=True)
class ModelArch:
    """Architecture hyperparameters; everything needed to rebuild a model from a checkpoint."""

    eeg_channels: int
    fnirs_channels: int
    d_model: int = 32
    heads: int = 4
    stem_width: int = 16
    stem_kernel: int = 7
    stem_stride: int = 2
    block_widths: Tuple[int, ...] = (16, 32, 32)
    block_kernel: int = 3
    tau_init: float = math.log(10.0)

    def validate(self) -> "ModelArch":
        for name in ("eeg_channels", "fnirs_channels", "d_model", "heads", "stem_width", "stem_kernel",
                     "stem_stride", "block_kernel"):
            if getattr(self, name) < 1:
                raise ConfigError(f"must be >= 1, got {getattr(self, name)}", field=name)
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by {self.heads} heads", field="heads")
        if not self.block_widths:
            raise ConfigError("at least one residual block is required", field="block_widths")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def tap_width(self) -> int:
        return self.block_widths[-1]

    def token_count(self, samples: int) -> int:
        """T' of the final convolutional layer for an input of T samples."""
        pad = self.stem_kernel // 2
        return (samples + 2 * pad - self.stem_kernel) // self.stem_stride + 1


# Parameter containers.

def _conv_weight(rng: np.random.Generator, out_ch: int, in_ch: int, kernel: int, name: str) -> TensorNode:
    return dc.parameter(rng.normal(0.0, math.sqrt(2.0 / (in_ch * kernel)), size=(out_ch, in_ch, kernel)), name)


def _linear_weight(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> TensorNode:
    return dc.parameter(rng.normal(0.0, math.sqrt(1.0 / fan_in), size=(fan_in, fan_out)), name)


def _bias(shape: Tuple[int, ...], name: str) -> TensorNode:
    return dc.parameter(np.zeros(shape), name)


@dataclass
class ResidualBlock:
    """Two bias-free same-padded convolutions with ReLU; 1x1 projection on the skip path when the width changes."""

    w1: TensorNode
    w2: TensorNode
    skip: Optional[TensorNode] = None

    @staticmethod
    def init(rng: np.random.Generator, in_ch: int, out_ch: int, kernel: int) -> "ResidualBlock":
        skip = _conv_weight(rng, out_ch, in_ch, 1, "skip") if in_ch != out_ch else None
        return ResidualBlock(_conv_weight(rng, out_ch, in_ch, kernel, "w1"),
                             _conv_weight(rng, out_ch, out_ch, kernel, "w2"), skip)

    def named(self) -> List[Tuple[str, TensorNode]]:
        out = [("w1", self.w1), ("w2", self.w2)]
        if self.skip is not None:
            out.append(("skip", self.skip))
        return out

    def __call__(self, x: TensorNode) -> TensorNode:
        h = dc.relu(dc.conv1d(x, self.w1, padding="same"))
        h = dc.conv1d(h, self.w2, padding="same")
        shortcut = x if self.skip is None else dc.conv1d(x, self.skip)
        return dc.relu(h + shortcut)


@dataclass
class EncoderParams:
    """
    Convolutions carry no bias, so an all-zero input stretch gives all-zero
    activations at the tap. The linear lift and projection keep their biases.
    """

    in_channels: int
    stem_w: TensorNode
    blocks: List[ResidualBlock]
    lift_w: TensorNode
    lift_b: TensorNode
    proj_w: TensorNode
    proj_b: TensorNode
    stride: int = 2

    @staticmethod
    def init(rng: np.random.Generator, in_channels: int, arch: ModelArch) -> "EncoderParams":
        blocks = []
        width = arch.stem_width
        for out_width in arch.block_widths:
            blocks.append(ResidualBlock.init(rng, width, out_width, arch.block_kernel))
            width = out_width
        return EncoderParams(in_channels, _conv_weight(rng, arch.stem_width, in_channels, arch.stem_kernel, "stem_w"),
                             blocks, _linear_weight(rng, width, arch.d_model, "lift_w"),
                             _bias((arch.d_model,), "lift_b"), _linear_weight(rng, width, arch.d_model, "proj_w"),
                             _bias((arch.d_model,), "proj_b"), arch.stem_stride)

    def named(self) -> List[Tuple[str, TensorNode]]:
        out = [("stem_w", self.stem_w)]
        for i, block in enumerate(self.blocks):
            out.extend((f"block{i}.{name}", node) for name, node in block.named())
        out.extend([("lift_w", self.lift_w), ("lift_b", self.lift_b), ("proj_w", self.proj_w),
                    ("proj_b", self.proj_b)])
        return out


@dataclass
class AlignmentHead:
    tau: TensorNode
    beta: TensorNode

    @property
    def alpha(self) -> float:
        return float(np.exp(self.tau.values))

    def named(self) -> List[Tuple[str, TensorNode]]:
        return [("tau", self.tau), ("beta", self.beta)]

    def cap(self) -> None:
        """Clamps tau so alpha stays at or below MAX_ALPHA."""
        self.tau.values = np.asarray(np.minimum(self.tau.values, math.log(MAX_ALPHA)))


@dataclass
class IntegratorParams:
    """Per-head projections stored stacked as [h x D x d_k]; W_O is [D x D]."""

    w_q: TensorNode
    w_k: TensorNode
    w_v: TensorNode
    w_o: TensorNode

    @staticmethod
    def init(rng: np.random.Generator, d_model: int, heads: int) -> "IntegratorParams":
        d_k = d_model // heads

        def stacked(name):
            return dc.parameter(rng.normal(0.0, math.sqrt(1.0 / d_model), size=(heads, d_model, d_k)), name)

        return IntegratorParams(stacked("w_q"), stacked("w_k"), stacked("w_v"),
                                _linear_weight(rng, d_model, d_model, "w_o"))

    @property
    def heads(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_model(self) -> int:
        return self.w_q.shape[1]

    def named(self) -> List[Tuple[str, TensorNode]]:
        return [("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v), ("w_o", self.w_o)]


@dataclass
class GatingParams:
    w: TensorNode
    v: TensorNode

    @staticmethod
    def init(rng: np.random.Generator, d_model: int) -> "GatingParams":
        return GatingParams(_linear_weight(rng, d_model, d_model, "w"), _linear_weight(rng, d_model, d_model, "v"))

    def named(self) -> List[Tuple[str, TensorNode]]:
        return [("w", self.w), ("v", self.v)]


@dataclass
class DecoderHead:
    """
    Two-layer perceptron D -> D -> n_classes with GELU in between.

    Attributes:
        modality: "fused" reads the gated multimodal embedding; "eeg"/"fnirs" read
            one encoder's features directly (single-modality baselines)
        trained: set once the head has been fitted
    """

    w1: TensorNode
    b1: TensorNode
    w2: TensorNode
    b2: TensorNode
    modality: str = "fused"
    class_names: Tuple[str, ...] = ()
    trained: bool = False

    @staticmethod
    def init(rng: np.random.Generator, d_model: int, n_classes: int, modality: str,
             class_names: Sequence[str] = ()) -> "DecoderHead":
        return DecoderHead(_linear_weight(rng, d_model, d_model, "w1"), _bias((d_model,), "b1"),
                           _linear_weight(rng, d_model, n_classes, "w2"), _bias((n_classes,), "b2"),
                           modality, tuple(class_names))

    @property
    def n_classes(self) -> int:
        return self.w2.shape[1]

    def named(self) -> List[Tuple[str, TensorNode]]:
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]

    def metadata(self) -> dict:
        return {"n_classes": self.n_classes, "modality": self.modality, "class_names": list(self.class_names),
                "trained": self.trained}


@dataclass
class ModelParams:
    arch: ModelArch
    eeg_encoder: EncoderParams
    fnirs_encoder: EncoderParams
    alignment: AlignmentHead
    integrator: IntegratorParams
    gating: GatingParams
    heads: Dict[str, DecoderHead] = field(default_factory=dict)
    seed: int = 0
    history: Dict[str, List[float]] = field(default_factory=dict)

    def head(self, head_id: str) -> DecoderHead:
        try:
            return self.heads[head_id]
        except KeyError:
            raise UnknownHeadError(f"no decoder head {head_id!r}; registered: {sorted(self.heads)}") from None

    def add_head(self, head_id: str, n_classes: int, modality: str = "fused", class_names: Sequence[str] = (),
                 seed: Optional[int] = None) -> DecoderHead:
        """Registers a freshly initialized head (replacing any head with the same id)."""
        if modality not in MODALITIES:
            raise ConfigError(f"unknown modality {modality!r}", field="modality")
        if n_classes < 2:
            raise ConfigError(f"a decoder needs >= 2 classes, got {n_classes}", field="n_classes")
        rng = np.random.default_rng([self.seed if seed is None else seed, len(self.heads) + 1])
        head = DecoderHead.init(rng, self.arch.d_model, n_classes, modality, class_names)
        self.heads[head_id] = head
        logger.debug("Model: added head %s (%d classes, %s)", head_id, n_classes, modality)
        return head

    def parameter_groups(self) -> Dict[str, List[Tuple[str, TensorNode]]]:
        groups = {
            "eeg_encoder": self.eeg_encoder.named(),
            "fnirs_encoder": self.fnirs_encoder.named(),
            "alignment": self.alignment.named(),
            "integrator": self.integrator.named(),
            "gating": self.gating.named(),
        }
        for head_id, head in self.heads.items():
            groups[f"head:{head_id}"] = head.named()
        return groups

    def named_parameters(self) -> List[Tuple[str, TensorNode]]:
        return [(f"{group}.{name}", node) for group, named in self.parameter_groups().items() for name, node in named]

    def parameters(self, groups: Optional[Iterable[str]] = None) -> List[TensorNode]:
        selected = self.parameter_groups()
        keys = selected.keys() if groups is None else groups
        return [node for key in keys for _, node in selected[key]]

    def save(self, path: Union[str, Path]) -> None:
        metadata = {"arch": asdict(self.arch), "seed": self.seed,
                    "heads": {head_id: head.metadata() for head_id, head in self.heads.items()},
                    "history": self.history}
        dc.save_arrays(self.named_parameters(), path, metadata)

    @staticmethod
    def load(path: Union[str, Path]) -> "ModelParams":
        arrays, metadata = dc.load_arrays(path)
        arch_fields = dict(metadata["arch"])
        arch_fields["block_widths"] = tuple(arch_fields["block_widths"])
        params = init_model(ModelArch(**arch_fields), metadata.get("seed", 0))
        params.history = {k: list(v) for k, v in metadata.get("history", {}).items()}
        for head_id, info in metadata.get("heads", {}).items():
            head = params.add_head(head_id, info["n_classes"], info["modality"], info["class_names"])
            head.trained = info["trained"]
        for name, node in params.named_parameters():
            if name not in arrays:
                raise ContractError(f"checkpoint is missing parameter {name}")
            if arrays[name].shape != node.shape:
                raise ShapeError(f"checkpoint parameter {name} has shape {arrays[name].shape}, expected {node.shape}")
            node.values = arrays[name]
            node.zero_grad()
        return params


def init_model(arch: ModelArch, seed: int = 0) -> ModelParams:
    arch.validate()
    rng = np.random.default_rng(seed)
    return ModelParams(
        arch,
        EncoderParams.init(rng, arch.eeg_channels, arch),
        EncoderParams.init(rng, arch.fnirs_channels, arch),
        AlignmentHead(dc.parameter(np.array(arch.tau_init), "tau"), dc.parameter(np.array(0.0), "beta")),
        IntegratorParams.init(rng, arch.d_model, arch.heads),
        GatingParams.init(rng, arch.d_model),
        seed=seed,
    )


# Batches.

@dataclass(frozen=True)
class Batch:
    eeg: np.ndarray
    fnirs: np.ndarray

    def __len__(self):
        return self.eeg.shape[0]


def stack_epochs(epochs: Sequence[MultimodalEpoch]) -> Batch:
    return Batch(np.stack([e.eeg for e in epochs]).astype(np.float64),
                 np.stack([e.fnirs for e in epochs]).astype(np.float64))


def as_batch(data: Union[Batch, MultimodalEpoch, Sequence[MultimodalEpoch]]) -> Batch:
    if isinstance(data, Batch):
        return data
    if isinstance(data, MultimodalEpoch):
        return stack_epochs([data])
    return stack_epochs(list(data))


# Forward components.

@dataclass
class EncoderOutput:
    """
    Attributes:
        tap: final convolutional layer activations [..., N_K x T'] (saliency tap point)
        tokens: time-major lifted tokens [..., T' x D]
        features: projected temporal mean [..., D] before normalization
        pooled: L2-normalized features
    """

    tap: TensorNode
    tokens: TensorNode
    features: TensorNode
    pooled: TensorNode


def _swap_last(x: TensorNode) -> TensorNode:
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return dc.transpose(x, axes)


def _linear(x: TensorNode, w: TensorNode, b: TensorNode) -> TensorNode:
    """x [..., D_in] @ w + b; vectors are lifted to a single-row matrix and back."""
    if x.ndim == 1:
        return dc.reshape(dc.reshape(x, (1, x.shape[0])) @ w + b, (w.shape[1],))
    return x @ w + b


def encode(enc: EncoderParams, x: Union[np.ndarray, TensorNode]) -> EncoderOutput:
    """Encodes [C x T] or [B x C x T] input; T' = ceil(T / stride)."""
    x = dc.as_node(x)
    if x.ndim < 2 or x.shape[-2] != enc.in_channels:
        raise ShapeError(f"encoder expects {enc.in_channels} channels, got input of shape {x.shape}")
    h = dc.relu(dc.conv1d(x, enc.stem_w, stride=enc.stride, padding="same"))
    for block in enc.blocks:
        h = block(h)
    tokens = _linear(_swap_last(h), enc.lift_w, enc.lift_b)
    features = _linear(dc.mean(h, axis=-1), enc.proj_w, enc.proj_b)
    return EncoderOutput(h, tokens, features, dc.l2_normalize(features, axis=-1))


# Contrastive alignment.

def _check_unit_rows(x: TensorNode, label: str, tol: float = 1e-6) -> None:
    norms = np.linalg.norm(x.values, axis=-1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ContractError(f"{label} rows must be L2-normalized, got norms {norms.min():.6g}..{norms.max():.6g}")


def similarity_logits(x_e: Union[TensorNode, np.ndarray], x_f: Union[TensorNode, np.ndarray],
                      head: AlignmentHead) -> TensorNode:
    """S = exp(tau) * X_f X_e^T + beta, so S[i, j] compares fNIRS sample i with EEG sample j."""
    x_e, x_f = dc.as_node(x_e), dc.as_node(x_f)
    if x_e.ndim != 2 or x_e.shape != x_f.shape:
        raise ShapeError(f"embedding batches must both be [B x D], got {x_e.shape} and {x_f.shape}")
    _check_unit_rows(x_e, "EEG embedding")
    _check_unit_rows(x_f, "fNIRS embedding")
    return dc.exp(head.tau) * (x_f @ dc.transpose(x_e)) + head.beta


def directional_losses(s: TensorNode) -> Tuple[TensorNode, TensorNode]:
    """(L_F, L_E): cross-entropy on the diagonal over rows, and over columns."""
    b = s.shape[0]
    eye = np.eye(b)
    l_f = dc.scale(dc.sum_(dc.log_softmax(s, axis=1) * eye), -1.0 / b)
    l_e = dc.scale(dc.sum_(dc.log_softmax(s, axis=0) * eye), -1.0 / b)
    return l_f, l_e


def contrastive_loss(s: Union[TensorNode, np.ndarray]) -> TensorNode:
    s = dc.as_node(s)
    if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] < 1:
        raise ShapeError(f"similarity matrix must be square and non-empty, got {s.shape}")
    l_f, l_e = directional_losses(s)
    return dc.scale(l_f + l_e, 0.5)


# Fusion.

@dataclass
class FusionOutput:
    fused: TensorNode
    weights: TensorNode


def _attend(eeg_tokens: TensorNode, fnirs_tokens: TensorNode, p: IntegratorParams) -> FusionOutput:
    b, t_q, d = eeg_tokens.shape
    t_k = fnirs_tokens.shape[1]
    h = p.heads
    d_k = d // h
    queries = dc.reshape(eeg_tokens, (b, 1, t_q, d)) @ p.w_q
    keys = dc.reshape(fnirs_tokens, (b, 1, t_k, d)) @ p.w_k
    values = dc.reshape(fnirs_tokens, (b, 1, t_k, d)) @ p.w_v
    scores = dc.scale(queries @ dc.transpose(keys, (0, 1, 3, 2)), 1.0 / math.sqrt(d_k))
    weights = dc.softmax(scores, axis=-1)
    heads = dc.transpose(weights @ values, (0, 2, 1, 3))
    fused = dc.reshape(heads, (b, t_q, h * d_k)) @ p.w_o
    return FusionOutput(fused, weights)


def cross_attention_fuse(eeg_tokens: Union[TensorNode, np.ndarray], fnirs_tokens: Union[TensorNode, np.ndarray],
                         p: IntegratorParams, return_weights: bool = False):
    """
    EEG tokens [(B x) T' x D] query fNIRS tokens [(B x) T'' x D].

    Returns the fused tokens [(B x) T' x D], plus the attention weights
    [(B x) h x T' x T''] when return_weights is set.
    """
    eeg_tokens, fnirs_tokens = dc.as_node(eeg_tokens), dc.as_node(fnirs_tokens)
    if eeg_tokens.shape[-1] != p.d_model or fnirs_tokens.shape[-1] != p.d_model:
        raise ShapeError(f"token width must be D={p.d_model}, got {eeg_tokens.shape} and {fnirs_tokens.shape}")
    if eeg_tokens.ndim != fnirs_tokens.ndim or eeg_tokens.ndim not in (2, 3):
        raise ShapeError(f"token batches must both be 2-D or 3-D, got {eeg_tokens.shape} and {fnirs_tokens.shape}")
    if eeg_tokens.shape[-2] < 1 or fnirs_tokens.shape[-2] < 1:
        raise ShapeError(f"token counts must be >= 1, got {eeg_tokens.shape} and {fnirs_tokens.shape}")
    single = eeg_tokens.ndim == 2
    if single:
        eeg_tokens = dc.reshape(eeg_tokens, (1,) + eeg_tokens.shape)
        fnirs_tokens = dc.reshape(fnirs_tokens, (1,) + fnirs_tokens.shape)
    elif eeg_tokens.shape[0] != fnirs_tokens.shape[0]:
        raise ShapeError(f"batch sizes differ: {eeg_tokens.shape} and {fnirs_tokens.shape}")
    out = _attend(eeg_tokens, fnirs_tokens, p)
    fused, weights = out.fused, out.weights
    if single:
        fused = dc.reshape(fused, fused.shape[1:])
        weights = dc.reshape(weights, weights.shape[1:])
    return (fused, weights) if return_weights else fused


def roi_gated_refine(fused: Union[TensorNode, np.ndarray], g: GatingParams) -> TensorNode:
    """SiLU(GELU(H) W) * (GELU(H) V)."""
    fused = dc.as_node(fused)
    if fused.shape[-1] != g.w.shape[0]:
        raise ShapeError(f"gating expects width {g.w.shape[0]}, got tokens of shape {fused.shape}")
    f = dc.gelu(fused)
    return dc.silu(f @ g.w) * (f @ g.v)


# Decoding.

def decode(head: DecoderHead, z: TensorNode) -> TensorNode:
    return _linear(dc.gelu(_linear(z, head.w1, head.b1)), head.w2, head.b2)


def cross_entropy(logits: TensorNode, labels: Sequence[int]) -> TensorNode:
    """Mean negative log-likelihood of integer labels under row-wise softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    b, n = logits.shape
    if labels.shape != (b,) or np.any(labels < 0) or np.any(labels >= n):
        raise ShapeError(f"labels {labels.tolist()} do not fit logits of shape {logits.shape}")
    one_hot = np.eye(n)[labels]
    return dc.scale(dc.sum_(dc.log_softmax(logits, axis=-1) * one_hot), -1.0 / b)


def gated_tokens(params: ModelParams, batch: Batch, capture: Optional[dict] = None) -> TensorNode:
    """
    The fused token sequence [B x T' x D], with the integrator and the gate each on a
    residual path over EEG tokens E and fNIRS tokens F:
        H = E + CrossAttention(E, F)
        Z = H + Gate(H)
    """
    eeg = encode(params.eeg_encoder, batch.eeg)
    fnirs = encode(params.fnirs_encoder, batch.fnirs)
    attended, weights = cross_attention_fuse(eeg.tokens, fnirs.tokens, params.integrator, return_weights=True)
    fused = eeg.tokens + attended
    refined = fused + roi_gated_refine(fused, params.gating)
    if capture is not None:
        capture.update({"eeg": eeg.tap, "fnirs": fnirs.tap, "attention": weights})
    return refined


def embed(params: ModelParams, batch: Batch, modality: str, capture: Optional[dict] = None) -> TensorNode:
    """The [B x D] representation a head of the given modality reads."""
    if modality == "fused":
        return dc.mean(gated_tokens(params, batch, capture), axis=-2)
    if modality not in ("eeg", "fnirs"):
        raise ConfigError(f"unknown modality {modality!r}", field="modality")
    enc = params.eeg_encoder if modality == "eeg" else params.fnirs_encoder
    out = encode(enc, batch.eeg if modality == "eeg" else batch.fnirs)
    if capture is not None:
        capture[modality] = out.tap
    return out.features


def forward_full(params: ModelParams, data: Union[Batch, MultimodalEpoch, Sequence[MultimodalEpoch]],
                 head_id: str, capture: Optional[dict] = None) -> TensorNode:
    """
    Logits of head `head_id`: [n_classes] for one epoch, [B x n_classes] for a batch.

    When `capture` is given it receives the final convolutional activations under
    "eeg"/"fnirs" (and the attention weights under "attention" for fused heads).
    """
    head = params.head(head_id)
    batch = as_batch(data)
    logits = decode(head, embed(params, batch, head.modality, capture))
    if isinstance(data, MultimodalEpoch):
        return dc.reshape(logits, (head.n_classes,))
    return logits


def aligned_embeddings(params: ModelParams, data) -> Tuple[TensorNode, TensorNode]:
    """Pooled, L2-normalized (X_e, X_f) used by the contrastive stage."""
    batch = as_batch(data)
    return encode(params.eeg_encoder, batch.eeg).pooled, encode(params.fnirs_encoder, batch.fnirs).pooled


def gated_embedding(params: ModelParams, data) -> np.ndarray:
    """Temporal mean of the gated multimodal tokens, [B x D]."""
    return dc.mean(gated_tokens(params, as_batch(data)), axis=-2).values.copy()


def predict_proba(params: ModelParams, data, head_id: str) -> np.ndarray:
    logits = forward_full(params, as_batch(data), head_id).values
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)
