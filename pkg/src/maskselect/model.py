"""Mask-selection network: attention fusion over mask embeddings plus a
query token, an IoU similarity head and an IoP regression head, their losses,
and the selection strategies applied to the head outputs."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict, field

import numpy as np

from . import nn
from .errors import (
    DimensionMismatch,
    EmptyProposalSet,
    IndexOutOfRange,
    InvalidConfig,
    InvalidTemperature,
    LengthMismatch,
    ParseError,
    ShapeMismatch,
    VersionMismatch,
)
from .masks import BinaryMask, union_masks
from .nn import AttentionParams, ParamStore
from .proposals import ProposalSet

CHECKPOINT_MAGIC = b"MSEL"
CHECKPOINT_VERSION = 1
SEGV_MAGIC = b"SEGV"


@dataclass(frozen=True)
class ModelConfig:
    model_dim: int = 256
    fusion_blocks: int = 2
    attention_heads: int = 8
    fusion_hidden_dim: int = 512
    iou_head_dims: tuple[int, ...] = (256, 256, 256)
    iop_head_dims: tuple[int, ...] = (256, 64, 1)
    tau: float = 0.1
    lambda_iou: float = 1.0
    lambda_iop: float = 50.0
    iop_threshold: float = 0.5
    kl_target_first: bool = False

    def __post_init__(self):
        object.__setattr__(self, "iou_head_dims", tuple(self.iou_head_dims))
        object.__setattr__(self, "iop_head_dims", tuple(self.iop_head_dims))
        if self.model_dim < 1 or self.model_dim % self.attention_heads != 0:
            raise InvalidConfig(
                f"model_dim {self.model_dim} not divisible by "
                f"{self.attention_heads} heads"
            )
        if self.tau <= 0:
            raise InvalidTemperature(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.iop_threshold <= 1.0:
            raise InvalidConfig("iop_threshold outside [0, 1]")
        if self.lambda_iou < 0 or self.lambda_iop < 0:
            raise InvalidConfig("loss weights must be nonnegative")
        if self.iou_head_dims and self.iou_head_dims[-1] != self.model_dim:
            raise InvalidConfig(
                "iou head must end at model_dim so the dot product is defined"
            )
        if not self.iop_head_dims or self.iop_head_dims[-1] != 1:
            raise InvalidConfig("iop head must end at a single output")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise InvalidConfig(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class SelectionOutput:
    """Head outputs for one proposal set: raw dot-product similarities from
    the IoU head and sigmoid-bounded IoP predictions."""

    similarities: np.ndarray
    iop_predictions: np.ndarray


def _mlp_layer_sizes(in_dim: int, dims: tuple[int, ...]) -> list[tuple[int, int]]:
    sizes = []
    prev = in_dim
    for d in dims:
        sizes.append((prev, d))
        prev = d
    return sizes


class SelectionModel:
    """Fusion module plus the two selection heads; the only learned object."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        d = config.model_dim
        for b in range(config.fusion_blocks):
            p = f"fusion.{b}"
            for attn in ("self_attn", "cross_attn"):
                self._add_ln(f"{p}.ln_{attn}", d)
                for name in ("wq", "wk", "wv", "wo"):
                    self._add_weight(rng, f"{p}.{attn}.{name}", d, d)
                for name in ("bq", "bk", "bv", "bo"):
                    self._add_zeros(f"{p}.{attn}.{name}", d)
            self._add_ln(f"{p}.ln_mlp", d)
            self._add_weight(rng, f"{p}.mlp.w1", d, config.fusion_hidden_dim)
            self._add_zeros(f"{p}.mlp.b1", config.fusion_hidden_dim)
            self._add_weight(rng, f"{p}.mlp.w2", config.fusion_hidden_dim, d)
            self._add_zeros(f"{p}.mlp.b2", d)
        for i, (fan_in, fan_out) in enumerate(_mlp_layer_sizes(d, config.iou_head_dims)):
            self._add_weight(rng, f"iou_head.{i}.w", fan_in, fan_out)
            self._add_zeros(f"iou_head.{i}.b", fan_out)
        for i, (fan_in, fan_out) in enumerate(_mlp_layer_sizes(d, config.iop_head_dims)):
            self._add_weight(rng, f"iop_head.{i}.w", fan_in, fan_out)
            self._add_zeros(f"iop_head.{i}.b", fan_out)

    def _add_weight(self, rng, name: str, fan_in: int, fan_out: int) -> None:
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        # round through float32 so checkpoints (float32 payload) are lossless
        self.store.add(name, w.astype(np.float32).astype(np.float64))

    def _add_zeros(self, name: str, n: int) -> None:
        self.store.add(name, np.zeros(n))

    def _add_ln(self, prefix: str, n: int) -> None:
        self.store.add(f"{prefix}.gain", np.ones(n))
        self.store.add(f"{prefix}.bias", np.zeros(n))

    def _attn_params(self, block: int, attn: str) -> AttentionParams:
        s = self.store
        p = f"fusion.{block}.{attn}"
        return AttentionParams(
            wq=s[f"{p}.wq"], wk=s[f"{p}.wk"], wv=s[f"{p}.wv"], wo=s[f"{p}.wo"],
            bq=s[f"{p}.bq"], bk=s[f"{p}.bk"], bv=s[f"{p}.bv"], bo=s[f"{p}.bo"],
            heads=self.config.attention_heads,
        )

    @staticmethod
    def _cross_mask(n_tokens: int) -> np.ndarray:
        """Attention mask for the cross sublayer: the query token (row 0)
        attends to every mask embedding, and each mask embedding attends to
        the query token and itself."""
        mask = np.full((n_tokens, n_tokens), -np.inf)
        mask[0, :] = 0.0
        idx = np.arange(1, n_tokens)
        mask[idx, idx] = 0.0
        mask[idx, 0] = 0.0
        return mask

    # ------------------------------------------------------------ forward

    def _check_inputs(self, embeddings: np.ndarray, seg: np.ndarray):
        embeddings = np.asarray(embeddings, dtype=np.float64)
        seg = np.asarray(seg, dtype=np.float64)
        if embeddings.ndim != 2 or embeddings.shape[1] != self.config.model_dim:
            raise DimensionMismatch(
                f"embeddings must be (K, {self.config.model_dim}), "
                f"got {embeddings.shape}"
            )
        if seg.shape != (self.config.model_dim,):
            raise DimensionMismatch(
                f"seg token must have dim {self.config.model_dim}, got {seg.shape}"
            )
        if embeddings.shape[0] == 0:
            raise EmptyProposalSet("no mask embeddings to fuse")
        return embeddings, seg

    def _fusion_tokens(self, tokens: np.ndarray):
        """Pre-norm blocks over the (K+1, d) token sequence: self-attention
        mixing all tokens, cross-attention between each embedding and the
        query token, then the position-wise MLP, each with a residual."""
        caches = []
        s = self.store
        mask = self._cross_mask(tokens.shape[0])
        for b in range(self.config.fusion_blocks):
            p = f"fusion.{b}"
            h1, ln1_c = nn.layer_norm_forward(
                tokens, s[f"{p}.ln_self_attn.gain"], s[f"{p}.ln_self_attn.bias"])
            attn_out, self_c = nn.multi_head_attention(h1, h1, h1,
                                                       self._attn_params(b, "self_attn"))
            tokens = tokens + attn_out
            h2, ln2_c = nn.layer_norm_forward(
                tokens, s[f"{p}.ln_cross_attn.gain"], s[f"{p}.ln_cross_attn.bias"])
            cross_out, cross_c = nn.multi_head_attention(
                h2, h2, h2, self._attn_params(b, "cross_attn"), mask=mask)
            tokens = tokens + cross_out
            h3, ln3_c = nn.layer_norm_forward(
                tokens, s[f"{p}.ln_mlp.gain"], s[f"{p}.ln_mlp.bias"])
            z1, lin1_c = nn.linear_forward(h3, s[f"{p}.mlp.w1"], s[f"{p}.mlp.b1"])
            a1, gelu_c = nn.gelu_forward(z1)
            z2, lin2_c = nn.linear_forward(a1, s[f"{p}.mlp.w2"], s[f"{p}.mlp.b2"])
            tokens = tokens + z2
            caches.append((ln1_c, self_c, ln2_c, cross_c, ln3_c, lin1_c, gelu_c, lin2_c))
        return tokens, caches

    def _attn_backward(self, prefix: str, attn_cache, dtokens: np.ndarray) -> np.ndarray:
        dq, dk, dv, ag = nn.multi_head_attention_backward(attn_cache, dtokens)
        for name, g in (("wq", ag.wq), ("wk", ag.wk), ("wv", ag.wv), ("wo", ag.wo),
                        ("bq", ag.bq), ("bk", ag.bk), ("bv", ag.bv), ("bo", ag.bo)):
            self.store.accumulate(f"{prefix}.{name}", g)
        return dq + dk + dv

    def _fusion_backward(self, caches, dtokens: np.ndarray) -> np.ndarray:
        s = self.store
        for b in reversed(range(self.config.fusion_blocks)):
            p = f"fusion.{b}"
            ln1_c, self_c, ln2_c, cross_c, ln3_c, lin1_c, gelu_c, lin2_c = caches[b]
            da1, dw2, db2 = nn.linear_backward(lin2_c, dtokens)
            s.accumulate(f"{p}.mlp.w2", dw2)
            s.accumulate(f"{p}.mlp.b2", db2)
            dz1 = nn.gelu_backward(gelu_c, da1)
            dh3, dw1, db1 = nn.linear_backward(lin1_c, dz1)
            s.accumulate(f"{p}.mlp.w1", dw1)
            s.accumulate(f"{p}.mlp.b1", db1)
            dx, dgain, dbias = nn.layer_norm_backward(ln3_c, dh3)
            s.accumulate(f"{p}.ln_mlp.gain", dgain)
            s.accumulate(f"{p}.ln_mlp.bias", dbias)
            dtokens = dtokens + dx
            dh2 = self._attn_backward(f"{p}.cross_attn", cross_c, dtokens)
            dx, dgain, dbias = nn.layer_norm_backward(ln2_c, dh2)
            s.accumulate(f"{p}.ln_cross_attn.gain", dgain)
            s.accumulate(f"{p}.ln_cross_attn.bias", dbias)
            dtokens = dtokens + dx
            dh1 = self._attn_backward(f"{p}.self_attn", self_c, dtokens)
            dx, dgain, dbias = nn.layer_norm_backward(ln1_c, dh1)
            s.accumulate(f"{p}.ln_self_attn.gain", dgain)
            s.accumulate(f"{p}.ln_self_attn.bias", dbias)
            dtokens = dtokens + dx
        return dtokens

    def fusion_forward(self, embeddings: np.ndarray, seg: np.ndarray):
        """Align the K mask embeddings and the query token; returns the
        updated (embeddings, seg) pair."""
        embeddings, seg = self._check_inputs(embeddings, seg)
        tokens = np.vstack([seg[None, :], embeddings])
        tokens, _ = self._fusion_tokens(tokens)
        return tokens[1:], tokens[0]

    def _head_forward(self, prefix: str, dims: tuple[int, ...], x: np.ndarray):
        """Shared MLP applied rowwise; activation between layers, none after
        the final one."""
        caches = []
        n_layers = len(dims)
        for i in range(n_layers):
            z, lin_c = nn.linear_forward(x, self.store[f"{prefix}.{i}.w"],
                                         self.store[f"{prefix}.{i}.b"])
            if i < n_layers - 1:
                x, gelu_c = nn.gelu_forward(z)
            else:
                x, gelu_c = z, None
            caches.append((lin_c, gelu_c))
        return x, caches

    def _head_backward(self, prefix: str, caches, dy: np.ndarray) -> np.ndarray:
        for i in reversed(range(len(caches))):
            lin_c, gelu_c = caches[i]
            if gelu_c is not None:
                dy = nn.gelu_backward(gelu_c, dy)
            dy, dw, db = nn.linear_backward(lin_c, dy)
            self.store.accumulate(f"{prefix}.{i}.w", dw)
            self.store.accumulate(f"{prefix}.{i}.b", db)
        return dy

    def iou_head(self, emb_updated: np.ndarray, seg_updated: np.ndarray) -> np.ndarray:
        """Map embeddings into the query space and dot with the query token."""
        mapped, _ = self._head_forward("iou_head", self.config.iou_head_dims, emb_updated)
        return mapped @ seg_updated

    def iop_head(self, emb_updated: np.ndarray) -> np.ndarray:
        """Rowwise regression of each embedding to its predicted IoP."""
        z, _ = self._head_forward("iop_head", self.config.iop_head_dims, emb_updated)
        return nn.sigmoid(z[:, 0])

    def forward(self, embeddings: np.ndarray, seg: np.ndarray) -> SelectionOutput:
        out, _ = self._forward_cached(embeddings, seg)
        return out

    def _forward_cached(self, embeddings: np.ndarray, seg: np.ndarray):
        embeddings, seg = self._check_inputs(embeddings, seg)
        tokens = np.vstack([seg[None, :], embeddings])
        tokens, fusion_caches = self._fusion_tokens(tokens)
        seg_upd = tokens[0]
        emb_upd = tokens[1:]
        mapped, iou_caches = self._head_forward("iou_head", self.config.iou_head_dims, emb_upd)
        similarities = mapped @ seg_upd
        z, iop_caches = self._head_forward("iop_head", self.config.iop_head_dims, emb_upd)
        iop_pred = nn.sigmoid(z[:, 0])
        out = SelectionOutput(similarities=similarities, iop_predictions=iop_pred)
        cache = (fusion_caches, iou_caches, iop_caches, mapped, seg_upd, z, iop_pred)
        return out, cache

    def backward(self, cache, dsimilarities: np.ndarray, diop: np.ndarray):
        """Backpropagate head-output gradients; accumulates parameter grads
        and returns (dembeddings, dseg)."""
        fusion_caches, iou_caches, iop_caches, mapped, seg_upd, z, iop_pred = cache
        dmapped = np.outer(dsimilarities, seg_upd)
        dseg_upd = mapped.T @ dsimilarities
        demb_iou = self._head_backward("iou_head", iou_caches, dmapped)
        dz = (diop * iop_pred * (1.0 - iop_pred))[:, None]
        demb_iop = self._head_backward("iop_head", iop_caches, dz)
        dtokens = np.vstack([dseg_upd[None, :], demb_iou + demb_iop])
        dtokens = self._fusion_backward(fusion_caches, dtokens)
        return dtokens[1:], dtokens[0]

    def loss_and_backward(self, embeddings: np.ndarray, seg: np.ndarray,
                          target_ious: np.ndarray, target_iops: np.ndarray):
        """Full training step math for one sample: forward, combined loss,
        and backward into the parameter store. Returns
        (total, l_iou, l_iop, dembeddings, dseg)."""
        cfg = self.config
        out, cache = self._forward_cached(embeddings, seg)
        l_iou, dsims = loss_iou(out.similarities, target_ious, cfg.tau,
                                target_first=cfg.kl_target_first)
        l_iop, dpred = loss_iop(out.iop_predictions, target_iops)
        total = total_loss(l_iou, l_iop, cfg)
        demb, dseg = self.backward(cache, cfg.lambda_iou * dsims, cfg.lambda_iop * dpred)
        return total, l_iou, l_iop, demb, dseg

    def loss_only(self, embeddings: np.ndarray, seg: np.ndarray,
                  target_ious: np.ndarray, target_iops: np.ndarray) -> float:
        cfg = self.config
        out = self.forward(embeddings, seg)
        l_iou, _ = loss_iou(out.similarities, target_ious, cfg.tau,
                            target_first=cfg.kl_target_first)
        l_iop, _ = loss_iop(out.iop_predictions, target_iops)
        return total_loss(l_iou, l_iop, cfg)


# ---------------------------------------------------------------- losses

def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def loss_iou(similarities: np.ndarray, target_ious: np.ndarray, tau: float,
             target_first: bool = False):
    """KL divergence between the tempered softmax of the similarities and of
    the ground-truth IoUs. Returns (value, grad w.r.t. similarities); the
    target side receives no gradient.
    """
    if tau <= 0:
        raise InvalidTemperature(f"tau must be positive, got {tau}")
    similarities = np.asarray(similarities, dtype=np.float64)
    target_ious = np.asarray(target_ious, dtype=np.float64)
    if similarities.shape != target_ious.shape or similarities.ndim != 1:
        raise LengthMismatch(
            f"similarities {similarities.shape} vs targets {target_ious.shape}"
        )
    if similarities.size == 0:
        raise LengthMismatch("loss_iou needs at least one proposal")
    logp = _log_softmax(similarities / tau)
    logq = _log_softmax(target_ious / tau)
    p = np.exp(logp)
    q = np.exp(logq)
    if target_first:
        value = float(np.sum(q * (logq - logp)))
        grad = (p - q) / tau
    else:
        diff = logp - logq
        value = float(np.sum(p * diff))
        grad = p * (diff - value) / tau
    return value, grad


def loss_iop(predictions: np.ndarray, targets: np.ndarray):
    """Weighted L2: mean of exp(g - 1) * (p - g)^2, weighting confident
    ground-truth IoP values more. Returns (value, grad w.r.t. predictions)."""
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape or predictions.ndim != 1:
        raise LengthMismatch(
            f"predictions {predictions.shape} vs targets {targets.shape}"
        )
    if predictions.size == 0:
        raise LengthMismatch("loss_iop needs at least one proposal")
    weights = np.exp(targets - 1.0)
    diff = predictions - targets
    value = float(np.mean(weights * diff * diff))
    grad = 2.0 * weights * diff / predictions.size
    return value, grad


def total_loss(l_iou: float, l_iop: float, config: ModelConfig) -> float:
    return config.lambda_iou * l_iou + config.lambda_iop * l_iop


# ---------------------------------------------------------------- selection

def select_top1_iou(output: SelectionOutput) -> list[int]:
    """Index of the highest similarity; empty for K == 0, ties to the
    lowest index."""
    if output.similarities.size == 0:
        return []
    return [int(np.argmax(output.similarities))]


def select_threshold_iop(output: SelectionOutput, threshold: float) -> list[int]:
    """All indices whose IoP prediction exceeds the threshold."""
    return [int(i) for i in np.nonzero(output.iop_predictions > threshold)[0]]


def select_union_top1_threshold(output: SelectionOutput, threshold: float) -> list[int]:
    merged = set(select_top1_iou(output)) | set(select_threshold_iop(output, threshold))
    return sorted(merged)


def select_threshold_from_top5(output: SelectionOutput, threshold: float) -> list[int]:
    """Threshold rule restricted to the five highest-similarity proposals."""
    k = output.similarities.size
    if k == 0:
        return []
    ranked = sorted(range(k), key=lambda i: (-output.similarities[i], i))[:5]
    allowed = set(ranked)
    return [i for i in select_threshold_iop(output, threshold) if i in allowed]


def predict_mask(pset: ProposalSet, indices) -> BinaryMask:
    """Union of the selected proposals; empty selection gives an empty mask."""
    indices = list(indices)
    for i in indices:
        if not 0 <= i < len(pset.proposals):
            raise IndexOutOfRange(f"proposal index {i} outside [0, {len(pset.proposals)})")
    if not indices:
        return BinaryMask.zeros(pset.image_h, pset.image_w)
    return union_masks([pset.proposals[i].mask for i in indices])


# ---------------------------------------------------------------- persistence

def save_checkpoint(model: SelectionModel, path) -> None:
    """MSEL container: config JSON plus a named-tensor table (float32)."""
    cfg_bytes = json.dumps(model.config.to_json(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(cfg_bytes)))
        fh.write(cfg_bytes)
        names = model.store.names()
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = model.store[name]
            mat = arr.reshape(1, -1) if arr.ndim == 1 else arr
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
            fh.write(mat.astype("<f4").tobytes(order="C"))


def load_checkpoint(path) -> SelectionModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise ParseError(f"{path}: truncated at byte {off}")
        out = raw[off:off + n]
        off += n
        return out

    if take(4) != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: bad magic")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected 1")
    (cfg_len,) = struct.unpack("<I", take(4))
    try:
        cfg = ModelConfig.from_json(json.loads(take(cfg_len).decode("utf-8")))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: bad config block: {exc}") from exc
    model = SelectionModel(cfg, seed=0)
    (n_tensors,) = struct.unpack("<I", take(4))
    expected = set(model.store.names())
    seen = set()
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        rows, cols = struct.unpack("<II", take(8))
        data = np.frombuffer(take(rows * cols * 4), dtype="<f4").astype(np.float64)
        if name not in expected:
            raise ShapeMismatch(f"{path}: unexpected tensor {name!r}")
        if name in seen:
            raise ParseError(f"{path}: duplicate tensor {name!r}")
        seen.add(name)
        template = model.store[name]
        mat_shape = (1, template.size) if template.ndim == 1 else template.shape
        if (rows, cols) != mat_shape:
            raise ShapeMismatch(
                f"{path}: tensor {name!r} is {rows}x{cols}, config implies {mat_shape}"
            )
        model.store.params[name] = data.reshape(template.shape)
    if seen != expected:
        raise ShapeMismatch(f"{path}: missing tensors {sorted(expected - seen)}")
    if off != len(raw):
        raise ParseError(f"{path}: {len(raw) - off} trailing bytes")
    return model


def write_seg_vector(vec: np.ndarray, path) -> None:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1:
        raise ShapeMismatch(f"seg vector must be 1-D, got shape {vec.shape}")
    with open(path, "wb") as fh:
        fh.write(SEGV_MAGIC)
        fh.write(struct.pack("<I", vec.size))
        fh.write(vec.astype("<f4").tobytes())


def read_seg_vector(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != SEGV_MAGIC:
        raise ParseError(f"{path}: not a SEGV file")
    (dim,) = struct.unpack("<I", raw[4:8])
    if len(raw) != 8 + dim * 4:
        raise ParseError(f"{path}: expected {8 + dim * 4} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=8).astype(np.float64)
