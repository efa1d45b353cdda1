"""Network definitions built on the ndgrad op catalog.

Two encoder families share a causal GRU aggregator: an MLP feature extractor
(used for CPC pre-training) and a plain linear projection (the supervised
baseline). Linear heads produce pre-sigmoid logits; a bank of bilinear
discriminators scores k-step-ahead compatibility for the contrastive loss.

Parameters live in flat name -> float64 array dicts so the optimizer, the
checkpoint format and freeze/fine-tune logic all operate on the same keys.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from .ndgrad import LEAKY_SLOPE, NdgradError, Tape, Tensor, concat

CHECKPOINT_MAGIC = b"VXCP1\n"


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    feat_kind: str  # "mlp" | "linear-projection"
    input_dim: int
    feat_dim: int
    hidden_dim: int
    num_layers: int = 1  # GRU layers; also MLP depth
    dropout_rate: float = 0.1
    bidirectional: bool = False

    def __post_init__(self):
        if self.feat_kind not in ("mlp", "linear-projection"):
            raise EncoderError(f"unknown feat_kind {self.feat_kind!r}")

    @property
    def output_dim(self) -> int:
        return self.hidden_dim * (2 if self.bidirectional else 1)


@dataclass(frozen=True)
class LossSpec:
    kind: str = "focal"  # "cross-entropy" | "focal"
    focal_alpha: float = 0.75
    focal_gamma: int = 2

    def __post_init__(self):
        if self.kind not in ("cross-entropy", "focal"):
            raise EncoderError(f"unknown loss kind {self.kind!r}")


def _uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    if cfg.feat_kind == "mlp":
        d = cfg.input_dim
        for i in range(cfg.num_layers):
            params[f"feat.{i}.W"] = _uniform_init(rng, d, (d, cfg.feat_dim))
            params[f"feat.{i}.b"] = np.zeros(cfg.feat_dim)
            d = cfg.feat_dim
    else:
        params["feat.0.W"] = _uniform_init(rng, cfg.input_dim, (cfg.input_dim, cfg.feat_dim))
        params["feat.0.b"] = np.zeros(cfg.feat_dim)
    directions = ("gru", "gru_rev") if cfg.bidirectional else ("gru",)
    for prefix in directions:
        d = cfg.feat_dim
        for i in range(cfg.num_layers):
            for gate in ("z", "r", "h"):
                params[f"{prefix}.{i}.W{gate}"] = _uniform_init(rng, d, (d, cfg.hidden_dim))
                params[f"{prefix}.{i}.U{gate}"] = _uniform_init(
                    rng, cfg.hidden_dim, (cfg.hidden_dim, cfg.hidden_dim)
                )
                params[f"{prefix}.{i}.b{gate}"] = np.zeros(cfg.hidden_dim)
            d = cfg.hidden_dim
    return params


def init_head_params(in_dim: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {
        "head.W": _uniform_init(rng, in_dim, (in_dim, 1)),
        "head.b": np.zeros(1),
    }


def init_disc_params(
    k_steps: int, z_dim: int, c_dim: int, rng: np.random.Generator
) -> dict[str, np.ndarray]:
    return {
        f"disc.{k}.W": _uniform_init(rng, c_dim, (z_dim, c_dim))
        for k in range(1, k_steps + 1)
    }


def bind(
    tape: Tape, params: dict[str, np.ndarray], trainable: bool | set[str] = True
) -> dict[str, Tensor]:
    """Place parameters on a tape as leaves.

    `trainable` may be a set of key prefixes; keys outside it become
    constants, so gradients never flow into them (FTD freezing).
    """
    leaves = {}
    for name, arr in params.items():
        if trainable is True:
            req = True
        elif trainable is False:
            req = False
        else:
            req = any(name.startswith(p) for p in trainable)
        leaves[name] = tape.leaf(arr, requires_grad=req)
    return leaves


def dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    keep = 1.0 - rate
    return (rng.random(shape) < keep).astype(np.float64) / keep


def feat_forward(
    tape: Tape,
    leaves: dict[str, Tensor],
    cfg: EncoderConfig,
    x: Tensor,
    dropout_rng: np.random.Generator | None = None,
) -> Tensor:
    """Per-timestep feature map. x: (N, input_dim) -> (N, feat_dim)."""
    if x.shape[-1] != cfg.input_dim:
        raise EncoderError(f"input width {x.shape[-1]} != configured {cfg.input_dim}")
    if cfg.feat_kind == "linear-projection":
        return x.matmul(leaves["feat.0.W"]).add(leaves["feat.0.b"])
    h = x
    for i in range(cfg.num_layers):
        h = h.matmul(leaves[f"feat.{i}.W"]).add(leaves[f"feat.{i}.b"]).leaky_relu()
        if dropout_rng is not None and cfg.dropout_rate > 0:
            h = h.dropout_mask_mul(dropout_mask(dropout_rng, h.shape, cfg.dropout_rate))
    return h


def _gru_direction(
    tape: Tape,
    leaves: dict[str, Tensor],
    cfg: EncoderConfig,
    steps: Sequence[Tensor],
    prefix: str,
    h0: Tensor | None,
) -> list[Tensor]:
    batch = steps[0].shape[0]
    seq = list(steps)
    for layer in range(cfg.num_layers):
        p = f"{prefix}.{layer}"
        h = h0 if (h0 is not None and layer == 0) else tape.const(
            np.zeros((batch, cfg.hidden_dim))
        )
        out = []
        for t, x in enumerate(seq):
            u = x.matmul(leaves[f"{p}.Wz"]).add(h.matmul(leaves[f"{p}.Uz"])).add(leaves[f"{p}.bz"]).sigmoid()
            r = x.matmul(leaves[f"{p}.Wr"]).add(h.matmul(leaves[f"{p}.Ur"])).add(leaves[f"{p}.br"]).sigmoid()
            n = x.matmul(leaves[f"{p}.Wh"]).add(r.mul(h).matmul(leaves[f"{p}.Uh"])).add(leaves[f"{p}.bh"]).tanh()
            # h' = (1 - u) * h + u * n
            h = h.add(u.mul(n.sub(h)))
            if not np.all(np.isfinite(h.data)):
                raise EncoderError(f"non-finite GRU state at timestep {t}")
            out.append(h)
        seq = out
    return seq


def gru_steps(
    tape: Tape,
    leaves: dict[str, Tensor],
    cfg: EncoderConfig,
    steps: Sequence[Tensor],
    h0: Tensor | None = None,
) -> list[Tensor]:
    """Batched GRU over a list of (B, feat_dim) tensors -> list of (B, H[*2]).

    The forward direction is strictly causal; the reverse direction only
    exists when cfg.bidirectional and must never be used for CPC.
    """
    fwd = _gru_direction(tape, leaves, cfg, steps, "gru", h0)
    if not cfg.bidirectional:
        return fwd
    rev = _gru_direction(tape, leaves, cfg, list(reversed(steps)), "gru_rev", None)
    rev = list(reversed(rev))
    return [concat([f, r], axis=1) for f, r in zip(fwd, rev)]


def gru_forward(
    tape: Tape,
    leaves: dict[str, Tensor],
    cfg: EncoderConfig,
    z_seq: Tensor,
    h0: Tensor | None = None,
) -> Tensor:
    """Single-sequence convenience wrapper. z_seq: (T, feat_dim) -> (T, H[*2])."""
    steps = [z_seq.slice((slice(t, t + 1), slice(None))) for t in range(z_seq.shape[0])]
    outs = gru_steps(tape, leaves, cfg, steps, h0)
    return concat(outs, axis=0)


def head_forward(tape: Tape, leaves: dict[str, Tensor], c: Tensor) -> Tensor:
    """Affine head. c: (N, H) -> logits (N, 1)."""
    return c.matmul(leaves["head.W"]).add(leaves["head.b"])


# --- inference-only forward (no tape, no dropout) ---------------------------
#
# Scoring and frozen-feature extraction never need gradients; recording them
# on a tape costs more than the arithmetic. These mirror feat_forward /
# gru_steps exactly and are parity-tested against them.

def sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def feat_forward_np(params: dict[str, np.ndarray], cfg: EncoderConfig,
                    x: np.ndarray) -> np.ndarray:
    """x: (N, input_dim) -> (N, feat_dim), eval mode (no dropout)."""
    if x.shape[-1] != cfg.input_dim:
        raise EncoderError(f"input width {x.shape[-1]} != configured {cfg.input_dim}")
    if cfg.feat_kind == "linear-projection":
        return x @ params["feat.0.W"] + params["feat.0.b"]
    h = x
    for i in range(cfg.num_layers):
        h = h @ params[f"feat.{i}.W"] + params[f"feat.{i}.b"]
        h = np.where(h > 0, h, LEAKY_SLOPE * h)
    return h


def _gru_direction_np(params, cfg, seq: np.ndarray, prefix: str,
                      h0: np.ndarray | None) -> np.ndarray:
    n_t, batch = seq.shape[0], seq.shape[1]
    for layer in range(cfg.num_layers):
        p = f"{prefix}.{layer}"
        flat = seq.reshape(n_t * batch, -1)
        xz = (flat @ params[f"{p}.Wz"] + params[f"{p}.bz"]).reshape(n_t, batch, -1)
        xr = (flat @ params[f"{p}.Wr"] + params[f"{p}.br"]).reshape(n_t, batch, -1)
        xh = (flat @ params[f"{p}.Wh"] + params[f"{p}.bh"]).reshape(n_t, batch, -1)
        h = h0 if (h0 is not None and layer == 0) else np.zeros((batch, cfg.hidden_dim))
        out = np.empty((n_t, batch, cfg.hidden_dim))
        for t in range(n_t):
            u = sigmoid_np(xz[t] + h @ params[f"{p}.Uz"])
            r = sigmoid_np(xr[t] + h @ params[f"{p}.Ur"])
            nn = np.tanh(xh[t] + (r * h) @ params[f"{p}.Uh"])
            h = h + u * (nn - h)
            out[t] = h
        seq = out
    return seq


def gru_steps_np(params: dict[str, np.ndarray], cfg: EncoderConfig,
                 steps: np.ndarray, h0: np.ndarray | None = None) -> np.ndarray:
    """steps: (T, B, feat_dim) -> (T, B, H[*2]), eval mode."""
    fwd = _gru_direction_np(params, cfg, steps, "gru", h0)
    if not cfg.bidirectional:
        return fwd
    rev = _gru_direction_np(params, cfg, steps[::-1], "gru_rev", None)[::-1]
    return np.concatenate([fwd, rev], axis=2)


def discriminate(
    tape: Tape, leaves: dict[str, Tensor], k: int, c: Tensor, z: Tensor
) -> Tensor:
    """Bilinear score z^T W_k c per row. c: (N, Hc), z: (N, Hz) -> (N,)."""
    key = f"disc.{k}.W"
    if key not in leaves:
        raise EncoderError(f"discriminator step {k} out of range")
    # z^T W c == sum_j (z W)_j * c_j, so no transpose op is needed
    return z.matmul(leaves[key]).mul(c).sum(axis=1)


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), overflow-safe, for x of shape (N, 1) -> (N,)."""
    tape = x.tape
    zeros = tape.const(np.zeros_like(x.data))
    return concat([zeros, x], axis=1).logsumexp(axis=1)


def classification_loss_vec(
    tape: Tape, spec: LossSpec, logits: Tensor, labels: np.ndarray
) -> Tensor:
    """Per-sample loss. logits: (N, 1); labels: (N,) of {0, 1} -> (N,)."""
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if logits.shape != (y.size, 1):
        raise EncoderError(f"logits shape {logits.shape} incompatible with {y.size} labels")
    yk = tape.const(y)
    nyk = tape.const(1.0 - y)
    ce = yk.mul(softplus(logits.scale(-1.0))).add(nyk.mul(softplus(logits)))
    if spec.kind == "cross-entropy":
        return ce
    # focal: weight alpha on positives, (1 - p_t)^gamma modulation on both
    p = logits.sigmoid().slice((slice(None), 0))  # (N,)
    one_minus_pt = yk.mul(p.neg().add_const(1.0)).add(nyk.mul(p))
    mod = one_minus_pt
    for _ in range(spec.focal_gamma - 1):
        mod = mod.mul(one_minus_pt)
    if spec.focal_gamma == 0:
        mod = tape.const(np.ones_like(y))
    alpha_w = tape.const(np.where(y > 0.5, spec.focal_alpha, 1.0))
    return alpha_w.mul(mod).mul(ce)


def classification_loss(
    tape: Tape,
    spec: LossSpec,
    logits: Tensor,
    labels: np.ndarray,
    sample_mask: np.ndarray | None = None,
) -> Tensor:
    """Masked mean loss over samples; mask entries of 0 drop padded rows."""
    vec = classification_loss_vec(tape, spec, logits, labels)
    if sample_mask is None:
        return vec.mean()
    m = np.asarray(sample_mask, dtype=np.float64).reshape(-1)
    total = float(m.sum())
    if total <= 0:
        raise EncoderError("sample mask removes every sample")
    return vec.mul(tape.const(m)).sum().scale(1.0 / total)


# --- checkpoint container -------------------------------------------------

def save_checkpoint(
    path,
    kind: str,
    schema_hash: str,
    config: dict,
    tensors: dict[str, np.ndarray],
) -> None:
    """Versioned binary container: magic, JSON header, raw little-endian f64."""
    names = sorted(tensors)
    header = {
        "kind": kind,
        "schema_hash": schema_hash,
        "config": config,
        "tensors": [{"name": n, "shape": list(tensors[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack(">I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(tensors[n], dtype="<f8").tobytes())


def load_checkpoint(path, expect_schema_hash: str | None = None):
    """Returns (kind, schema_hash, config, tensors)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise EncoderError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack(">I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if expect_schema_hash is not None and header["schema_hash"] != expect_schema_hash:
            raise EncoderError(
                f"{path}: schema hash {header['schema_hash']} != expected {expect_schema_hash}"
            )
        tensors = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            tensors[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return header["kind"], header["schema_hash"], header["config"], tensors


def encoder_config_to_dict(cfg: EncoderConfig) -> dict:
    return asdict(cfg)


def encoder_config_from_dict(d: dict) -> EncoderConfig:
    return EncoderConfig(**d)


def params_checksum(params: dict[str, np.ndarray]) -> str:
    import hashlib

    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()
