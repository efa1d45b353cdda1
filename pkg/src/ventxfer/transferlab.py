"""Transfer-evaluation harness: splits, subsampling, supervised training,
and the regime x task x fraction x seed grid.

Six regimes are compared on the target institution. Source-only applies a
source-trained model unchanged. Target-only trains from scratch on target
data. The source-* regimes initialize from a source-supervised baseline and
the cpc-* regimes from a contrastively pre-trained encoder; the -ftd variants
freeze the encoder and train only the head, the -ftf variants train
everything. Each grid cell writes its result row atomically so interrupted
runs resume without recomputation.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import cohort
from . import cpcpretrain as cpc
from . import encoders as enc
from .config import ALL_REGIMES, ExperimentConfig
from .evalmetrics import ScoredSet, auprc, auroc, balanced_accuracy, select_threshold
from .ndgrad import OptimState, Tape, backward, concat, grad_for
from .rng import stream


class TransferError(ValueError):
    def __init__(self, message, curve=None):
        super().__init__(message)
        self.curve = curve or []


@dataclass(frozen=True)
class Regime:
    name: str
    encoder_init: str  # "random" | "source-supervised" | "source-cpc"
    trainable: str  # "full" | "head-only" | "none"
    feat_kind: str  # "linear-projection" | "mlp"


REGIMES = {
    "source-only": Regime("source-only", "source-supervised", "none", "linear-projection"),
    "target-only": Regime("target-only", "random", "full", "linear-projection"),
    "source-ftd": Regime("source-ftd", "source-supervised", "head-only", "linear-projection"),
    "source-ftf": Regime("source-ftf", "source-supervised", "full", "linear-projection"),
    "cpc-ftd": Regime("cpc-ftd", "source-cpc", "head-only", "mlp"),
    "cpc-ftf": Regime("cpc-ftf", "source-cpc", "full", "mlp"),
}
assert set(REGIMES) == set(ALL_REGIMES)

SPLIT_PROPS = (0.65, 0.15, 0.20)
SPLIT_NAMES = ("train", "val", "test")


# --- splitting ---------------------------------------------------------------

@dataclass
class SplitAssignment:
    seed: int
    fraction: float
    assign: dict[str, str]  # episode id -> train | val | test
    pretrain_pool: list[str]  # censored episodes, pre-training only

    def ids(self, split: str) -> list[str]:
        return [i for i, s in self.assign.items() if s == split]


def _largest_remainder(n: int, props) -> list[int]:
    raw = [p * n for p in props]
    base = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(props)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[: n - sum(base)]:
        base[i] += 1
    return base


def split(episodes: list[cohort.Episode], seed: int) -> SplitAssignment:
    """Episode-level 65/15/20 split, stratified on the reintubation label.

    Censored episodes go to a separate pre-training pool. Overall split sizes
    follow largest-remainder rounding exactly; per-stratum allocations are
    repaired toward those totals one move at a time.
    """
    eligible = sorted(
        (e for e in episodes if e.outcome != "censored"), key=lambda e: e.episode_id
    )
    pool = sorted(
        (e.episode_id for e in episodes if e.outcome == "censored")
    )
    if len(eligible) < 20:
        raise TransferError(f"need at least 20 eligible episodes, got {len(eligible)}")
    strata = {0: [], 1: []}
    for e in eligible:
        strata[int(e.outcome == "failure")].append(e.episode_id)
    if not strata[0] or not strata[1]:
        raise TransferError("both reintubation strata must be non-empty")

    targets = _largest_remainder(len(eligible), SPLIT_PROPS)
    counts = {lab: _largest_remainder(len(ids), SPLIT_PROPS) for lab, ids in strata.items()}
    while True:
        cols = [sum(counts[lab][c] for lab in strata) for c in range(3)]
        diffs = [cols[c] - targets[c] for c in range(3)]
        if all(d == 0 for d in diffs):
            break
        over = diffs.index(max(diffs))
        under = diffs.index(min(diffs))
        donor = max(strata, key=lambda lab: counts[lab][over])
        counts[donor][over] -= 1
        counts[donor][under] += 1

    rng = stream(seed, "split")
    assign: dict[str, str] = {}
    for lab in sorted(strata):
        ids = strata[lab]
        perm = [ids[i] for i in rng.permutation(len(ids))]
        start = 0
        for c, name in enumerate(SPLIT_NAMES):
            for eid in perm[start:start + counts[lab][c]]:
                assign[eid] = name
            start += counts[lab][c]
    return SplitAssignment(seed=seed, fraction=1.0, assign=assign, pretrain_pool=pool)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def subsample(
    assignment: SplitAssignment,
    fraction: float,
    seed: int,
    labels: dict[str, int],
) -> SplitAssignment:
    """Stratified subset of the train split; val/test untouched.

    One seeded permutation per stratum is shared by all fractions, and each
    fraction takes a prefix, so smaller fractions nest inside larger ones.
    """
    if not 0.0 < fraction <= 1.0:
        raise TransferError(f"fraction {fraction} outside (0, 1]")
    if fraction == 1.0:
        return SplitAssignment(assignment.seed, 1.0, dict(assignment.assign),
                               list(assignment.pretrain_pool))
    strata: dict[int, list[str]] = {}
    for eid in sorted(assignment.ids("train")):
        strata.setdefault(labels[eid], []).append(eid)
    kept: set[str] = set()
    for lab in sorted(strata):
        ids = strata[lab]
        perm = stream(seed, "subsample", lab).permutation(len(ids))
        n_keep = max(1, _round_half_up(fraction * len(ids)))
        kept.update(ids[i] for i in perm[:n_keep])
    assign = {
        eid: s
        for eid, s in assignment.assign.items()
        if s != "train" or eid in kept
    }
    if not any(labels[eid] == 1 for eid in kept) or not any(
        labels[eid] == 0 for eid in kept
    ):
        raise TransferError(f"fraction {fraction} leaves a single-class train set")
    return SplitAssignment(assignment.seed, fraction, assign,
                           list(assignment.pretrain_pool))


# --- dataset construction ----------------------------------------------------

@dataclass
class Task1Sample:
    episode_id: str
    x: np.ndarray  # (L, D), last `window` hours of ventilation
    label: int


@dataclass
class Task2Sequence:
    episode_id: str
    x: np.ndarray  # (E, D), full ventilation course
    labels: np.ndarray  # (E,) floats, row t-1 labels hour t
    label_mask: np.ndarray  # (E,) bool, True on monitored hours


def make_cpc_seqdata(
    episode: cohort.Episode, standardizer: cohort.Standardizer
) -> cpc.SeqData:
    x = standardizer.encode(episode.grid)
    if episode.outcome == "censored" or episode.extubation_hour is None:
        return cpc.SeqData(episode.episode_id, x, tte=None)
    ext = episode.extubation_hour
    tte = ext - np.arange(1, ext + 1, dtype=np.float64)
    return cpc.SeqData(episode.episode_id, x[:ext], tte=tte)


def make_task1_sample(
    episode: cohort.Episode, standardizer: cohort.Standardizer, window: int
) -> Task1Sample | None:
    seq = cohort.label_task1(episode)
    if seq is None:
        return None
    x = standardizer.encode(episode.grid[:seq.end_hour])
    return Task1Sample(episode.episode_id, x[-window:], seq.label)


def make_task2_sequence(
    episode: cohort.Episode, standardizer: cohort.Standardizer
) -> Task2Sequence | None:
    seqs = cohort.label_task2(episode)
    if not seqs:
        return None
    ext = episode.extubation_hour
    x = standardizer.encode(episode.grid[:ext])
    labels = np.zeros(ext)
    mask = np.zeros(ext, dtype=bool)
    for s in seqs:
        labels[s.end_hour - 1] = float(s.label)
        mask[s.end_hour - 1] = True
    return Task2Sequence(episode.episode_id, x, labels, mask)


def build_task_data(episodes, standardizer, task: int, window: int):
    out = []
    for e in episodes:
        item = (make_task1_sample(e, standardizer, window) if task == 1
                else make_task2_sequence(e, standardizer))
        if item is not None:
            out.append(item)
    if not out:
        raise TransferError(f"no labeled data for task {task}")
    return out


# --- batched forward passes --------------------------------------------------

def _task1_batch_context(tape, leaves, enc_cfg, batch: list[Task1Sample], dropout_rng):
    """Right-padded batch; the hidden state at each sample's last real row is
    selected with a 0/1 mask so padding never reaches the head."""
    max_t = max(s.x.shape[0] for s in batch)
    n = len(batch)
    d = batch[0].x.shape[1]
    x = np.zeros((max_t, n, d))
    last = np.zeros(n, dtype=int)
    for b, s in enumerate(batch):
        x[: s.x.shape[0], b] = s.x
        last[b] = s.x.shape[0] - 1
    steps = []
    for t in range(max_t):
        z = enc.feat_forward(tape, leaves, enc_cfg, tape.const(x[t]), dropout_rng)
        steps.append(z)
    cs = enc.gru_steps(tape, leaves, enc_cfg, steps)
    sel = None
    for t in range(max_t):
        hit = (last == t).astype(np.float64).reshape(n, 1)
        if not hit.any():
            continue
        term = cs[t].mul(tape.const(hit))
        sel = term if sel is None else sel.add(term)
    return sel  # (n, H)


def _task1_batch_logits(tape, leaves, enc_cfg, batch: list[Task1Sample], dropout_rng):
    sel = _task1_batch_context(tape, leaves, enc_cfg, batch, dropout_rng)
    return enc.head_forward(tape, leaves, sel)  # (n, 1)


def _task2_batch_contexts(tape, leaves, enc_cfg, batch: list[Task2Sequence], dropout_rng):
    """Right-padded full-sequence pass; returns per-timestep context tensors in
    timestep-major order plus (max_t, n) labels and validity mask."""
    max_t = max(s.x.shape[0] for s in batch)
    n = len(batch)
    d = batch[0].x.shape[1]
    x = np.zeros((max_t, n, d))
    labels = np.zeros((max_t, n))
    mask = np.zeros((max_t, n))
    for b, s in enumerate(batch):
        t_b = s.x.shape[0]
        x[:t_b, b] = s.x
        labels[:t_b, b] = s.labels
        mask[:t_b, b] = s.label_mask
    steps = []
    for t in range(max_t):
        z = enc.feat_forward(tape, leaves, enc_cfg, tape.const(x[t]), dropout_rng)
        steps.append(z)
    cs = enc.gru_steps(tape, leaves, enc_cfg, steps)
    return cs, labels, mask


def _task2_batch_logits(tape, leaves, enc_cfg, batch: list[Task2Sequence], dropout_rng):
    cs, labels, mask = _task2_batch_contexts(tape, leaves, enc_cfg, batch, dropout_rng)
    logits = concat([enc.head_forward(tape, leaves, c) for c in cs], axis=0)
    return logits, labels.reshape(-1), mask.reshape(-1)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return enc.sigmoid_np(v)


def _task1_batch_context_np(params, enc_cfg, batch: list[Task1Sample]) -> np.ndarray:
    """Inference-only twin of _task1_batch_context: (n, H) final contexts."""
    max_t = max(s.x.shape[0] for s in batch)
    n = len(batch)
    d = batch[0].x.shape[1]
    x = np.zeros((max_t, n, d))
    last = np.zeros(n, dtype=int)
    for b, s in enumerate(batch):
        x[: s.x.shape[0], b] = s.x
        last[b] = s.x.shape[0] - 1
    z = enc.feat_forward_np(params, enc_cfg, x.reshape(max_t * n, d))
    cs = enc.gru_steps_np(params, enc_cfg, z.reshape(max_t, n, -1))
    return cs[last, np.arange(n)]


def _task2_batch_contexts_np(params, enc_cfg, batch: list[Task2Sequence]):
    """Inference-only twin of _task2_batch_contexts: (max_t, n, H) contexts
    plus (max_t, n) labels and validity mask."""
    max_t = max(s.x.shape[0] for s in batch)
    n = len(batch)
    d = batch[0].x.shape[1]
    x = np.zeros((max_t, n, d))
    labels = np.zeros((max_t, n))
    mask = np.zeros((max_t, n))
    for b, s in enumerate(batch):
        t_b = s.x.shape[0]
        x[:t_b, b] = s.x
        labels[:t_b, b] = s.labels
        mask[:t_b, b] = s.label_mask
    z = enc.feat_forward_np(params, enc_cfg, x.reshape(max_t * n, d))
    cs = enc.gru_steps_np(params, enc_cfg, z.reshape(max_t, n, -1))
    return cs, labels, mask


def score_task1(params, enc_cfg, samples: list[Task1Sample],
                batch_size: int = 128) -> ScoredSet:
    scores, labels = [], []
    for s0 in range(0, len(samples), batch_size):
        batch = samples[s0:s0 + batch_size]
        c = _task1_batch_context_np(params, enc_cfg, batch)
        logits = c @ params["head.W"] + params["head.b"]
        scores.append(_sigmoid(logits[:, 0]))
        labels.extend(s.label for s in batch)
    return ScoredSet(np.concatenate(scores), np.array(labels))


def score_task2(params, enc_cfg, sequences: list[Task2Sequence],
                batch_size: int = 128) -> ScoredSet:
    ordered = sorted(sequences, key=lambda s: (s.x.shape[0], s.episode_id))
    scores, labels = [], []
    for s0 in range(0, len(ordered), batch_size):
        batch = ordered[s0:s0 + batch_size]
        cs, y, m = _task2_batch_contexts_np(params, enc_cfg, batch)
        h = cs.reshape(-1, cs.shape[2])
        logits = h @ params["head.W"] + params["head.b"]
        keep = m.reshape(-1) > 0
        scores.append(_sigmoid(logits[:, 0])[keep])
        labels.append(y.reshape(-1)[keep])
    return ScoredSet(np.concatenate(scores), np.concatenate(labels).astype(int))


def score_set(params, enc_cfg, task: int, data, batch_size: int = 128) -> ScoredSet:
    if task == 1:
        return score_task1(params, enc_cfg, data, batch_size)
    return score_task2(params, enc_cfg, data, batch_size)


def _frozen_feature_blocks(params, enc_cfg, task: int, data, batch_size: int):
    """Per-item frozen-encoder contexts for head-only training.

    Head-only regimes never update the encoder, so its outputs are computed
    once, deterministically (the frozen part runs in eval mode, matching how
    it is scored), instead of being recomputed with dropout every epoch.
    Returns lists aligned with `data`: an (n_i, H) context block and (n_i,)
    label vector per item (n_i is 1 for task 1, the labeled-hour count for
    task 2).
    """
    feats: list = [None] * len(data)
    labs: list = [None] * len(data)
    idx = sorted(range(len(data)),
                 key=lambda i: (data[i].x.shape[0], data[i].episode_id))
    for s0 in range(0, len(idx), batch_size):
        sel = idx[s0:s0 + batch_size]
        batch = [data[i] for i in sel]
        if task == 1:
            c = _task1_batch_context_np(params, enc_cfg, batch)
            for row, i in enumerate(sel):
                feats[i] = c[row:row + 1]
                labs[i] = np.array([float(batch[row].label)])
        else:
            ctx, labels, mask = _task2_batch_contexts_np(params, enc_cfg, batch)
            for col, i in enumerate(sel):
                keep = mask[:, col] > 0
                feats[i] = ctx[keep, col]
                labs[i] = labels[keep, col]
    return feats, labs


# --- supervised training -----------------------------------------------------

@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    curve: list[tuple[int, float, float]]  # (epoch, train_loss, val_auroc)
    best_epoch: int
    stopped_epoch: int


def _init_params(regime: Regime, enc_cfg: enc.EncoderConfig, checkpoint_tensors,
                 rng: np.random.Generator) -> dict[str, np.ndarray]:
    if regime.encoder_init == "random":
        params = enc.init_encoder_params(enc_cfg, rng)
    else:
        if checkpoint_tensors is None:
            raise TransferError(
                f"regime {regime.name} needs a {regime.encoder_init} checkpoint"
            )
        params = {
            k: v.copy()
            for k, v in checkpoint_tensors.items()
            if k.startswith(("feat.", "gru."))
        }
    params |= enc.init_head_params(enc_cfg.output_dim, rng)
    # A zero head starts the trajectory along the class-separation gradient
    # and feeds no gradient into a pretrained encoder until it has signal.
    params["head.W"] = np.zeros_like(params["head.W"])
    return params


def train_supervised(
    regime: Regime,
    task: int,
    train_data,
    val_data,
    enc_cfg: enc.EncoderConfig,
    loss_spec: enc.LossSpec,
    seed: int,
    checkpoint_tensors: dict | None = None,
    lr: float = 1e-3,
    weight_decay: float = 1e-5,
    batch_size: int = 128,
    max_epochs: int = 100,
    patience: int = 5,
    min_delta: float = 1e-3,
    init_rng: np.random.Generator | None = None,
) -> TrainResult:
    """Mini-batch training with early stopping on validation AUROC.

    The best checkpoint is kept on any validation improvement, but the
    patience counter only resets on an improvement of at least `min_delta`;
    gains below the seed-to-seed noise floor should not extend training.

    Head-only regimes bind the encoder as constants, so no gradient ever
    reaches it and its parameters stay bit-identical.
    """
    if regime.trainable == "none":
        raise TransferError(f"regime {regime.name} does not train")
    if init_rng is None:
        init_rng = stream(seed, "init", task)
    params = _init_params(regime, enc_cfg, checkpoint_tensors, init_rng)
    trainable = True if regime.trainable == "full" else {"head."}
    opt = OptimState(lr=lr, weight_decay=weight_decay)
    batch_rng = stream(seed, "batch", task)
    dropout_rng = stream(seed, "dropout", task)

    if task == 2:
        train_data = sorted(train_data, key=lambda s: (s.x.shape[0], s.episode_id))

    head_only = regime.trainable == "head-only"
    if head_only:
        train_feats, train_labs = _frozen_feature_blocks(
            params, enc_cfg, task, train_data, batch_size)
        val_feats, val_labs = _frozen_feature_blocks(
            params, enc_cfg, task, val_data, batch_size)
        val_x = np.concatenate(val_feats)
        val_y = np.concatenate(val_labs).astype(int)

    best = copy.deepcopy(params)
    best_val = -1.0
    best_epoch = 0
    since_best = 0
    curve = []
    stopped = max_epochs
    for epoch in range(1, max_epochs + 1):
        if task == 1:
            order = batch_rng.permutation(len(train_data))
            starts = list(range(0, len(order), batch_size))
        else:
            # keep length-sorted buckets, shuffle bucket order
            starts = list(range(0, len(train_data), batch_size))
            order = np.arange(len(train_data))
            starts = [starts[i] for i in batch_rng.permutation(len(starts))]
        losses = []
        for s0 in starts:
            sel_idx = order[s0:s0 + batch_size]
            batch = [train_data[i] for i in sel_idx]
            tape = Tape()
            if head_only:
                leaves = enc.bind(
                    tape, {k: params[k] for k in ("head.W", "head.b")},
                    trainable=True)
                xb = np.concatenate([train_feats[i] for i in sel_idx])
                yb = np.concatenate([train_labs[i] for i in sel_idx])
                logits = enc.head_forward(tape, leaves, tape.const(xb))
                loss = enc.classification_loss(tape, loss_spec, logits, yb)
            elif task == 1:
                leaves = enc.bind(tape, params, trainable=trainable)
                logits = _task1_batch_logits(tape, leaves, enc_cfg, batch, dropout_rng)
                loss = enc.classification_loss(
                    tape, loss_spec, logits, np.array([s.label for s in batch], float)
                )
            else:
                leaves = enc.bind(tape, params, trainable=trainable)
                logits, y, m = _task2_batch_logits(tape, leaves, enc_cfg, batch, dropout_rng)
                if m.sum() == 0:
                    continue
                loss = enc.classification_loss(tape, loss_spec, logits, y, m)
            if not np.isfinite(loss.data):
                raise TransferError(f"training diverged at epoch {epoch}", curve)
            grads_map = backward(tape, loss)
            grads = {
                k: grad_for(tape, grads_map, v)
                for k, v in leaves.items()
                if tape.nodes[v.node_id].requires_grad
            }
            opt.step(params, grads)
            losses.append(float(loss.data))
        if head_only:
            val_logits = val_x @ params["head.W"] + params["head.b"]
            val = ScoredSet(_sigmoid(val_logits[:, 0]), val_y)
        else:
            val = score_set(params, enc_cfg, task, val_data, batch_size)
        val_auroc = auroc(val)
        curve.append((epoch, float(np.mean(losses)), val_auroc))
        if val_auroc > best_val:
            significant = val_auroc > best_val + min_delta
            best_val = val_auroc
            best = copy.deepcopy(params)
            best_epoch = epoch
            if significant:
                since_best = 0
                continue
        since_best += 1
        if since_best >= patience:
            stopped = epoch
            break
    return TrainResult(best, curve, best_epoch, stopped)


# --- grid orchestration ------------------------------------------------------

def _encoder_config(cfg: ExperimentConfig, feat_kind: str, input_dim: int) -> enc.EncoderConfig:
    return enc.EncoderConfig(
        feat_kind=feat_kind,
        input_dim=input_dim,
        feat_dim=cfg.feat_dim,
        hidden_dim=cfg.hidden_dim,
        num_layers=cfg.layers,
        dropout_rate=cfg.dropout,
        bidirectional=cfg.bidirectional,
    )


def _loss_spec(cfg: ExperimentConfig) -> enc.LossSpec:
    return enc.LossSpec(cfg.loss, cfg.focal_alpha, cfg.focal_gamma)


def cell_name(task: int, regime: str, fraction: float, seed: int) -> str:
    return f"t{task}_{regime}_f{fraction:g}_s{seed}"


def grid_cells(cfg: ExperimentConfig) -> list[tuple[int, str, float, int]]:
    cells = []
    for task in (1, 2):
        for regime in cfg.regimes:
            fractions = [1.0] if regime == "source-only" else cfg.fractions
            for fraction in fractions:
                for seed in cfg.seeds:
                    cells.append((task, regime, fraction, seed))
    return cells


def _file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def _atomic_write_json(path, doc) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


@dataclass
class GridContext:
    """Everything a grid cell needs, precomputed once per run."""

    cfg: ExperimentConfig
    schema: object
    source_eps: dict[str, cohort.Episode]
    target_eps: dict[str, cohort.Episode]
    data_hash: str
    out_dir: str
    # per-seed artifacts
    source_splits: dict[int, SplitAssignment] = field(default_factory=dict)
    target_splits: dict[int, SplitAssignment] = field(default_factory=dict)
    source_standardizers: dict[int, cohort.Standardizer] = field(default_factory=dict)
    cpc_params: dict[int, dict] = field(default_factory=dict)
    source_models: dict[tuple[int, int], dict] = field(default_factory=dict)
    source_val_sets: dict[tuple[int, int], ScoredSet] = field(default_factory=dict)


def _episodes(store: dict[str, cohort.Episode], ids) -> list[cohort.Episode]:
    return [store[i] for i in sorted(ids)]


def _task1_labels(eps: dict[str, cohort.Episode]) -> dict[str, int]:
    return {
        e.episode_id: int(e.outcome == "failure")
        for e in eps.values()
        if e.outcome != "censored"
    }


def prepare_context(
    cfg: ExperimentConfig,
    schema,
    source_eps: list[cohort.Episode],
    target_eps: list[cohort.Episode],
    out_dir: str,
    data_hash: str,
    progress=None,
    resume: bool = True,
) -> GridContext:
    """Per-seed shared artifacts: splits, source standardizers, the CPC
    checkpoint and the source-supervised baselines (cached on disk)."""
    ctx = GridContext(
        cfg=cfg,
        schema=schema,
        source_eps={e.episode_id: e for e in source_eps},
        target_eps={e.episode_id: e for e in target_eps},
        data_hash=data_hash,
        out_dir=out_dir,
    )
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    curve_dir = os.path.join(out_dir, "curves")
    os.makedirs(ckpt_dir, exist_ok=True)
    os.makedirs(curve_dir, exist_ok=True)
    times_path = os.path.join(ckpt_dir, "build_times.json")
    build_times = {}
    if os.path.exists(times_path):
        with open(times_path) as fh:
            build_times = json.load(fh)

    def _timed(key, fn):
        t0 = time.monotonic()
        out = fn()
        build_times[key] = round(time.monotonic() - t0, 3)
        _atomic_write_json(times_path, build_times)
        return out
    needs_cpc = any(r.startswith("cpc-") for r in cfg.regimes)
    needs_src = any(r.startswith("source-") for r in cfg.regimes)
    loss_spec = _loss_spec(cfg)
    for seed in cfg.seeds:
        ctx.source_splits[seed] = split(list(ctx.source_eps.values()), seed)
        ctx.target_splits[seed] = split(list(ctx.target_eps.values()), seed)
        std = cohort.Standardizer(schema).fit(
            _episodes(ctx.source_eps, ctx.source_splits[seed].ids("train"))
        )
        ctx.source_standardizers[seed] = std

        if needs_cpc:
            path = os.path.join(ckpt_dir, f"cpc_s{seed}.ckpt")
            if resume and os.path.exists(path):
                _, _, _, tensors = enc.load_checkpoint(path, schema.hash())
                ctx.cpc_params[seed] = tensors
            else:
                if progress:
                    progress(f"pretrain cpc seed {seed}")
                ctx.cpc_params[seed] = _timed(
                    f"cpc_s{seed}", lambda: _pretrain_cpc(ctx, seed, std, curve_dir)
                )
                enc.save_checkpoint(
                    path, "cpc-encoder", schema.hash(),
                    {"standardizer": std.state()}, ctx.cpc_params[seed],
                )
        if needs_src:
            for task in (1, 2):
                path = os.path.join(ckpt_dir, f"src_t{task}_s{seed}.ckpt")
                if resume and os.path.exists(path):
                    _, _, _, tensors = enc.load_checkpoint(path, schema.hash())
                    ctx.source_models[(task, seed)] = tensors
                else:
                    if progress:
                        progress(f"train source baseline task {task} seed {seed}")
                    ctx.source_models[(task, seed)] = _timed(
                        f"src_t{task}_s{seed}",
                        lambda: _train_source_baseline(ctx, task, seed, std, loss_spec),
                    )
                    enc.save_checkpoint(
                        path, "source-supervised", schema.hash(),
                        {"task": task, "standardizer": std.state()},
                        ctx.source_models[(task, seed)],
                    )
    return ctx


def _pretrain_cpc(ctx: GridContext, seed: int, std: cohort.Standardizer,
                  curve_dir: str) -> dict[str, np.ndarray]:
    cfg = ctx.cfg
    sa = ctx.source_splits[seed]
    train_ids = sorted(sa.ids("train") + sa.pretrain_pool)
    train_eps = [make_cpc_seqdata(ctx.source_eps[i], std) for i in train_ids]
    val_eps = [make_cpc_seqdata(e, std)
               for e in _episodes(ctx.source_eps, sa.ids("val"))]
    enc_cfg = _encoder_config(cfg, "mlp", std.encoded_dim)
    sampler = cpc.SamplerConfig(
        beta=cfg.beta, n_pos_anchors=cfg.n_pos_anchors,
        n_neg_per_pos=cfg.n_neg_per_pos, k_steps=cfg.k_steps, guided=cfg.guided,
    )
    result = cpc.pretrain(
        train_eps, val_eps, enc_cfg, sampler, seed,
        lr=cfg.lr, weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
        max_epochs=cfg.max_epochs, patience=cfg.patience, window=cfg.window,
    )
    cpc.write_curve_csv(os.path.join(curve_dir, f"cpc_s{seed}.csv"), result.curve)
    return result.params


def _train_source_baseline(ctx: GridContext, task: int, seed: int,
                           std: cohort.Standardizer, loss_spec) -> dict:
    cfg = ctx.cfg
    sa = ctx.source_splits[seed]
    train = build_task_data(_episodes(ctx.source_eps, sa.ids("train")), std, task, cfg.window)
    val = build_task_data(_episodes(ctx.source_eps, sa.ids("val")), std, task, cfg.window)
    enc_cfg = _encoder_config(cfg, "linear-projection", std.encoded_dim)
    result = train_supervised(
        REGIMES["target-only"], task, train, val, enc_cfg, loss_spec, seed,
        lr=cfg.lr, weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
        max_epochs=cfg.max_epochs, patience=cfg.patience,
        init_rng=stream(seed, "init", task, 100),
    )
    ctx.source_val_sets[(task, seed)] = score_set(
        result.params, enc_cfg, task, val, cfg.batch_size
    )
    return result.params


def run_cell(ctx: GridContext, task: int, regime_name: str, fraction: float,
             seed: int, scores_path=None) -> dict:
    """Train and evaluate one grid cell; returns the report row."""
    t0 = time.monotonic()
    cfg = ctx.cfg
    regime = REGIMES[regime_name]
    loss_spec = _loss_spec(cfg)
    target_split = ctx.target_splits[seed]
    labels = _task1_labels(ctx.target_eps)
    enc_cfg = _encoder_config(cfg, regime.feat_kind, ctx.source_standardizers[seed].encoded_dim)

    if regime_name == "source-only":
        std = ctx.source_standardizers[seed]
        params = ctx.source_models[(task, seed)]
        val_set = ctx.source_val_sets.get((task, seed))
        if val_set is None:
            sa = ctx.source_splits[seed]
            val = build_task_data(_episodes(ctx.source_eps, sa.ids("val")), std, task, cfg.window)
            val_set = score_set(params, enc_cfg, task, val, cfg.batch_size)
    else:
        sub = subsample(target_split, fraction, seed, labels)
        if regime_name == "target-only":
            std = cohort.Standardizer(ctx.schema).fit(
                _episodes(ctx.target_eps, sub.ids("train"))
            )
            tensors = None
        else:
            std = ctx.source_standardizers[seed]
            tensors = (ctx.cpc_params[seed] if regime.encoder_init == "source-cpc"
                       else ctx.source_models[(task, seed)])
        train = build_task_data(_episodes(ctx.target_eps, sub.ids("train")), std, task, cfg.window)
        val = build_task_data(_episodes(ctx.target_eps, sub.ids("val")), std, task, cfg.window)
        result = train_supervised(
            regime, task, train, val, enc_cfg, loss_spec, seed,
            checkpoint_tensors=tensors,
            lr=cfg.lr, weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
            max_epochs=cfg.max_epochs, patience=cfg.patience,
        )
        params = result.params
        val_set = score_set(params, enc_cfg, task, val, cfg.batch_size)

    test = build_task_data(
        _episodes(ctx.target_eps, target_split.ids("test")), std, task, cfg.window
    )
    test_set = score_set(params, enc_cfg, task, test, cfg.batch_size)
    if scores_path is not None:
        tmp = f"{scores_path}.tmp.{os.getpid()}.npz"
        np.savez(tmp, scores=test_set.scores, labels=test_set.labels)
        os.replace(tmp, scores_path)
    threshold = select_threshold(val_set)
    return {
        "task": task,
        "regime": regime_name,
        "fraction": fraction,
        "seed": seed,
        "auroc": auroc(test_set),
        "auprc": auprc(test_set),
        "bacc": balanced_accuracy(test_set, threshold),
        "n_test": len(test_set),
        "config_hash": cfg.hash(),
        "data_hash": ctx.data_hash,
        "runtime_s": round(time.monotonic() - t0, 3),
    }


def run_grid(ctx: GridContext, resume: bool = True, progress=None,
             only=None) -> list[dict]:
    """All grid cells, each persisted to its own row file; failures are
    recorded in the row and the grid keeps going. `only` is an optional
    cell predicate for partial runs."""
    rows_dir = os.path.join(ctx.out_dir, "rows")
    scores_dir = os.path.join(ctx.out_dir, "scores")
    os.makedirs(rows_dir, exist_ok=True)
    os.makedirs(scores_dir, exist_ok=True)
    cells = grid_cells(ctx.cfg)
    if only is not None:
        cells = [c for c in cells if only(c)]
    rows = []
    for task, regime, fraction, seed in cells:
        name = cell_name(task, regime, fraction, seed)
        path = os.path.join(rows_dir, f"{name}.json")
        if resume and os.path.exists(path):
            with open(path) as fh:
                row = json.load(fh)
        else:
            try:
                row = run_cell(ctx, task, regime, fraction, seed,
                               scores_path=os.path.join(scores_dir, f"{name}.npz"))
            except Exception as exc:  # record the failure, keep the grid alive
                row = {
                    "task": task, "regime": regime, "fraction": fraction,
                    "seed": seed, "error": str(exc),
                    "config_hash": ctx.cfg.hash(), "data_hash": ctx.data_hash,
                }
            _atomic_write_json(path, row)
        if progress:
            progress(_row_line(row))
        rows.append(row)
    write_rows_jsonl(os.path.join(ctx.out_dir, "rows.jsonl"), rows)
    return rows


def _row_line(row: dict) -> str:
    head = cell_name(row["task"], row["regime"], row["fraction"], row["seed"])
    if "error" in row:
        return f"{head}: FAILED ({row['error']})"
    return (f"{head}: auroc {row['auroc']:.3f} auprc {row['auprc']:.3f} "
            f"bacc {row['bacc']:.3f}")


def write_rows_jsonl(path, rows: list[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True))
            fh.write("\n")


def read_rows_jsonl(path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows
