"""Contrastive predictive coding with similarity-guided negative sampling.

Anchors (episode, t) predict their own next K feature-level representations;
negatives are representations at other positions in the same batch, drawn
either uniformly or with probability proportional to exp(beta * similarity),
where similarity is the negative absolute difference in time-to-extubation.
Censored episodes carry no event time and enter the pool at the minimum
similarity, so they act as easy negatives but still contribute.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import encoders as enc
from .ndgrad import OptimState, Tape, backward, concat, grad_for
from .rng import stream


class CpcError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    beta: float = 2.0
    n_pos_anchors: int = 8
    n_neg_per_pos: int = 8
    k_steps: int = 4
    guided: bool = True

    def __post_init__(self):
        if self.k_steps < 1 or self.n_pos_anchors < 1 or self.n_neg_per_pos < 1:
            raise CpcError("counts must be positive")
        if self.beta < 0:
            raise CpcError("beta must be >= 0")


@dataclass
class SeqData:
    """One encoded episode: standardized features plus hours-to-extubation."""

    episode_id: str
    x: np.ndarray  # (T, D)
    tte: np.ndarray | None  # (T,), None for censored episodes
    label: int | None = None

    @property
    def length(self) -> int:
        return self.x.shape[0]


@dataclass
class ContrastiveBatch:
    anchors: list[tuple[int, int]]  # (episode index, t)
    negatives: list[list[tuple[int, int]]]  # per anchor: (episode index, t')


def valid_anchor_positions(episodes: list[SeqData], k_steps: int) -> list[tuple[int, int]]:
    # 0-based: anchor row t has K future rows t+1..t+K inside the episode
    out = []
    for i, ep in enumerate(episodes):
        for t in range(0, ep.length - k_steps):
            out.append((i, t))
    return out


def select_anchors(
    episodes: list[SeqData], config: SamplerConfig, rng: np.random.Generator
) -> list[tuple[int, int]]:
    """Uniform anchors over valid (episode, t); censored episodes included."""
    positions = valid_anchor_positions(episodes, config.k_steps)
    if not positions:
        raise CpcError("no valid anchor positions (episodes too short for K)")
    n = min(config.n_pos_anchors, len(positions))
    idx = rng.choice(len(positions), size=n, replace=False)
    return [positions[i] for i in sorted(idx)]


def similarity(tte_a: float | None, tte_b: float | None) -> float | None:
    """-|delta TTE| in hours; None when either side has no event time."""
    if tte_a is None or tte_b is None:
        return None
    return -abs(tte_a - tte_b)


def negative_weights(
    anchor_tte: float | None, pool_ttes: list[float | None], beta: float
) -> np.ndarray:
    """Softmax over exp(beta * m), overflow-safe; censored pairs get the
    pool's minimum similarity."""
    if not pool_ttes:
        raise CpcError("empty candidate pool")
    sims = np.array([
        s if (s := similarity(anchor_tte, t)) is not None else np.nan
        for t in pool_ttes
    ])
    if np.isnan(sims).all():
        sims = np.zeros_like(sims)
    else:
        sims = np.where(np.isnan(sims), np.nanmin(sims), sims)
    logits = beta * sims
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def _candidate_pool(
    episodes: list[SeqData], anchor: tuple[int, int], k_steps: int
) -> list[tuple[int, int]]:
    i, t = anchor
    forbidden = set(range(t + 1, t + k_steps + 1))
    pool = []
    for j, ep in enumerate(episodes):
        for tp in range(ep.length):
            if j == i and tp in forbidden:
                continue
            pool.append((j, tp))
    return pool


def _pool_tte(episodes: list[SeqData], pos: tuple[int, int]) -> float | None:
    j, tp = pos
    t = episodes[j].tte
    return None if t is None else float(t[tp])


def _flat_pool(episodes: list[SeqData]):
    """Batch-wide candidate arrays: episode index, row index and TTE (NaN for
    censored rows) for every position, built once and reused per anchor."""
    lengths = np.array([ep.length for ep in episodes])
    ep_idx = np.repeat(np.arange(len(episodes)), lengths)
    t_idx = np.concatenate([np.arange(n) for n in lengths])
    ttes = np.concatenate([
        np.full(ep.length, np.nan) if ep.tte is None else np.asarray(ep.tte, float)
        for ep in episodes
    ])
    return ep_idx, t_idx, ttes


def sample_negatives(
    anchor: tuple[int, int],
    episodes: list[SeqData],
    config: SamplerConfig,
    rng: np.random.Generator,
    flat=None,
) -> list[tuple[int, int]]:
    """Draw negatives without replacement by iterative renormalization."""
    i, t = anchor
    ep_idx, t_idx, ttes = _flat_pool(episodes) if flat is None else flat
    allowed = ~((ep_idx == i) & (t_idx >= t + 1) & (t_idx <= t + config.k_steps))
    n_pool = int(allowed.sum())
    if n_pool < config.n_neg_per_pos:
        raise CpcError(
            f"anchor {anchor}: only {n_pool} candidates for "
            f"{config.n_neg_per_pos} negatives"
        )
    beta = config.beta if config.guided else 0.0
    anchor_tte = None if episodes[i].tte is None else float(episodes[i].tte[t])
    sims = -np.abs(ttes - (np.nan if anchor_tte is None else anchor_tte))
    sims = sims[allowed]
    if np.isnan(sims).all():
        sims = np.zeros_like(sims)
    else:
        sims = np.where(np.isnan(sims), np.nanmin(sims), sims)
    logits = beta * sims
    logits -= logits.max()
    w = np.exp(logits)
    pool_rows = np.flatnonzero(allowed)
    chosen: list[tuple[int, int]] = []
    for _ in range(config.n_neg_per_pos):
        w_sum = w.sum()
        if w_sum <= 0:
            raise CpcError("negative-weight mass exhausted")
        pick = rng.choice(len(pool_rows), p=w / w_sum)
        row = pool_rows[pick]
        chosen.append((int(ep_idx[row]), int(t_idx[row])))
        w[pick] = 0.0
    return chosen


def build_batch(
    episodes: list[SeqData], config: SamplerConfig, rng: np.random.Generator
) -> ContrastiveBatch:
    anchors = select_anchors(episodes, config, rng)
    flat = _flat_pool(episodes)
    negatives = [sample_negatives(a, episodes, config, rng, flat) for a in anchors]
    return ContrastiveBatch(anchors, negatives)


def infonce_loss(
    tape: Tape,
    leaves: dict,
    enc_cfg: enc.EncoderConfig,
    episodes: list[SeqData],
    batch: ContrastiveBatch,
    k_steps: int,
    window: int = 48,
    dropout_rng: np.random.Generator | None = None,
):
    """Mean over anchors of the K-step InfoNCE objective (overflow-safe)."""
    if enc_cfg.bidirectional:
        raise CpcError("bidirectional context is forbidden during CPC pre-training")
    per_anchor = []
    for (i, t), negs in zip(batch.anchors, batch.negatives):
        ep = episodes[i]
        lo = max(0, t + 1 - window)
        ctx = tape.const(ep.x[lo:t + 1])
        z_ctx = enc.feat_forward(tape, leaves, enc_cfg, ctx, dropout_rng)
        c_all = enc.gru_steps(
            tape, leaves, enc_cfg,
            [z_ctx.slice((slice(s, s + 1), slice(None))) for s in range(t + 1 - lo)],
        )
        c_t = c_all[-1]  # (1, H)
        pos_x = tape.const(ep.x[t + 1:t + 1 + k_steps])
        z_pos = enc.feat_forward(tape, leaves, enc_cfg, pos_x, dropout_rng)
        neg_x = tape.const(np.stack([episodes[j].x[tp] for j, tp in negs]))
        z_neg = enc.feat_forward(tape, leaves, enc_cfg, neg_x, dropout_rng)
        losses_k = []
        for k in range(1, k_steps + 1):
            zp = z_pos.slice((slice(k - 1, k), slice(None)))  # (1, F)
            s_pos = enc.discriminate(tape, leaves, k, c_t, zp)  # (1,)
            s_neg = enc.discriminate(tape, leaves, k, c_t, z_neg)  # (n_neg,)
            logits = concat([s_pos, s_neg], axis=0)
            loss_k = logits.logsumexp().sub(s_pos.sum())
            losses_k.append(loss_k)
        total = losses_k[0]
        for lk in losses_k[1:]:
            total = total.add(lk)
        if not np.isfinite(total.data):
            raise CpcError(f"non-finite InfoNCE term for anchor ({i}, {t})")
        per_anchor.append(total)
    acc = per_anchor[0]
    for term in per_anchor[1:]:
        acc = acc.add(term)
    return acc.scale(1.0 / len(per_anchor))


def chance_loss(k_steps: int, n_neg: int) -> float:
    return k_steps * float(np.log(n_neg + 1))


@dataclass
class PretrainResult:
    params: dict[str, np.ndarray]
    curve: list[tuple[int, float, float]]  # (epoch, train_infonce, val_infonce)
    best_epoch: int
    stopped_epoch: int


def _eval_batches(params, enc_cfg, episodes_batches, batches, k_steps, window):
    losses = []
    for eps, b in zip(episodes_batches, batches):
        tape = Tape()
        leaves = enc.bind(tape, params, trainable=False)
        loss = infonce_loss(tape, leaves, enc_cfg, eps, b, k_steps, window)
        losses.append(float(loss.data))
    return float(np.mean(losses))


def pretrain(
    train_eps: list[SeqData],
    val_eps: list[SeqData],
    enc_cfg: enc.EncoderConfig,
    sampler: SamplerConfig,
    seed: int,
    lr: float = 1e-3,
    weight_decay: float = 1e-5,
    batch_size: int = 128,
    max_epochs: int = 100,
    patience: int = 5,
    window: int = 48,
) -> PretrainResult:
    """Mini-batch guided-InfoNCE pre-training with source-validation early stop."""
    init_rng = stream(seed, "init")
    params = enc.init_encoder_params(enc_cfg, init_rng)
    params |= enc.init_disc_params(sampler.k_steps, enc_cfg.feat_dim,
                                   enc_cfg.hidden_dim, init_rng)
    opt = OptimState(lr=lr, weight_decay=weight_decay)

    # fixed validation batches so the early-stopping signal is comparable
    val_rng = stream(seed, "sampler", 999_983)
    val_batches, val_groups = [], []
    for s in range(0, len(val_eps), batch_size):
        group = val_eps[s:s + batch_size]
        if len(group) < 2:
            continue
        val_groups.append(group)
        val_batches.append(build_batch(group, sampler, val_rng))
    if not val_batches:
        raise CpcError("validation set too small for pre-training")

    batch_rng = stream(seed, "batch")
    dropout_rng = stream(seed, "dropout")
    sampler_rng = stream(seed, "sampler", 1)

    best = copy.deepcopy(params)
    best_val = float("inf")
    best_epoch = 0
    curve = []
    epochs_since_best = 0
    stopped = max_epochs
    for epoch in range(1, max_epochs + 1):
        order = batch_rng.permutation(len(train_eps))
        train_losses = []
        for s in range(0, len(order), batch_size):
            group = [train_eps[i] for i in order[s:s + batch_size]]
            if len(group) < 2:
                continue
            b = build_batch(group, sampler, sampler_rng)
            tape = Tape()
            leaves = enc.bind(tape, params, trainable=True)
            loss = infonce_loss(tape, leaves, enc_cfg, group, b,
                                sampler.k_steps, window, dropout_rng)
            if not np.isfinite(loss.data):
                raise CpcError(f"pre-training diverged at epoch {epoch}")
            grads_map = backward(tape, loss)
            grads = {k: grad_for(tape, grads_map, v) for k, v in leaves.items()}
            opt.step(params, grads)
            train_losses.append(float(loss.data))
        val_loss = _eval_batches(params, enc_cfg, val_groups, val_batches,
                                 sampler.k_steps, window)
        curve.append((epoch, float(np.mean(train_losses)), val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best = copy.deepcopy(params)
            best_epoch = epoch
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= patience:
                stopped = epoch
                break
    return PretrainResult(params=best, curve=curve, best_epoch=best_epoch,
                          stopped_epoch=stopped)


def write_curve_csv(path, curve) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_infonce,val_infonce\n")
        for epoch, tr, va in curve:
            fh.write(f"{epoch},{tr:.6f},{va:.6f}\n")
