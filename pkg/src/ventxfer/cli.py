"""Command-line surface: synth, preprocess, pretrain, grid, report, gradcheck.

Every command is deterministic given (config, seed) and drops a manifest
with the config hash and input-file hashes beside its outputs. Exit codes:
0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import json
import os
import sys

import click
import numpy as np

from . import __version__, cohort, config as config_mod, reporting, synthpicu
from . import cpcpretrain as cpc
from . import encoders as enc
from . import transferlab as tl
from .cohort import CohortError
from .config import ConfigError, ExperimentConfig
from .cpcpretrain import CpcError
from .evalmetrics import MetricError
from .ndgrad import NdgradError, Tape, grad_check
from .rng import stream
from .schema import SchemaError, default_schema, load_schema
from .transferlab import TransferError


def _write_manifest(out_dir, command, cfg=None, inputs=None, outputs=None):
    doc = {
        "command": command,
        "version": __version__,
        "config_hash": cfg.hash() if cfg is not None else None,
        "inputs": {
            os.path.basename(p): tl._file_hash(p) for p in (inputs or []) if os.path.exists(p)
        },
        "outputs": sorted(os.path.basename(p) for p in (outputs or [])),
    }
    with open(os.path.join(out_dir, f"manifest_{command}.json"), "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _load_config(path, allow_out_of_range):
    cfg = config_mod.load(path) if path else ExperimentConfig()
    violations = cfg.validate(allow_out_of_range=allow_out_of_range)
    for v in violations:
        click.echo(f"warning: out-of-range override: {v}", err=True)
    return cfg


def _load_schema(path):
    return load_schema(path) if path else default_schema()


@click.group()
@click.version_option(version=__version__)
def cli():
    """Cross-institution transfer evaluation of ventilation-outcome models."""


# --- synth -------------------------------------------------------------------

@cli.command("synth")
@click.option("--institution", type=click.Choice(["source", "target", "both"]),
              default="both", show_default=True)
@click.option("--n", "n_episodes", type=int, default=None,
              help="Episodes per institution (defaults: 1883 source, 1932 target).")
@click.option("--seed", type=int, default=20130101, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Output directory (default $VENTXFER_OUT or ./out).")
def cmd_synth(institution, n_episodes, seed, out_dir):
    """Generate the synthetic two-institution cohort plus oracle sidecars."""
    if n_episodes is not None and n_episodes < 1:
        raise click.UsageError("--n must be a positive integer")
    out_dir = out_dir or os.environ.get("VENTXFER_OUT", "out")
    os.makedirs(out_dir, exist_ok=True)
    schema = default_schema()
    profiles = dict(zip(("source", "target"), synthpicu.default_profiles()))
    names = ["source", "target"] if institution == "both" else [institution]
    defaults = {"source": synthpicu.SOURCE_EPISODES, "target": synthpicu.TARGET_EPISODES}
    outputs = []
    for name in names:
        n = n_episodes if n_episodes is not None else defaults[name]
        episodes, oracles = synthpicu.generate(profiles[name], n, seed)
        paths = [os.path.join(out_dir, f"{name}_{kind}.csv")
                 for kind in ("events", "statics", "outcomes")]
        cohort.write_cohort_csv(episodes, schema, *paths)
        oracle_path = os.path.join(out_dir, f"{name}_oracle.json")
        synthpicu.write_oracle(oracle_path, oracles)
        outputs += paths + [oracle_path]
        _echo_calibration(name, episodes, oracles)
    _write_manifest(out_dir, "synth", outputs=outputs)
    click.echo(f"wrote cohort files to {out_dir}")


def _echo_calibration(name, episodes, oracles):
    durations = [e.extubation_hour for e in episodes if e.extubation_hour is not None]
    ages = [e.statics["age_months"] for e in episodes]
    cardiac = np.mean([e.statics["diagnosis"] == "cardiovascular" for e in episodes])
    vaso = np.mean([
        any(ev.feature == "vasoactive" and ev.value > 0 for ev in e.events)
        for e in episodes
    ])
    censored = np.mean([e.censored for e in episodes])
    failed = np.mean([
        oracles[e.episode_id]["failed"] for e in episodes if not e.censored
    ])
    click.echo(
        f"{name}: n={len(episodes)} duration median {np.median(durations):.0f} h, "
        f"age median {np.median(ages):.0f} mo, cardiac {cardiac:.1%}, "
        f"vasoactive {vaso:.1%}, censored {censored:.1%}, "
        f"reintubation prevalence {failed:.1%}"
    )


# --- preprocess ----------------------------------------------------------------

@cli.command("preprocess")
@click.option("--events", required=True, type=click.Path(exists=True))
@click.option("--statics", required=True, type=click.Path(exists=True))
@click.option("--outcomes", required=True, type=click.Path(exists=True))
@click.option("--schema", "schema_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--knn-k", type=int, default=5, show_default=True)
def cmd_preprocess(events, statics, outcomes, schema_path, out_path, seed, knn_k):
    """Aggregate, fill, impute, filter and store one institution's episodes."""
    schema = _load_schema(schema_path)
    raw = cohort.ingest_csv(events, statics, outcomes, schema)
    kept, excluded = cohort.preprocess(raw, schema, k=knn_k, seed=seed)
    reasons = {}
    for _, reason in excluded:
        reasons[reason] = reasons.get(reason, 0) + 1
    for reason in sorted(reasons):
        click.echo(f"excluded {reasons[reason]:5d}  {reason}")
    missing = sum(int((~np.isfinite(e.grid)).sum()) for e in kept)
    if missing:
        raise CohortError(f"{missing} missing cells remain after preprocessing")
    click.echo(f"kept {len(kept)} episodes, zero missing cells")
    cohort.save_store(out_path, kept, schema, {"seed": seed, "knn_k": knn_k})
    _write_manifest(os.path.dirname(out_path) or ".", "preprocess",
                    inputs=[events, statics, outcomes], outputs=[out_path])


# --- pretrain ------------------------------------------------------------------

@cli.command("pretrain")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--source-store", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--allow-out-of-range", is_flag=True)
def cmd_pretrain(config_path, source_store, out_path, seed, allow_out_of_range):
    """Contrastive pre-training on the source institution; writes a checkpoint
    and the epoch/loss curve CSV."""
    cfg = _load_config(config_path, allow_out_of_range)
    schema = default_schema()
    episodes, _ = cohort.load_store(source_store, schema)
    assignment = tl.split(episodes, seed)
    by_id = {e.episode_id: e for e in episodes}
    std = cohort.Standardizer(schema).fit(
        [by_id[i] for i in sorted(assignment.ids("train"))]
    )
    train_ids = sorted(assignment.ids("train") + assignment.pretrain_pool)
    train = [tl.make_cpc_seqdata(by_id[i], std) for i in train_ids]
    val = [tl.make_cpc_seqdata(by_id[i], std) for i in sorted(assignment.ids("val"))]
    enc_cfg = tl._encoder_config(cfg, "mlp", std.encoded_dim)
    sampler = cpc.SamplerConfig(
        beta=cfg.beta, n_pos_anchors=cfg.n_pos_anchors,
        n_neg_per_pos=cfg.n_neg_per_pos, k_steps=cfg.k_steps, guided=cfg.guided,
    )
    chance = cpc.chance_loss(cfg.k_steps, cfg.n_neg_per_pos - 1)
    click.echo(f"chance-level InfoNCE baseline: {chance:.4f}")
    result = cpc.pretrain(
        train, val, enc_cfg, sampler, seed,
        lr=cfg.lr, weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
        max_epochs=cfg.max_epochs, patience=cfg.patience, window=cfg.window,
    )
    curve_path = os.path.splitext(out_path)[0] + "_curve.csv"
    cpc.write_curve_csv(curve_path, result.curve)
    enc.save_checkpoint(out_path, "cpc-encoder", schema.hash(),
                        {"standardizer": std.state()}, result.params)
    click.echo(f"best epoch {result.best_epoch}, stopped after epoch "
               f"{result.stopped_epoch}, best val InfoNCE "
               f"{min(c[2] for c in result.curve):.4f}")
    _write_manifest(os.path.dirname(out_path) or ".", "pretrain", cfg=cfg,
                    inputs=[source_store], outputs=[out_path, curve_path])


# --- grid ----------------------------------------------------------------------

def _parse_only(text):
    if not text:
        return None
    allowed = {"task", "regime", "fraction", "seed"}
    filters = {}
    for part in text.split(","):
        if "=" not in part:
            raise click.UsageError(f"bad --only clause {part!r} (expected key=value)")
        key, value = part.split("=", 1)
        if key not in allowed:
            raise click.UsageError(f"unknown --only key {key!r}")
        filters[key] = value
    def keep(cell):
        task, regime, fraction, seed = cell
        if "task" in filters and str(task) != filters["task"]:
            return False
        if "regime" in filters and regime != filters["regime"]:
            return False
        if "fraction" in filters and float(filters["fraction"]) != fraction:
            return False
        if "seed" in filters and str(seed) != filters["seed"]:
            return False
        return True
    return keep


@cli.command("grid")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--source-store", required=True, type=click.Path(exists=True))
@click.option("--target-store", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--resume/--no-resume", default=True, show_default=True)
@click.option("--only", default=None,
              help="Cell filter, e.g. 'task=1,regime=cpc-ftf,fraction=0.05'.")
@click.option("--allow-out-of-range", is_flag=True)
def cmd_grid(config_path, source_store, target_store, out_dir, resume, only,
             allow_out_of_range):
    """Run the regime x task x fraction x seed evaluation grid."""
    cfg = _load_config(config_path, allow_out_of_range)
    out_dir = out_dir or os.environ.get("VENTXFER_OUT", "out")
    os.makedirs(out_dir, exist_ok=True)
    schema = default_schema()
    source_eps, _ = cohort.load_store(source_store, schema)
    target_eps, _ = cohort.load_store(target_store, schema)
    data_hash = f"{tl._file_hash(source_store)}-{tl._file_hash(target_store)}"
    ctx = tl.prepare_context(cfg, schema, source_eps, target_eps, out_dir,
                             data_hash, progress=click.echo, resume=resume)
    rows = tl.run_grid(ctx, resume=resume, progress=click.echo,
                       only=_parse_only(only))
    failed = sum("error" in r for r in rows)
    click.echo(f"{len(rows)} rows, {failed} failed")
    _write_manifest(out_dir, "grid", cfg=cfg,
                    inputs=[source_store, target_store],
                    outputs=[os.path.join(out_dir, "rows.jsonl")])


# --- report --------------------------------------------------------------------

@cli.command("report")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--grid-dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Defaults to GRID_DIR/report.")
@click.option("--allow-out-of-range", is_flag=True)
def cmd_report(config_path, grid_dir, out_dir, allow_out_of_range):
    """Aggregate grid rows into tables, significance marks and figures."""
    cfg = _load_config(config_path, allow_out_of_range)
    rows_path = os.path.join(grid_dir, "rows.jsonl")
    if not os.path.exists(rows_path):
        raise CohortError(f"no rows.jsonl under {grid_dir}; run the grid first")
    rows = tl.read_rows_jsonl(rows_path)
    out_dir = out_dir or os.path.join(grid_dir, "report")
    scores_dir = os.path.join(grid_dir, "scores")
    paths = reporting.render_report(
        rows, cfg, out_dir,
        scores_dir=scores_dir if os.path.isdir(scores_dir) else None,
    )
    with open(paths["txt"]) as fh:
        click.echo(fh.read(), nl=False)
    _write_manifest(out_dir, "report", cfg=cfg, inputs=[rows_path],
                    outputs=[paths["csv"], paths["txt"], *paths["figures"]])


# --- gradcheck -------------------------------------------------------------------

def gradcheck_cases(seed: int = 0):
    """(name, loss_fn, params) triples covering the op catalog and every
    composed loss; each loss_fn is deterministic for finite differencing."""
    rng = stream(seed, "init", 777)
    cases = []

    def add_case(name, builder, params):
        cases.append((name, builder, params))

    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    add_case("matmul", lambda t, p: p["a"].matmul(p["b"]).sum(), {"a": a, "b": b})
    add_case("add", lambda t, p: p["a"].add(p["c"]).mean(), {"a": a, "c": rng.normal(size=(3, 4))})
    add_case("elementwise-mul", lambda t, p: p["a"].mul(p["c"]).sum(),
             {"a": a, "c": rng.normal(size=(3, 4))})
    add_case("sigmoid", lambda t, p: p["a"].sigmoid().sum(), {"a": a})
    add_case("tanh", lambda t, p: p["a"].tanh().sum(), {"a": a})
    lr_in = rng.normal(size=(3, 4))
    lr_in[np.abs(lr_in) < 0.05] = 0.2  # keep clear of the kink
    add_case("leaky-relu", lambda t, p: p["a"].leaky_relu().sum(), {"a": lr_in})
    from .ndgrad import concat as cat
    add_case("concat", lambda t, p: cat([p["a"], p["c"]], axis=1).sum(),
             {"a": a, "c": rng.normal(size=(3, 2))})
    add_case("slice", lambda t, p: p["a"].slice((slice(1, 3), slice(0, 2))).sum(), {"a": a})
    add_case("sum", lambda t, p: p["a"].sum(axis=0).mean(), {"a": a})
    add_case("mean", lambda t, p: p["a"].mean(axis=1).sum(), {"a": a})
    add_case("log-sum-exp", lambda t, p: p["a"].logsumexp(axis=1).sum(), {"a": a})
    add_case("softmax", lambda t, p: p["a"].softmax(axis=1).mul(p["w"]).sum(),
             {"a": a, "w": rng.normal(size=(3, 4))})
    mask = enc.dropout_mask(stream(seed, "dropout", 777), (3, 4), 0.4)
    add_case("dropout-mask-mul", lambda t, p: p["a"].dropout_mask_mul(mask).sum(), {"a": a})

    # composed networks: tiny dims keep the finite-difference sweep fast
    mlp_cfg = enc.EncoderConfig("mlp", input_dim=6, feat_dim=3, hidden_dim=4,
                                num_layers=2, dropout_rate=0.0)
    mlp_params = enc.init_encoder_params(mlp_cfg, stream(seed, "init", 778))
    mlp_params |= enc.init_head_params(mlp_cfg.output_dim, stream(seed, "init", 779))
    # scale up so no gradient component is close enough to zero to be lost
    # in finite-difference roundoff
    mlp_params = {k: v * 2.5 for k, v in mlp_params.items()}
    x_seq = stream(seed, "init", 780).normal(size=(7, 6))
    y_seq = (stream(seed, "init", 781).random(7) < 0.4).astype(float)

    def net_loss(spec):
        def f(tape, leaves):
            x = tape.const(x_seq)
            z = enc.feat_forward(tape, leaves, mlp_cfg, x, None)
            c = enc.gru_forward(tape, leaves, mlp_cfg, z)
            logits = enc.head_forward(tape, leaves, c)
            return enc.classification_loss(tape, spec, logits, y_seq)
        return f

    add_case("gru-mlp-cross-entropy", net_loss(enc.LossSpec("cross-entropy")),
             dict(mlp_params))
    add_case("gru-mlp-focal", net_loss(enc.LossSpec("focal", 0.75, 2)), dict(mlp_params))

    lp_cfg = enc.EncoderConfig("linear-projection", input_dim=6, feat_dim=3,
                               hidden_dim=4, num_layers=1, dropout_rate=0.0)
    lp_params = enc.init_encoder_params(lp_cfg, stream(seed, "init", 782))
    lp_params |= enc.init_head_params(lp_cfg.output_dim, stream(seed, "init", 783))
    lp_params = {k: v * 2.5 for k, v in lp_params.items()}
    add_case("gru-linear-projection-focal",
             net_loss_lp(lp_cfg, x_seq, y_seq), dict(lp_params))

    # full guided InfoNCE on a small two-episode batch
    k_steps = 4
    cpc_cfg = enc.EncoderConfig("mlp", input_dim=6, feat_dim=3, hidden_dim=4,
                                num_layers=1, dropout_rate=0.0)
    cpc_params = enc.init_encoder_params(cpc_cfg, stream(seed, "init", 784))
    cpc_params |= enc.init_disc_params(k_steps, cpc_cfg.feat_dim,
                                       cpc_cfg.hidden_dim, stream(seed, "init", 785))
    g = stream(seed, "sampler", 777)
    eps = [
        cpc.SeqData("a", g.normal(size=(9, 6)), 9.0 - np.arange(1.0, 10.0)),
        cpc.SeqData("b", g.normal(size=(8, 6)), None),
    ]
    sampler = cpc.SamplerConfig(beta=2.0, n_pos_anchors=2, n_neg_per_pos=4,
                                k_steps=k_steps, guided=True)
    batch = cpc.build_batch(eps, sampler, stream(seed, "sampler", 778))

    def infonce(tape, leaves):
        return cpc.infonce_loss(tape, leaves, cpc_cfg, eps, batch, k_steps, window=5)

    add_case("guided-infonce", infonce, dict(cpc_params))
    return cases


def net_loss_lp(cfg, x_seq, y_seq):
    def f(tape, leaves):
        x = tape.const(x_seq)
        z = enc.feat_forward(tape, leaves, cfg, x, None)
        c = enc.gru_forward(tape, leaves, cfg, z)
        logits = enc.head_forward(tape, leaves, c)
        return enc.classification_loss(tape, enc.LossSpec("focal", 0.6, 3), logits, y_seq)
    return f


def run_gradcheck(seed: int = 0, tolerance: float = 1e-4):
    """Returns (results, worst) where results is [(name, max_rel_err)]."""
    results = []
    worst = 0.0
    for name, loss_fn, params in gradcheck_cases(seed):
        err = grad_check(loss_fn, params)
        results.append((name, err))
        worst = max(worst, err)
    return results, worst


@cli.command("gradcheck")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--tolerance", type=float, default=1e-4, show_default=True)
def cmd_gradcheck(seed, tolerance):
    """Finite-difference verification of every op and composed loss."""
    results, worst = run_gradcheck(seed, tolerance)
    for name, err in results:
        status = "ok" if err < tolerance else "FAIL"
        click.echo(f"{status:4s} {name:28s} max rel err {err:.2e}")
    if worst >= tolerance:
        raise NdgradError(f"gradient check failed: worst error {worst:.2e}")
    click.echo(f"all {len(results)} checks passed (worst {worst:.2e})")


def main():
    try:
        cli.main(standalone_mode=False)
    except click.exceptions.Exit as e:
        sys.exit(e.exit_code)
    except click.ClickException as e:
        e.show()
        sys.exit(1)
    except click.exceptions.Abort:
        sys.exit(1)
    except (SchemaError, CohortError, ConfigError, TransferError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(2)
    except (NdgradError, enc.EncoderError, CpcError, MetricError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(3)
    sys.exit(0)


if __name__ == "__main__":
    main()
