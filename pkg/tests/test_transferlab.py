"""Transfer harness: splits, subsampling, task data, and regime training."""

import numpy as np
import pytest

from ventxfer import cohort
from ventxfer import encoders as enc
from ventxfer.config import ExperimentConfig
from ventxfer.evalmetrics import auroc
from ventxfer.rng import stream
from ventxfer.schema import Feature, FeatureSchema
from ventxfer.transferlab import (
    REGIMES,
    SplitAssignment,
    Task1Sample,
    TransferError,
    build_task_data,
    cell_name,
    grid_cells,
    make_cpc_seqdata,
    make_task1_sample,
    make_task2_sequence,
    read_rows_jsonl,
    score_set,
    split,
    subsample,
    train_supervised,
    write_rows_jsonl,
)


def tiny_schema():
    return FeatureSchema((
        Feature("hr", "vital-signs", "continuous", "vitals"),
        Feature("spo2", "vital-signs", "continuous", "vitals"),
        Feature("sedated", "medications", "binary", "meds"),
    ))


def make_ep(eid, hours=24, failure=False, censored=False):
    grid = np.random.default_rng(hash(eid) % 2**32).normal(size=(hours, 3))
    return cohort.Episode(
        episode_id=eid, institution="target", admission_id=f"a-{eid}",
        attempt_index=1, grid=grid, mask=np.ones((hours, 3), dtype=bool),
        extubation_hour=None if censored else hours,
        reintubation_offset_h=10.0 if failure else None,
        censored=censored,
    )


def make_pool(n, failure_rate=0.1, censored=0):
    eps = []
    for i in range(n):
        eps.append(make_ep(f"e{i:04d}", failure=(i % int(1 / failure_rate) == 0)))
    for i in range(censored):
        eps.append(make_ep(f"c{i:04d}", censored=True))
    return eps


class TestSplit:
    def test_exact_sizes_100(self):
        a = split(make_pool(100), seed=0)
        assert (len(a.ids("train")), len(a.ids("val")), len(a.ids("test"))) == (65, 15, 20)

    def test_exact_sizes_1932(self):
        a = split(make_pool(1932), seed=1)
        sizes = tuple(len(a.ids(s)) for s in ("train", "val", "test"))
        assert sizes == (1256, 290, 386)

    def test_stratification_close(self):
        eps = make_pool(400)
        a = split(eps, seed=2)
        fail = {e.episode_id for e in eps if e.outcome == "failure"}
        rates = [
            np.mean([i in fail for i in a.ids(s)]) for s in ("train", "val", "test")
        ]
        assert max(rates) - min(rates) < 0.03

    def test_censored_go_to_pretrain_pool_only(self):
        eps = make_pool(100, censored=7)
        a = split(eps, seed=0)
        assert len(a.pretrain_pool) == 7
        assert not set(a.pretrain_pool) & set(a.assign)

    def test_deterministic_and_seed_sensitive(self):
        eps = make_pool(100)
        assert split(eps, seed=3).assign == split(eps, seed=3).assign
        assert split(eps, seed=3).assign != split(eps, seed=4).assign

    def test_too_few_episodes_rejected(self):
        with pytest.raises(TransferError, match="at least 20"):
            split(make_pool(10), seed=0)

    def test_single_stratum_rejected(self):
        eps = [make_ep(f"e{i}", failure=False) for i in range(30)]
        with pytest.raises(TransferError, match="strata"):
            split(eps, seed=0)

    def test_every_eligible_episode_assigned_once(self):
        eps = make_pool(123, censored=5)
        a = split(eps, seed=0)
        eligible = {e.episode_id for e in eps if not e.censored}
        assert set(a.assign) == eligible


class TestSubsample:
    def setup_method(self):
        self.eps = make_pool(1932)
        self.assignment = split(self.eps, seed=0)
        self.labels = {
            e.episode_id: int(e.outcome == "failure") for e in self.eps
        }

    def test_full_fraction_is_identity(self):
        a = subsample(self.assignment, 1.0, seed=0, labels=self.labels)
        assert a.assign == self.assignment.assign

    def test_five_percent_train_size(self):
        a = subsample(self.assignment, 0.05, seed=0, labels=self.labels)
        assert len(a.ids("train")) == 63

    def test_val_test_untouched(self):
        a = subsample(self.assignment, 0.05, seed=0, labels=self.labels)
        for s in ("val", "test"):
            assert sorted(a.ids(s)) == sorted(self.assignment.ids(s))

    def test_fractions_nest(self):
        small = set(subsample(self.assignment, 0.05, 0, self.labels).ids("train"))
        mid = set(subsample(self.assignment, 0.3, 0, self.labels).ids("train"))
        assert small <= mid <= set(self.assignment.ids("train"))

    def test_both_classes_survive(self):
        a = subsample(self.assignment, 0.05, seed=0, labels=self.labels)
        labs = {self.labels[i] for i in a.ids("train")}
        assert labs == {0, 1}

    def test_bad_fraction_rejected(self):
        for f in (0.0, 1.5, -0.1):
            with pytest.raises(TransferError):
                subsample(self.assignment, f, seed=0, labels=self.labels)


class TestTaskData:
    def setup_method(self):
        self.schema = tiny_schema()
        fit = [make_ep("fit0", 30), make_ep("fit1", 30)]
        self.std = cohort.Standardizer(self.schema).fit(fit)

    def test_cpc_seqdata_tte_counts_down_to_zero(self):
        ep = make_ep("a", hours=20)
        s = make_cpc_seqdata(ep, self.std)
        assert s.x.shape[0] == 20
        assert s.tte[0] == 19.0 and s.tte[-1] == 0.0

    def test_cpc_seqdata_censored_keeps_full_length_no_tte(self):
        ep = make_ep("c", hours=20, censored=True)
        s = make_cpc_seqdata(ep, self.std)
        assert s.tte is None and s.x.shape[0] == 20

    def test_task1_window_caps_history(self):
        ep = make_ep("long", hours=60)
        s = make_task1_sample(ep, self.std, window=48)
        assert s.x.shape[0] == 48
        assert np.allclose(s.x, self.std.encode(ep.grid)[12:60])

    def test_task1_short_episode_uses_all_hours(self):
        s = make_task1_sample(make_ep("short", hours=20), self.std, window=48)
        assert s.x.shape[0] == 20

    def test_task1_labels(self):
        assert make_task1_sample(make_ep("f", failure=True), self.std, 48).label == 1
        assert make_task1_sample(make_ep("s"), self.std, 48).label == 0

    def test_task1_censored_is_none(self):
        assert make_task1_sample(make_ep("c", censored=True), self.std, 48) is None

    def test_task2_rows_match_hour_labels(self):
        ep = make_ep("t2", hours=50)
        s = make_task2_sequence(ep, self.std)
        assert s.x.shape[0] == 50
        # monitoring starts at hour 12, stored on row 11
        assert not s.label_mask[:11].any() and s.label_mask[11:].all()
        expected = {q.end_hour: q.label for q in cohort.label_task2(ep)}
        for t, lab in expected.items():
            assert s.labels[t - 1] == lab

    def test_build_task_data_skips_censored(self):
        eps = [make_ep("a"), make_ep("c", censored=True)]
        assert len(build_task_data(eps, self.std, 1, 48)) == 1

    def test_build_task_data_empty_rejected(self):
        with pytest.raises(TransferError):
            build_task_data([make_ep("c", censored=True)], self.std, 1, 48)


def separable_samples(n, seed, d=3):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = int(i % 2 == 0)
        mu = 1.0 if label else -1.0
        x = mu + 0.4 * rng.normal(size=(6, d))
        out.append(Task1Sample(f"s{seed}-{i}", x, label))
    return out


def toy_cfg(feat_kind="linear-projection", d=3):
    return enc.EncoderConfig(feat_kind=feat_kind, input_dim=d, feat_dim=4,
                             hidden_dim=4, dropout_rate=0.0)


class TestTraining:
    def test_target_only_learns_separable_data(self):
        cfg = toy_cfg()
        res = train_supervised(
            REGIMES["target-only"], 1, separable_samples(40, 0),
            separable_samples(20, 1), cfg, enc.LossSpec("cross-entropy"),
            seed=0, lr=1e-2, batch_size=8, max_epochs=30, patience=30,
        )
        val = score_set(res.params, cfg, 1, separable_samples(20, 2))
        assert auroc(val) >= 0.95

    def test_head_only_keeps_encoder_bit_identical(self):
        cfg = toy_cfg(feat_kind="mlp")
        ckpt = enc.init_encoder_params(cfg, stream(0, "ckpt"))
        res = train_supervised(
            REGIMES["cpc-ftd"], 1, separable_samples(20, 0),
            separable_samples(10, 1), cfg, enc.LossSpec("cross-entropy"),
            seed=0, checkpoint_tensors=ckpt, lr=1e-2, batch_size=8,
            max_epochs=5, patience=5,
        )
        for k, v in ckpt.items():
            assert np.array_equal(res.params[k], v), k
        assert any(k.startswith("head.") for k in res.params)

    def test_full_fine_tuning_moves_encoder(self):
        cfg = toy_cfg(feat_kind="mlp")
        ckpt = enc.init_encoder_params(cfg, stream(0, "ckpt"))
        res = train_supervised(
            REGIMES["cpc-ftf"], 1, separable_samples(20, 0),
            separable_samples(10, 1), cfg, enc.LossSpec("cross-entropy"),
            seed=0, checkpoint_tensors=ckpt, lr=1e-2, batch_size=8,
            max_epochs=5, patience=5,
        )
        assert any(not np.array_equal(res.params[k], v) for k, v in ckpt.items())

    def test_source_only_never_trains(self):
        with pytest.raises(TransferError, match="does not train"):
            train_supervised(
                REGIMES["source-only"], 1, separable_samples(20, 0),
                separable_samples(10, 1), toy_cfg(), enc.LossSpec(), seed=0,
            )

    def test_checkpoint_regime_without_checkpoint_rejected(self):
        with pytest.raises(TransferError, match="checkpoint"):
            train_supervised(
                REGIMES["cpc-ftf"], 1, separable_samples(20, 0),
                separable_samples(10, 1), toy_cfg("mlp"),
                enc.LossSpec("cross-entropy"), seed=0,
            )

    def test_deterministic_curves(self):
        cfg = toy_cfg()

        def run():
            return train_supervised(
                REGIMES["target-only"], 1, separable_samples(20, 0),
                separable_samples(10, 1), cfg, enc.LossSpec("cross-entropy"),
                seed=5, lr=1e-2, batch_size=8, max_epochs=4, patience=4,
            )

        a, b = run(), run()
        assert a.curve == b.curve
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_task2_trains_on_sequences(self):
        schema = tiny_schema()
        eps = [make_ep(f"q{i:02d}", hours=20 + (i % 4),
                       failure=(i % 5 == 0)) for i in range(16)]
        std = cohort.Standardizer(schema).fit(eps)
        data = build_task_data(eps, std, 2, window=48)
        cfg = toy_cfg()
        res = train_supervised(
            REGIMES["target-only"], 2, data[:12], data[12:], cfg,
            enc.LossSpec("cross-entropy"), seed=0, batch_size=4,
            max_epochs=2, patience=2,
        )
        assert len(res.curve) == 2
        scored = score_set(res.params, cfg, 2, data[12:])
        assert scored.scores.shape == scored.labels.shape
        assert np.all((scored.scores >= 0) & (scored.scores <= 1))


class TestInferenceParity:
    """The tape-free scoring forward must match the autodiff forward."""

    def test_task1_contexts_match(self):
        from ventxfer import transferlab as tl
        from ventxfer.ndgrad import Tape
        for kind in ("linear-projection", "mlp"):
            cfg = toy_cfg(feat_kind=kind)
            params = enc.init_encoder_params(cfg, stream(0, "p"))
            batch = separable_samples(9, 3)
            tape = Tape()
            leaves = enc.bind(tape, params, trainable=False)
            ref = tl._task1_batch_context(tape, leaves, cfg, batch, None)
            got = tl._task1_batch_context_np(params, cfg, batch)
            np.testing.assert_allclose(got, ref.data, rtol=1e-12, atol=1e-12)

    def test_task2_contexts_match(self):
        from ventxfer import transferlab as tl
        from ventxfer.ndgrad import Tape
        schema = tiny_schema()
        eps = [make_ep(f"p{i:02d}", hours=18 + i, failure=(i % 3 == 0))
               for i in range(6)]
        std = cohort.Standardizer(schema).fit(eps)
        batch = build_task_data(eps, std, 2, window=48)
        cfg = toy_cfg()
        params = enc.init_encoder_params(cfg, stream(0, "p"))
        tape = Tape()
        leaves = enc.bind(tape, params, trainable=False)
        cs, labels, mask = tl._task2_batch_contexts(tape, leaves, cfg, batch, None)
        ref = np.stack([c.data for c in cs])
        got, labels_np, mask_np = tl._task2_batch_contexts_np(params, cfg, batch)
        np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)
        np.testing.assert_array_equal(labels_np, labels)
        np.testing.assert_array_equal(mask_np, mask)


class TestGridPlumbing:
    def test_default_grid_has_160_cells(self):
        assert len(grid_cells(ExperimentConfig())) == 160

    def test_source_only_runs_once_per_task_seed(self):
        cells = grid_cells(ExperimentConfig())
        so = [c for c in cells if c[1] == "source-only"]
        assert len(so) == 10
        assert all(f == 1.0 for _, _, f, _ in so)

    def test_cell_name_format(self):
        assert cell_name(1, "cpc-ftf", 0.05, 3) == "t1_cpc-ftf_f0.05_s3"
        assert cell_name(2, "target-only", 1.0, 0) == "t2_target-only_f1_s0"

    def test_rows_jsonl_round_trip(self, tmp_path):
        rows = [
            {"task": 1, "regime": "target-only", "fraction": 1.0, "seed": 0,
             "auroc": 0.8, "auprc": 0.4, "bacc": 0.7, "n_test": 10,
             "runtime_s": 1.5},
            {"task": 2, "regime": "cpc-ftf", "fraction": 0.05, "seed": 4,
             "error": "boom"},
        ]
        path = tmp_path / "rows.jsonl"
        write_rows_jsonl(path, rows)
        assert read_rows_jsonl(path) == rows
