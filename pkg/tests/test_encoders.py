"""Network building blocks: feature maps, GRU, head, discriminators, losses,
and the checkpoint container."""

import numpy as np
import pytest

from ventxfer import encoders as enc
from ventxfer.ndgrad import NdgradError, Tape, backward, grad_check, grad_for
from ventxfer.rng import stream
from ventxfer.schema import default_schema


def lp_cfg(d_in=3, d_out=3, hidden=4):
    return enc.EncoderConfig("linear-projection", input_dim=d_in, feat_dim=d_out,
                             hidden_dim=hidden, num_layers=1, dropout_rate=0.0)


def mlp_cfg(d_in=3, d_out=3, hidden=4, layers=1, dropout=0.0):
    return enc.EncoderConfig("mlp", input_dim=d_in, feat_dim=d_out,
                             hidden_dim=hidden, num_layers=layers,
                             dropout_rate=dropout)


def zero_gru_params(cfg):
    params = {}
    d = cfg.feat_dim
    for i in range(cfg.num_layers):
        for gate in ("z", "r", "h"):
            params[f"gru.{i}.W{gate}"] = np.zeros((d, cfg.hidden_dim))
            params[f"gru.{i}.U{gate}"] = np.zeros((cfg.hidden_dim, cfg.hidden_dim))
            params[f"gru.{i}.b{gate}"] = np.zeros(cfg.hidden_dim)
        d = cfg.hidden_dim
    return params


class TestFeatForward:
    def test_linear_projection_identity(self):
        cfg = lp_cfg()
        params = {"feat.0.W": np.eye(3), "feat.0.b": np.zeros(3)}
        t = Tape()
        leaves = enc.bind(t, params, trainable=False)
        x = np.array([[1.0, -2.0, 0.5]])
        out = enc.feat_forward(t, leaves, cfg, t.const(x))
        assert np.array_equal(out.data, x)

    def test_mlp_zero_weights_gives_zero(self):
        cfg = mlp_cfg()
        params = {"feat.0.W": np.zeros((3, 3)), "feat.0.b": np.zeros(3)}
        t = Tape()
        leaves = enc.bind(t, params, trainable=False)
        out = enc.feat_forward(t, leaves, cfg, t.const(np.ones((2, 3))))
        assert np.array_equal(out.data, np.zeros((2, 3)))

    def test_two_layer_mlp_hand_computed(self):
        cfg = mlp_cfg(d_in=2, d_out=2, layers=2)
        w0 = np.array([[1.0, 0.0], [0.0, 1.0]])
        w1 = np.array([[2.0, -1.0], [1.0, 3.0]])
        params = {
            "feat.0.W": w0, "feat.0.b": np.array([0.0, 0.0]),
            "feat.1.W": w1, "feat.1.b": np.array([0.5, 0.0]),
        }
        t = Tape()
        leaves = enc.bind(t, params, trainable=False)
        out = enc.feat_forward(t, leaves, cfg, t.const(np.array([[1.0, -1.0]])))
        # layer 1: (1, -1) -> leaky-relu -> (1, -0.01)
        # layer 2: (1*2 + -0.01*1 + 0.5, 1*-1 + -0.01*3) = (2.49, -1.03) -> leaky
        assert np.allclose(out.data, [[2.49, -0.0103]])

    def test_width_mismatch_rejected(self):
        cfg = lp_cfg()
        params = {"feat.0.W": np.eye(3), "feat.0.b": np.zeros(3)}
        t = Tape()
        leaves = enc.bind(t, params, trainable=False)
        with pytest.raises(enc.EncoderError, match="width"):
            enc.feat_forward(t, leaves, cfg, t.const(np.ones((2, 4))))

    def test_dropout_disabled_is_deterministic(self):
        cfg = mlp_cfg(dropout=0.5)
        params = enc.init_encoder_params(cfg, stream(0, "init"))
        x = np.ones((2, 3))

        def run():
            t = Tape()
            leaves = enc.bind(t, params, trainable=False)
            return enc.feat_forward(t, leaves, cfg, t.const(x), None).data

        assert np.array_equal(run(), run())


class TestGru:
    def test_zero_weights_gives_zero_states(self):
        cfg = mlp_cfg()
        params = zero_gru_params(cfg)
        t = Tape()
        leaves = enc.bind(t, params, trainable=False)
        z = t.const(np.random.default_rng(0).normal(size=(5, 3)))
        out = enc.gru_forward(t, leaves, cfg, z)
        assert np.array_equal(out.data, np.zeros((5, 4)))

    def test_causality(self):
        cfg = mlp_cfg()
        params = {
            k: v for k, v in enc.init_encoder_params(cfg, stream(1, "init")).items()
            if k.startswith("gru.")
        }
        z = np.random.default_rng(2).normal(size=(6, 3))
        z_pert = z.copy()
        z_pert[4:] += 10.0

        def run(arr):
            t = Tape()
            leaves = enc.bind(t, params, trainable=False)
            return enc.gru_forward(t, leaves, cfg, t.const(arr)).data

        a, b = run(z), run(z_pert)
        assert np.array_equal(a[:4], b[:4])
        assert not np.array_equal(a[4:], b[4:])

    def test_single_unit_hand_recurrence(self):
        cfg = enc.EncoderConfig("linear-projection", input_dim=1, feat_dim=1,
                                hidden_dim=1, num_layers=1, dropout_rate=0.0)
        wz, uz, bz = 0.5, -0.3, 0.1
        wr, ur, br = 0.2, 0.4, 0.0
        wh, uh, bh = 1.0, -0.5, 0.2
        params = {
            "gru.0.Wz": np.array([[wz]]), "gru.0.Uz": np.array([[uz]]), "gru.0.bz": np.array([bz]),
            "gru.0.Wr": np.array([[wr]]), "gru.0.Ur": np.array([[ur]]), "gru.0.br": np.array([br]),
            "gru.0.Wh": np.array([[wh]]), "gru.0.Uh": np.array([[uh]]), "gru.0.bh": np.array([bh]),
        }
        xs = [0.7, -1.2]
        t = Tape()
        leaves = enc.bind(t, params, trainable=False)
        out = enc.gru_forward(t, leaves, cfg, t.const(np.array(xs).reshape(2, 1)))

        def sig(v):
            return 1.0 / (1.0 + np.exp(-v))

        h = 0.0
        expect = []
        for x in xs:
            u = sig(wz * x + uz * h + bz)
            r = sig(wr * x + ur * h + br)
            n = np.tanh(wh * x + uh * (r * h) + bh)
            h = (1 - u) * h + u * n
            expect.append(h)
        assert np.allclose(out.data[:, 0], expect, atol=1e-12)

    def test_bidirectional_doubles_output_width(self):
        cfg = enc.EncoderConfig("mlp", input_dim=3, feat_dim=3, hidden_dim=4,
                                num_layers=1, dropout_rate=0.0, bidirectional=True)
        params = enc.init_encoder_params(cfg, stream(3, "init"))
        t = Tape()
        leaves = enc.bind(t, params, trainable=False)
        out = enc.gru_forward(t, leaves, cfg, t.const(np.ones((5, 3))))
        assert out.shape == (5, 8)

    def test_gradients_pass_grad_check(self):
        cfg = mlp_cfg(d_in=4, d_out=3, hidden=3)
        params = enc.init_encoder_params(cfg, stream(4, "init"))
        params = {k: v * 2.5 for k, v in params.items()}
        x = stream(5, "init").normal(size=(5, 4))

        def loss_fn(tape, leaves):
            z = enc.feat_forward(tape, leaves, cfg, tape.const(x), None)
            c = enc.gru_forward(tape, leaves, cfg, z)
            return c.mul(c).mean()

        assert grad_check(loss_fn, params) < 1e-4


class TestHeadAndDiscriminator:
    def test_head_zero_weight_returns_bias(self):
        t = Tape()
        leaves = enc.bind(t, {"head.W": np.zeros((4, 1)), "head.b": np.array([1.7])},
                          trainable=False)
        out = enc.head_forward(t, leaves, t.const(np.ones((3, 4))))
        assert np.allclose(out.data, 1.7)

    def test_head_basis_weight(self):
        w = np.zeros((4, 1))
        w[0, 0] = 1.0
        t = Tape()
        leaves = enc.bind(t, {"head.W": w, "head.b": np.array([0.25])}, trainable=False)
        c = np.array([[3.0, 9.0, 9.0, 9.0]])
        out = enc.head_forward(t, leaves, t.const(c))
        assert np.allclose(out.data, [[3.25]])

    def test_head_matches_affine_oracle(self):
        rng = np.random.default_rng(6)
        w = rng.normal(size=(5, 1))
        b = rng.normal(size=1)
        c = rng.normal(size=(7, 5))
        t = Tape()
        leaves = enc.bind(t, {"head.W": w, "head.b": b}, trainable=False)
        out = enc.head_forward(t, leaves, t.const(c))
        assert np.allclose(out.data, c @ w + b, atol=1e-12)

    def test_discriminator_zero_matrix(self):
        t = Tape()
        leaves = enc.bind(t, {"disc.1.W": np.zeros((3, 4))}, trainable=False)
        out = enc.discriminate(t, leaves, 1, t.const(np.ones((2, 4))),
                               t.const(np.ones((2, 3))))
        assert np.array_equal(out.data, [0.0, 0.0])

    def test_discriminator_identity_basis(self):
        t = Tape()
        leaves = enc.bind(t, {"disc.1.W": np.eye(3)}, trainable=False)
        e1 = np.zeros((1, 3))
        e1[0, 0] = 1.0
        out = enc.discriminate(t, leaves, 1, t.const(e1), t.const(e1))
        assert np.allclose(out.data, [1.0])

    def test_discriminator_matches_double_sum(self):
        rng = np.random.default_rng(8)
        w = rng.normal(size=(3, 5))
        z = rng.normal(size=(4, 3))
        c = rng.normal(size=(4, 5))
        t = Tape()
        leaves = enc.bind(t, {"disc.2.W": w}, trainable=False)
        out = enc.discriminate(t, leaves, 2, t.const(c), t.const(z))
        oracle = np.array([
            sum(z[n, i] * w[i, j] * c[n, j] for i in range(3) for j in range(5))
            for n in range(4)
        ])
        assert np.allclose(out.data, oracle, atol=1e-12)

    def test_discriminator_step_out_of_range(self):
        t = Tape()
        leaves = enc.bind(t, {"disc.1.W": np.eye(2)}, trainable=False)
        with pytest.raises(enc.EncoderError, match="out of range"):
            enc.discriminate(t, leaves, 3, t.const(np.ones((1, 2))),
                             t.const(np.ones((1, 2))))


def loss_value(spec, logit, y):
    t = Tape()
    logits = t.const(np.array([[float(logit)]]))
    return float(enc.classification_loss(t, spec, logits, np.array([y], float)).data)


class TestLosses:
    def test_ce_at_zero_logit(self):
        assert abs(loss_value(enc.LossSpec("cross-entropy"), 0.0, 1) - np.log(2)) < 1e-12

    def test_focal_hand_value(self):
        # alpha * (1 - p)^gamma * CE at logit 0, y=1: 0.75 * 0.25 * ln 2
        got = loss_value(enc.LossSpec("focal", 0.75, 2), 0.0, 1)
        assert abs(got - 0.75 * 0.25 * np.log(2)) < 1e-9

    def test_focal_gamma_zero_alpha_one_is_ce(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            logit = rng.normal() * 4
            y = int(rng.random() < 0.5)
            ce = loss_value(enc.LossSpec("cross-entropy"), logit, y)
            focal = loss_value(enc.LossSpec("focal", 1.0, 0), logit, y)
            assert abs(ce - focal) < 1e-12

    def test_focal_monotone_decreasing_in_pt(self):
        spec = enc.LossSpec("focal", 0.75, 2)
        logits = np.linspace(-4, 4, 30)
        losses = [loss_value(spec, l, 1) for l in logits]
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_focal_loss_grad_check(self):
        rng = np.random.default_rng(10)
        params = {"logits": rng.normal(size=(6, 1)) * 2}
        y = (rng.random(6) < 0.5).astype(float)
        spec = enc.LossSpec("focal", 0.6, 3)

        def loss_fn(tape, leaves):
            return enc.classification_loss(tape, spec, leaves["logits"], y)

        assert grad_check(loss_fn, params) < 1e-4

    def test_mask_drops_samples(self):
        t = Tape()
        logits = t.const(np.array([[0.0], [5.0]]))
        spec = enc.LossSpec("cross-entropy")
        loss = enc.classification_loss(t, spec, logits, np.array([1.0, 0.0]),
                                       sample_mask=np.array([1.0, 0.0]))
        assert abs(float(loss.data) - np.log(2)) < 1e-12

    def test_empty_mask_rejected(self):
        t = Tape()
        logits = t.const(np.zeros((2, 1)))
        with pytest.raises(enc.EncoderError, match="mask"):
            enc.classification_loss(t, enc.LossSpec("cross-entropy"), logits,
                                    np.array([1.0, 0.0]), np.zeros(2))


class TestBindFreezing:
    def test_prefix_set_freezes_others(self):
        cfg = mlp_cfg()
        params = enc.init_encoder_params(cfg, stream(11, "init"))
        params |= enc.init_head_params(cfg.output_dim, stream(12, "init"))
        t = Tape()
        leaves = enc.bind(t, params, trainable={"head."})
        z = enc.feat_forward(t, leaves, cfg, t.const(np.ones((3, 3))), None)
        c = enc.gru_forward(t, leaves, cfg, z)
        loss = enc.head_forward(t, leaves, c).mean()
        grads = backward(t, loss)
        head_grad = grad_for(t, grads, leaves["head.W"])
        assert np.abs(head_grad).sum() > 0
        for name, leaf in leaves.items():
            if not name.startswith("head."):
                assert not t.nodes[leaf.node_id].requires_grad


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = mlp_cfg()
        params = enc.init_encoder_params(cfg, stream(13, "init"))
        path = tmp_path / "model.ckpt"
        schema_hash = default_schema().hash()
        enc.save_checkpoint(path, "cpc-encoder", schema_hash,
                            enc.encoder_config_to_dict(cfg), params)
        kind, sh, config, tensors = enc.load_checkpoint(path, schema_hash)
        assert kind == "cpc-encoder"
        assert sh == schema_hash
        assert enc.encoder_config_from_dict(config) == cfg
        assert set(tensors) == set(params)
        for k in params:
            assert np.array_equal(tensors[k], params[k])

    def test_schema_hash_mismatch_rejected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        enc.save_checkpoint(path, "x", "aaaa", {}, {"w": np.ones(2)})
        with pytest.raises(enc.EncoderError, match="schema hash"):
            enc.load_checkpoint(path, "bbbb")

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(enc.EncoderError, match="not a checkpoint"):
            enc.load_checkpoint(path)

    def test_checksum_is_order_independent(self):
        a = {"x": np.ones(2), "y": np.zeros(3)}
        b = {"y": np.zeros(3), "x": np.ones(2)}
        assert enc.params_checksum(a) == enc.params_checksum(b)
