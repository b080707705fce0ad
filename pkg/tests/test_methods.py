import numpy as np
import pytest

from fewshot.datasets import LabeledImageSet
from fewshot.episodes import Episode, EpisodeSpec, EpisodeStream, NoiseSpec, sample_episode
from fewshot.methods import (
    MAML,
    BackboneConfig,
    Baseline,
    BatchStream,
    EvalReport,
    NumericGuardError,
    WayChangeError,
    baseline_finetune_and_classify,
    baseline_pretrain,
    build_model,
    compute_prototypes,
    embed,
    eval_loop,
    history_to_csv,
    load_checkpoint,
    maml_adapt,
    maml_meta_gradient,
    maml_meta_step,
    matching_forward,
    proto_forward,
    relation_forward,
    save_checkpoint,
    train_loop,
)
from fewshot.methods.backbone import backbone_forward, init_backbone
from fewshot.methods.metric import init_relation_module
from fewshot.numerics import ContractError, DimensionError, Tensor, grad, make_optimizer, precision
from fewshot.numerics import functional as F
from fewshot.numerics.gradcheck import check_gradient, finite_diff_grad, relative_error

SMALL = BackboneConfig(block_count=2, channels=8, input_shape=(1, 12, 12))
ALL_KINDS = ("proto", "matching", "relation", "maml", "baseline", "baseline++")


def t64(x, requires_grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=requires_grad, dtype=np.float64)


def toy_episode(n=3, k=2, q=3, seed=0, size=12):
    rng = np.random.default_rng(seed)
    protos = rng.uniform(size=(n, 1, size, size))
    s = np.concatenate([protos[c] + 0.1 * rng.standard_normal((k, 1, size, size)) for c in range(n)])
    qq = np.concatenate([protos[c] + 0.1 * rng.standard_normal((q, 1, size, size)) for c in range(n)])
    return Episode(s.astype(np.float32), np.repeat(np.arange(n), k), qq.astype(np.float32),
                   np.repeat(np.arange(n), q), tuple(range(n)), np.arange(n * k), np.arange(n * q))


def tiny_model(kind, n_way=3, seed=0, **hp):
    if kind in ("baseline", "baseline++"):
        hp.setdefault("n_classes", 4)
        hp.setdefault("finetune_steps", 5)
    return build_model(kind, SMALL, np.random.default_rng(seed), n_way, **hp)


# -- embedding ---------------------------------------------------------------------------
class TestEmbed:
    def test_batch_of_one(self):
        model = tiny_model("proto")
        assert embed(model, np.zeros((1, 1, 12, 12), np.float32)).shape == (1, SMALL.embedding_dim)

    def test_default_backbone_dims(self):
        assert BackboneConfig().embedding_dim == 64 and BackboneConfig().feature_shape == (64, 1, 1)

    def test_duplicates_identical_in_eval(self):
        model = tiny_model("proto")
        x = np.repeat(np.random.default_rng(0).uniform(size=(1, 1, 12, 12)), 3, axis=0).astype(np.float32)
        e = embed(model, x).data
        assert (e[0] == e[1]).all() and (e[1] == e[2]).all()

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            embed(tiny_model("proto"), np.zeros((2, 1, 10, 12), np.float32))

    def test_first_layer_gradient_fd(self):
        rng = np.random.default_rng(0)
        with precision(np.float64):
            params, buffers = init_backbone(SMALL, rng)
        x = rng.uniform(size=(3, 1, 12, 12))
        rest = {n: t64(p.data) for n, p in params.items() if n != "backbone.conv0.weight"}

        def build(t):
            return backbone_forward({**rest, "backbone.conv0.weight": t[0]}, None, t64(x), SMALL, True).sum()

        assert check_gradient(build, [params["backbone.conv0.weight"].data]) < 1e-4


# -- metric heads ------------------------------------------------------------------------
class TestMatching:
    def test_extremum(self):
        s = t64(np.eye(4)[:3])
        q = t64(np.eye(4)[[1]])
        p = matching_forward(s, [0, 1, 2], q).data
        assert p.argmax() == 1 and p[0, 1] > p[0, 0] and p[0, 1] > p[0, 2]

    def test_identical_supports_uniform(self):
        s = t64(np.tile([[0.3, -1.0, 2.0]], (4, 1)))
        p = matching_forward(s, [0, 1, 2, 3], t64([[1.0, 1.0, 1.0]])).data
        np.testing.assert_allclose(p, 0.25, atol=1e-12)

    def test_brute_force(self):
        rng = np.random.default_rng(1)
        s, q, labels = rng.standard_normal((6, 5)), rng.standard_normal((4, 5)), np.array([0, 1, 2, 0, 1, 2])
        with precision(np.float64):
            p = matching_forward(t64(s), labels, t64(q), 3, scale=10.0).data
        for i in range(4):
            cos = np.array([q[i] @ s[j] / np.linalg.norm(q[i]) / np.linalg.norm(s[j]) for j in range(6)])
            att = np.exp(10 * cos) / np.exp(10 * cos).sum()
            ref = [att[labels == c].sum() for c in range(3)]
            np.testing.assert_allclose(p[i], ref, atol=1e-6)

    def test_zero_norm_guard(self):
        with pytest.raises(NumericGuardError):
            matching_forward(t64(np.zeros((2, 3))), [0, 1], t64(np.ones((1, 3))))


class TestPrototypes:
    def test_single_shot(self):
        e = np.random.default_rng(0).standard_normal((3, 4))
        np.testing.assert_array_equal(compute_prototypes(t64(e), [0, 1, 2]).data, e)

    def test_mean(self):
        np.testing.assert_allclose(compute_prototypes(t64([[1.0, 2.0], [3.0, 4.0]]), [0, 0]).data, [[2.0, 3.0]])

    def test_brute_force(self):
        rng = np.random.default_rng(2)
        e, labels = rng.standard_normal((25, 6)), rng.permutation(np.repeat(np.arange(5), 5))
        with precision(np.float64):
            protos = compute_prototypes(t64(e), labels, 5).data
        for c in range(5):
            np.testing.assert_allclose(protos[c], e[labels == c].mean(axis=0), atol=1e-7)

    def test_missing_class(self):
        with pytest.raises(ContractError):
            compute_prototypes(t64(np.ones((2, 2))), [0, 2], 3)


class TestProto:
    def test_zero_distance_argmax(self):
        protos = np.random.default_rng(0).standard_normal((4, 3))
        assert proto_forward(t64(protos), t64(protos[[2]])).data.argmax() == 2

    def test_equidistant_uniform(self):
        protos = t64([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        np.testing.assert_allclose(proto_forward(protos, t64([[0.0, 0.0]])).data, 0.25, atol=1e-12)

    def test_brute_force(self):
        rng = np.random.default_rng(3)
        protos, q = rng.standard_normal((5, 4)), rng.standard_normal((7, 4))
        with precision(np.float64):
            p = proto_forward(t64(protos), t64(q)).data
        d = ((q[:, None] - protos[None]) ** 2).sum(-1)
        ref = np.exp(-d) / np.exp(-d).sum(1, keepdims=True)
        np.testing.assert_allclose(p, ref, atol=1e-6)


class TestRelation:
    def _module(self, seed=0, dtype=np.float64):
        with precision(dtype):
            return init_relation_module(np.random.default_rng(seed), 4, (3, 3), hidden=8)

    def test_zero_final_layer_uniform(self):
        params, buffers = self._module()
        params["relation.fc2.weight"] = t64(np.zeros((1, 8)))
        rng = np.random.default_rng(0)
        p = relation_forward(params, buffers, t64(rng.standard_normal((6, 4, 3, 3))), [0, 1, 2, 0, 1, 2],
                             t64(rng.standard_normal((5, 4, 3, 3))), 3, training=True).data
        np.testing.assert_allclose(p, 1 / 3, atol=1e-12)

    def test_rows_sum_to_one(self):
        params, buffers = self._module()
        rng = np.random.default_rng(1)
        p = relation_forward(params, buffers, t64(rng.standard_normal((4, 4, 3, 3))), [0, 1, 2, 3],
                             t64(rng.standard_normal((6, 4, 3, 3))), 4, training=True).data
        np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-12)

    def test_module_gradient_fd(self):
        params, buffers = self._module(seed=2)
        rng = np.random.default_rng(2)
        s, q = rng.standard_normal((4, 4, 3, 3)), rng.standard_normal((4, 4, 3, 3))
        names = ["relation.conv0.weight", "relation.fc1.weight", "relation.fc2.weight", "relation.bn1.bias"]
        fixed = {n: t64(p.data) for n, p in params.items()}

        def build(ts):
            p = {**fixed, **dict(zip(names, ts))}
            out = relation_forward(p, buffers, t64(s), [0, 1, 0, 1], t64(q), 2, training=True)
            return F.nll_from_log_probs(out.log(), [0, 1, 1, 0])

        assert check_gradient(build, [params[n].data for n in names]) < 1e-4


# -- MAML ----------------------------------------------------------------------------------
def perceptron(seed=0, n_in=3, hidden=4, n_out=2):
    rng = np.random.default_rng(seed)
    return {
        "w1": t64(rng.standard_normal((hidden, n_in)), True),
        "b1": t64(rng.standard_normal(hidden) * 0.1, True),
        "w2": t64(rng.standard_normal((n_out, hidden)), True),
    }


def perceptron_task(seed=0, n=6, n_in=3):
    rng = np.random.default_rng(seed + 100)
    xs, xq = rng.standard_normal((n, n_in)), rng.standard_normal((n, n_in))
    ys, yq = np.arange(n) % 2, (np.arange(n) + 1) % 2
    return xs, ys, xq, yq


def perceptron_loss(p, x, y):
    h = F.linear(t64(x), p["w1"], p["b1"]).sigmoid()
    return F.softmax_cross_entropy(F.linear(h, p["w2"]), y)


class TestMamlAdapt:
    def test_zero_updates(self):
        p = perceptron()
        fast = maml_adapt(lambda q: perceptron_loss(q, *perceptron_task()[:2]), p, 0.1, 0)
        assert all(fast[n] is p[n] for n in p)

    def test_scalar_example(self):
        theta = {"t": t64(1.0, True)}
        fast = maml_adapt(lambda q: q["t"] * q["t"], theta, 0.1, 1)
        assert abs(fast["t"].item() - 0.8) < 1e-12

    def test_initialization_untouched(self):
        p = perceptron()
        before = {n: v.data.copy() for n, v in p.items()}
        maml_adapt(lambda q: perceptron_loss(q, *perceptron_task()[:2]), p, 0.5, 3)
        assert all(before[n].tobytes() == p[n].data.tobytes() for n in p)

    def test_support_accuracy_does_not_drop(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            x = np.concatenate([rng.normal(-2, 0.5, (5, 2)), rng.normal(2, 0.5, (5, 2))])
            y = np.repeat([0, 1], 5)
            p = {"w": t64(rng.standard_normal((2, 2)) * 0.1, True), "b": t64(np.zeros(2), True)}

            def loss(q):
                return F.softmax_cross_entropy(F.linear(t64(x), q["w"], q["b"]), y)

            before = F.accuracy(F.linear(t64(x), p["w"], p["b"]), y)
            fast = maml_adapt(loss, p, 0.5, 2, track_higher_order=False)
            assert F.accuracy(F.linear(t64(x), fast["w"], fast["b"]), y) >= before


class TestMetaGradient:
    def _composite(self, inner_lr, n_updates):
        xs, ys, xq, yq = perceptron_task()
        names = ["w1", "b1", "w2"]

        def f(arrays):
            with precision(np.float64):
                p = {n: t64(a, True) for n, a in zip(names, arrays)}
                fast = maml_adapt(lambda q: perceptron_loss(q, xs, ys), p, inner_lr, n_updates, False)
                return perceptron_loss(fast, xq, yq).item()

        return f

    def _analytic(self, inner_lr, n_updates, first_order):
        xs, ys, xq, yq = perceptron_task()
        with precision(np.float64):
            g, _ = maml_meta_gradient(lambda q, e: perceptron_loss(q, xs, ys), lambda q, e: perceptron_loss(q, xq, yq),
                                      perceptron(), [None], inner_lr, n_updates, first_order)
        return g

    def test_second_order_matches_fd(self):
        g = self._analytic(0.5, 2, False)
        p = perceptron()
        fd = finite_diff_grad(self._composite(0.5, 2), [p[n].data for n in ("w1", "b1", "w2")])
        assert relative_error([g[n] for n in ("w1", "b1", "w2")], fd) < 1e-3

    def test_first_order_differs(self):
        g2, g1 = self._analytic(0.5, 2, False), self._analytic(0.5, 2, True)
        diff = np.sqrt(sum(((g2[n] - g1[n]) ** 2).sum() for n in g2))
        assert diff > 1e-6

    def test_zero_inner_lr_is_plain_gradient(self):
        g = self._analytic(0.0, 2, False)
        xq, yq = perceptron_task()[2:]
        p = perceptron()
        with precision(np.float64):
            plain = grad(perceptron_loss(p, xq, yq), [p[n] for n in ("w1", "b1", "w2")])
        for n, ref in zip(("w1", "b1", "w2"), plain):
            np.testing.assert_allclose(g[n], ref.data, atol=1e-12)

    def test_meta_step_reduces_query_loss(self):
        xs, ys, xq, yq = perceptron_task()
        p = perceptron()
        opt = make_optimizer("sgd", p, 0.1)
        losses = []
        with precision(np.float64):
            for _ in range(15):
                p, loss = maml_meta_step(lambda q, e: perceptron_loss(q, xs, ys), lambda q, e: perceptron_loss(q, xq, yq),
                                         p, [None], 0.5, 1, opt)
                losses.append(loss)
        assert losses[-1] < losses[0]

    def test_sum_is_n_times_mean(self):
        xs, ys, xq, yq = perceptron_task()
        args = (lambda q, e: perceptron_loss(q, xs, ys), lambda q, e: perceptron_loss(q, xq, yq), perceptron(),
                [None, None, None], 0.3, 1)
        with precision(np.float64):
            gm, _ = maml_meta_gradient(*args, reduce="mean")
            gs, _ = maml_meta_gradient(*args, reduce="sum")
        np.testing.assert_allclose(gs["w1"], 3 * gm["w1"], rtol=1e-12)

    def test_needs_episodes(self):
        with pytest.raises(ValueError):
            maml_meta_gradient(None, None, perceptron(), [], 0.1, 1)


# -- model-level behaviour -----------------------------------------------------------------
def _permute(ep: Episode, perm):
    perm = np.asarray(perm)
    return Episode(ep.support_images, perm[ep.support_labels], ep.query_images, perm[ep.query_labels],
                   tuple(np.asarray(ep.class_map)[np.argsort(perm)]), ep.support_indices, ep.query_indices)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_permutation_equivariance(kind, monkeypatch):
    model = tiny_model(kind)
    if kind == "maml":
        # a symmetric head; random rows would tie outputs to class identities
        model.params["head.weight"] = Tensor(np.zeros((3, SMALL.embedding_dim)), requires_grad=True)
    if kind.startswith("baseline"):
        # a fresh head with identical rows treats every class alike
        def symmetric_head(rng, n):
            w = Tensor(np.full((n, SMALL.embedding_dim), 0.01), requires_grad=True)
            return w, None if model.hparams["cosine"] else Tensor(np.zeros(n), requires_grad=True)

        monkeypatch.setattr(model, "init_head", symmetric_head)
    ep = toy_episode()
    perm = [2, 0, 1]
    p = model.predict_proba(ep, rng=np.random.default_rng(0))
    pp = model.predict_proba(_permute(ep, perm), rng=np.random.default_rng(0))
    np.testing.assert_allclose(pp[:, perm], p, atol=1e-5)


@pytest.mark.parametrize("kind", ["proto", "relation", "matching"])
def test_support_order_invariance(kind):
    model = tiny_model(kind)
    ep = toy_episode(k=3)
    order = np.random.default_rng(5).permutation(len(ep.support_labels))
    shuffled = Episode(ep.support_images[order], ep.support_labels[order], ep.query_images, ep.query_labels,
                       ep.class_map, ep.support_indices[order], ep.query_indices)
    # eval mode so batch statistics do not depend on order either way
    np.testing.assert_allclose(model.predict_proba(shuffled), model.predict_proba(ep), atol=1e-6)


def test_one_shot_equivalence_on_model_embeddings():
    model = tiny_model("proto")
    ep = toy_episode(k=1)
    s, q = model._embed_episode(ep, training=False)
    with precision(np.float64):
        s64, q64 = t64(s.data), t64(q.data)
        m = matching_forward(s64, ep.support_labels, q64, 3, distance="sqeuclidean", scale=1.0).data
        p = proto_forward(compute_prototypes(s64, ep.support_labels, 3), q64).data
    np.testing.assert_allclose(m, p, atol=1e-6)


def test_maml_rejects_way_change():
    model = tiny_model("maml")
    with pytest.raises(WayChangeError, match="3-way"):
        model.check_way(5)
    with pytest.raises(ValueError):
        tiny_model("maml", inner_steps=0)


@pytest.mark.parametrize("kind", ["proto", "matching", "relation", "baseline++"])
def test_metric_methods_change_way(kind):
    model = tiny_model(kind, n_way=5)
    model.check_way(3)
    p = model.predict_proba(toy_episode(n=3))
    assert p.shape == (9, 3)


def test_maml_eval_keeps_initialization():
    model = tiny_model("maml")
    before = {n: p.data.copy() for n, p in model.params.items()}
    model.predict_proba(toy_episode())
    assert all(before[n].tobytes() == model.params[n].data.tobytes() for n in before)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_one_training_update_changes_parameters(kind):
    model = tiny_model(kind)
    opt = model.make_optimizer("adam", 1e-3)
    before = {n: p.data.copy() for n, p in model.params.items()}
    if model.episodic:
        loss = model.train_step([toy_episode(seed=s) for s in range(model.episodes_per_update)], opt)
    else:
        ep = toy_episode(n=4)
        loss = model.train_step([(ep.query_images, ep.query_labels)], opt)
    assert np.isfinite(loss)
    assert any(not np.array_equal(before[n], model.params[n].data) for n in before)


def test_unknown_kind():
    with pytest.raises(ValueError):
        build_model("snail", SMALL, np.random.default_rng(0))


# -- baselines -----------------------------------------------------------------------------------
@pytest.fixture(scope="module")
def ten_class(request):
    glyphs = request.getfixturevalue("glyphs")
    keep = np.isin(glyphs.labels, np.arange(10))
    return LabeledImageSet(glyphs.images[keep], glyphs.labels[keep], glyphs.class_names[:10])


def _train_accuracy(model, ds):
    """Training-set accuracy under batch statistics, as seen during training."""
    from fewshot.datasets import to_nchw

    feats = model.embed(to_nchw(ds.images), training=True)
    scores = model.head_scores(feats, model.params["head.weight"], model.params.get("head.bias"))
    return F.accuracy(scores, ds.labels)


class TestBaselinePretrain:
    def test_one_epoch_beats_chance(self, ten_class):
        model = Baseline(BackboneConfig(), np.random.default_rng(0), n_classes=10)
        stream = BatchStream(ten_class, range(10), 16, np.random.default_rng(1))
        model, losses = baseline_pretrain(model, stream, 1, model.make_optimizer("adam", 1e-3))
        assert len(losses) == 1 and _train_accuracy(model, ten_class) > 0.1

    def test_frozen_run_at_chance(self, ten_class):
        model = Baseline(BackboneConfig(), np.random.default_rng(0), n_classes=10)
        stream = BatchStream(ten_class, range(10), 16, np.random.default_rng(1))
        model, _ = baseline_pretrain(model, stream, 1, model.make_optimizer("sgd", 0.0))
        assert abs(_train_accuracy(model, ten_class) - 0.1) <= 0.05

    def test_deterministic(self, ten_class):
        def run():
            model = Baseline(BackboneConfig(channels=8), np.random.default_rng(0), n_classes=10)
            stream = BatchStream(ten_class, range(10), 32, np.random.default_rng(1))
            baseline_pretrain(model, stream, 1, model.make_optimizer("adam", 1e-3))
            return b"".join(p.data.tobytes() for p in model.params.values())

        assert run() == run()

    def test_class_count_checked(self, ten_class):
        model = Baseline(BackboneConfig(channels=8), np.random.default_rng(0), n_classes=7)
        with pytest.raises(ValueError):
            baseline_pretrain(model, BatchStream(ten_class, range(10)), 1, model.make_optimizer())


class TestBaselineFinetune:
    @pytest.mark.parametrize("cosine", [False, True])
    def test_support_accuracy_improves(self, glyphs, cosine):
        model = Baseline(BackboneConfig(), np.random.default_rng(0), n_classes=10, cosine=cosine)
        rng = np.random.default_rng(1)
        for seed in range(20):
            ep = sample_episode(glyphs, range(80), EpisodeSpec(5, 2, 1), rng)
            s, _ = model._embed_episode(ep, training=False)
            fresh = model.finetune_head(s, ep.support_labels, 5, np.random.default_rng(seed), steps=0)
            tuned = model.finetune_head(s, ep.support_labels, 5, np.random.default_rng(seed))
            before = F.accuracy(model.head_scores(s, fresh["w"], fresh.get("b")), ep.support_labels)
            after = F.accuracy(model.head_scores(s, tuned["w"], tuned.get("b")), ep.support_labels)
            assert after >= before

    def test_probabilities_and_no_op(self):
        model = tiny_model("baseline")
        ep = toy_episode()
        p = baseline_finetune_and_classify(model, ep, 10, np.random.default_rng(0))
        np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-6)
        p0 = baseline_finetune_and_classify(model, ep, 0, np.random.default_rng(3))
        s, q = model._embed_episode(ep, training=False)
        w, b = model.init_head(np.random.default_rng(3), 3)
        ref = F.softmax(model.head_scores(q, w, b), axis=1).data
        np.testing.assert_allclose(p0, ref, atol=1e-6)


# -- loops ---------------------------------------------------------------------------------------
class TestLoops:
    def test_zero_epochs(self, glyphs, glyph_split):
        model = tiny_model("proto")
        before = {n: p.data.copy() for n, p in model.params.items()}
        model, history = train_loop(model, [], 0, model.make_optimizer())
        assert history == [] and all(np.array_equal(before[n], model.params[n].data) for n in before)

    def test_history_length_and_best_selection(self):
        model = tiny_model("proto")
        eps = [toy_episode(seed=s) for s in range(3)]
        scores = iter([0.2, 0.9, 0.5])
        snapshots = []

        def validate(m):
            snapshots.append(m.state_dict())
            return next(scores)

        model, history = train_loop(model, eps, 3, model.make_optimizer(), validate, "best")
        assert [h["epoch"] for h in history] == [1, 2, 3]
        for n, arr in snapshots[1]["params"].items():
            np.testing.assert_array_equal(model.params[n].data, arr)

    def test_last_selection(self):
        model = tiny_model("proto")
        eps = [toy_episode()]
        vals = iter([0.9, 0.1])
        model, _ = train_loop(model, eps, 2, model.make_optimizer(), lambda m: next(vals), "last")
        final = model.state_dict()
        assert all(np.array_equal(final["params"][n], model.params[n].data) for n in final["params"])

    def test_learning_progress(self, glyphs, glyph_split):
        """Validation accuracy after a few short epochs beats the first epoch on every seed."""
        from fewshot.methods import make_validator

        for seed in range(5):
            model = build_model("proto", BackboneConfig(), np.random.default_rng(seed), 5)
            stream = EpisodeStream(glyphs, glyph_split.train_classes, EpisodeSpec(5, 1, 8), 15,
                                   rng=np.random.default_rng(100 + seed))
            validate = make_validator(glyphs, glyph_split.val_classes, EpisodeSpec(5, 1, 8), 40, seed)
            _, history = train_loop(model, stream, 4, model.make_optimizer(), validate, "last")
            assert history[-1]["val_acc"] > history[0]["val_acc"], history

    def test_eval_report_formatting(self):
        r = EvalReport(np.full(10, 0.75))
        assert r.format() == "75.00 ± 0.00" and r.ci95_halfwidth == 0.0
        r2 = EvalReport(np.array([0.5, 1.0, 0.75]))
        assert abs(r2.mean - 0.75) < 1e-12
        assert abs(r2.ci95_halfwidth - 1.96 * np.std([0.5, 1.0, 0.75], ddof=1) / np.sqrt(3)) < 1e-12

    def test_untrained_backbone_at_chance_on_uninformative_labels(self):
        # labels carry no signal here, so any method must sit at 1/N
        rng = np.random.default_rng(0)
        images = rng.uniform(size=(400, 28, 28, 1)).astype(np.float32)
        ds = LabeledImageSet(images, np.repeat(np.arange(20), 20), [f"c{i}" for i in range(20)])
        model = build_model("proto", BackboneConfig(), np.random.default_rng(1), 5)
        report = eval_loop(model, ds, range(20), EpisodeSpec(5, 1, 8), 300, rng=np.random.default_rng(2))
        assert abs(report.mean - 0.2) <= 0.04

    def test_fixed_seed_pins_tasks_across_kinds(self, glyphs, glyph_split):
        digests = set()
        for kind in ("proto", "matching", "maml"):
            model = build_model(kind, BackboneConfig(channels=8), np.random.default_rng(0), 5)
            r = eval_loop(model, glyphs, glyph_split.test_classes, EpisodeSpec(5, 1, 2), 5, NoiseSpec(3),
                          rng=np.random.default_rng(42))
            digests.add(r.task_digest)
        assert len(digests) == 1

    def test_mean_invariant_to_task_order(self):
        accs = np.random.default_rng(0).uniform(size=50)
        assert EvalReport(accs).mean == pytest.approx(EvalReport(accs[::-1]).mean, abs=1e-15)

    def test_eval_loop_rejects_maml_way_change(self, glyphs, glyph_split):
        model = build_model("maml", BackboneConfig(channels=8), np.random.default_rng(0), 5)
        with pytest.raises(WayChangeError):
            eval_loop(model, glyphs, glyph_split.test_classes, EpisodeSpec(3, 1, 1), 1)

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_checkpoint_round_trip(self, kind, tmp_path):
        model = tiny_model(kind)
        save_checkpoint(model, tmp_path / "ck.bin", rng_label="seed=3")
        back, header = load_checkpoint(tmp_path / "ck.bin")
        assert header["kind"] == model.kind and header["rng_label"] == "seed=3"
        assert type(back) is type(model) and back.hparams == model.hparams
        for n, p in model.params.items():
            np.testing.assert_array_equal(back.params[n].data, p.data)
        ep = toy_episode()
        np.testing.assert_allclose(back.predict_proba(ep, rng=np.random.default_rng(0)),
                                   model.predict_proba(ep, rng=np.random.default_rng(0)), atol=1e-6)

    def test_history_csv(self):
        text = history_to_csv([{"epoch": 1, "train_loss": 0.5, "val_acc": 0.25}])
        assert text == "epoch,train_loss,val_acc\n1,0.5,0.25\n"


def test_maml_class_exposed():
    assert MAML.episodes_per_update == 4
