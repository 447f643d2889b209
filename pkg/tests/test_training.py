import json

import numpy as np
import pytest

from matchkit import model as md
from matchkit import numcore as nc
from matchkit import synthdata as sd
from matchkit import training as tr
from matchkit.features import FeatureSet, PairRecord, RelativePose
from oracles import finite_difference_grad, grads_close


def toy_pair(seed=0, n=10, m=11, c=16, cp=8, size=(100, 100), transform=None):
    rng = np.random.default_rng(seed)
    h, w = size

    def fs(k, image_id):
        return FeatureSet(
            image_id=image_id,
            image_size=size,
            locations=np.column_stack([rng.uniform(5, w - 6, k), rng.uniform(5, h - 6, k)]),
            scores=rng.uniform(0, 1, k),
            descriptors=rng.normal(size=(k, c)).astype(np.float32),
            guidance=rng.normal(size=(k, cp)).astype(np.float32),
        )

    return PairRecord(set_a=fs(n, "a"), set_b=fs(m, "b"),
                      gt_transform=np.eye(3) if transform is None else transform)


def co_located_pair(n=9, c=16, cp=8, size=(100, 100), offset=(0.0, 0.0)):
    rng = np.random.default_rng(3)
    locations = np.column_stack([rng.uniform(10, 80, n), rng.uniform(10, 80, n)])
    desc = rng.normal(size=(n, c)).astype(np.float32)
    guid = rng.normal(size=(n, cp)).astype(np.float32)
    fs_a = FeatureSet(image_id="a", image_size=size, locations=locations,
                      scores=np.ones(n), descriptors=desc, guidance=guid)
    fs_b = FeatureSet(image_id="b", image_size=size, locations=locations + np.asarray(offset),
                      scores=np.ones(n), descriptors=desc, guidance=guid)
    return PairRecord(set_a=fs_a, set_b=fs_b, gt_transform=np.eye(3))


class TestBuildTarget:
    def test_identity_colocated_all_positive(self):
        pair = co_located_pair()
        target = tr.build_target(pair)
        assert target.positive_pairs == [(i, i) for i in range(9)]
        assert target.dustbin_a == [] and target.dustbin_b == []

    def test_band_translation_ignored(self):
        # 4 px shift: inside [3, 5] band -> no positives, no dustbins
        pair = co_located_pair(offset=(4.0, 0.0))
        target = tr.build_target(pair)
        assert target.positive_pairs == []
        assert target.dustbin_a == [] and target.dustbin_b == []
        assert len(target.ignored) == 9

    def test_far_translation_all_dustbin(self):
        pair = co_located_pair(offset=(10.0, 3.0))
        target = tr.build_target(pair)
        assert target.positive_pairs == []
        assert target.dustbin_a == list(range(9))
        assert target.dustbin_b == list(range(9))

    def test_matches_bruteforce_on_synthetic_pair(self):
        spec = sd.HomographyPairSpec(crop_size=(240, 240), corner_perturbation_radius=40.0)
        img = sd.procedural_texture("blobs", 480, np.random.default_rng(4))
        pair = sd.make_pair(img, spec, sd.SurrogateExtractorConfig(),
                            np.random.default_rng(5), "t")
        target = tr.build_target(pair)
        # brute-force O(NM) scan with the same symmetric metric
        from matchkit.geomeval import apply_homography
        h = pair.gt_transform
        loc_a = np.asarray(pair.set_a.locations, dtype=np.float64)
        loc_b = np.asarray(pair.set_b.locations, dtype=np.float64)
        na, nb = len(loc_a), len(loc_b)
        d = np.zeros((na, nb))
        for i in range(na):
            for j in range(nb):
                fwd = np.linalg.norm(apply_homography(h, loc_a[i:i + 1])[0] - loc_b[j])
                bwd = np.linalg.norm(
                    apply_homography(np.linalg.inv(h), loc_b[j:j + 1])[0] - loc_a[i])
                d[i, j] = max(fwd, bwd)
        positives = []
        for i in range(na):
            j = int(np.argmin(d[i]))
            if int(np.argmin(d[:, j])) == i and d[i, j] < 3.0:
                positives.append((i, j))
        assert target.positive_pairs == positives
        dmin = np.minimum(
            np.linalg.norm(apply_homography(h, loc_a)[:, None, :] - loc_b[None], axis=2),
            np.linalg.norm(
                loc_a[:, None, :] - apply_homography(np.linalg.inv(h), loc_b)[None], axis=2))
        pos_a = {i for i, _ in positives}
        expected_dustbin_a = [i for i in range(na)
                              if i not in pos_a and dmin[i].min() > 5.0]
        assert target.dustbin_a == expected_dustbin_a
        # labels match the generator's stored gt_matches
        assert target.positive_pairs == pair.gt_matches

    def test_pose_without_matches_errors(self):
        pose = RelativePose(rotation=np.eye(3), translation=np.array([0.0, 0.0, 1.0]),
                            intrinsics_a=np.eye(3), intrinsics_b=np.eye(3))
        pair = toy_pair()
        pair.gt_transform = pose
        pair.gt_matches = None
        with pytest.raises(ValueError, match="gt_matches"):
            tr.build_target(pair)

    def test_disjoint_sets(self):
        pair = toy_pair(seed=6)
        target = tr.build_target(pair)
        pos_a = {i for i, _ in target.positive_pairs}
        assert pos_a.isdisjoint(target.dustbin_a)
        assert pos_a.isdisjoint({i for i, _ in target.ignored})


class TestNllLoss:
    def uniform_assignment(self, n, m):
        # exact sinkhorn output for all-equal scores: uniform per row
        from matchkit.matching import sinkhorn
        return sinkhorn(nc.Tensor(np.zeros((n, m))), nc.Tensor(0.0), iters=300)

    def test_zero_loss_at_certainty(self):
        probs = np.zeros((3, 3))
        probs[0, 0] = probs[1, 1] = 1.0
        assign = tr.AssignmentMatrix(probs=probs, iterations_run=1)
        target = tr.LossTarget(positive_pairs=[(0, 0), (1, 1)], dustbin_a=[],
                               dustbin_b=[], ignored=[])
        assert tr.nll_loss(assign, target).item() == 0.0

    def test_uniform_2x2_single_positive(self):
        # symmetric 2x2 assignment: positives carry probability 1/4
        assign = self.uniform_assignment(2, 2)
        target = tr.LossTarget(positive_pairs=[(0, 1)], dustbin_a=[], dustbin_b=[], ignored=[])
        loss = tr.nll_loss(assign, target).item()
        assert loss == pytest.approx(-np.log(0.25), abs=1e-6)

    def test_all_empty_errors(self):
        assign = self.uniform_assignment(2, 2)
        with pytest.raises(tr.UnsupervisablePairError):
            tr.nll_loss(assign, tr.LossTarget([], [], [], []))

    def test_nonnegative(self):
        rng = np.random.default_rng(7)
        from matchkit.matching import sinkhorn
        assign = sinkhorn(nc.Tensor(rng.normal(size=(4, 5))), nc.Tensor(0.1), iters=100)
        target = tr.LossTarget(positive_pairs=[(0, 0), (1, 2)], dustbin_a=[3],
                               dustbin_b=[4], ignored=[])
        assert tr.nll_loss(assign, target).item() > 0.0

    def test_gradient_wrt_descriptors_matches_fd(self):
        rng = np.random.default_rng(8)
        n, m, c = 5, 6, 8
        d_a0 = rng.normal(size=(n, c))
        d_b0 = rng.normal(size=(m, c))
        target = tr.LossTarget(positive_pairs=[(0, 0), (2, 3)], dustbin_a=[1],
                               dustbin_b=[5], ignored=[])

        from matchkit.matching import similarity, sinkhorn

        def loss_of(d_a_val, d_b_val):
            s = similarity(nc.Tensor(d_a_val), nc.Tensor(d_b_val))
            assign = sinkhorn(s, nc.Tensor(0.2), iters=50)
            return tr.nll_loss(assign, target)

        d_a = nc.Tensor(d_a0)
        d_b = nc.Tensor(d_b0)
        with nc.Tape() as tape:
            s = tr.nll_loss(
                __import__("matchkit.matching", fromlist=["sinkhorn"]).sinkhorn(
                    __import__("matchkit.matching", fromlist=["similarity"]).similarity(d_a, d_b),
                    nc.Tensor(0.2), iters=50),
                target)
        g_a, g_b = tape.gradients(s, [d_a, d_b])
        num_a = finite_difference_grad(lambda x: loss_of(x, d_b0).item(), d_a0)
        num_b = finite_difference_grad(lambda x: loss_of(d_a0, x).item(), d_b0)
        assert grads_close(g_a, num_a, rtol=1e-4)
        assert grads_close(g_b, num_b, rtol=1e-4)


class TestAdam:
    def test_zero_lr_keeps_params_bitwise(self):
        rng = np.random.default_rng(9)
        params = [nc.Tensor(rng.normal(size=(3, 3))), nc.Tensor(rng.normal(size=(3,)))]
        before = [p.data.copy() for p in params]
        opt = tr.Adam(params, tr.OptimizerConfig(lr=0.0))
        for _ in range(5):
            opt.step([rng.normal(size=p.shape) for p in params])
        for p, b in zip(params, before):
            assert np.array_equal(p.data, b)

    def test_descends_quadratic(self):
        x = nc.Tensor(np.array([3.0, -2.0]))
        opt = tr.Adam([x], tr.OptimizerConfig(lr=0.1))
        for _ in range(200):
            opt.step([2.0 * x.data])
        assert np.max(np.abs(x.data)) < 1e-2

    def test_hinge_then_decay_schedule(self):
        opt = tr.Adam([nc.Tensor(np.zeros(1))],
                      tr.OptimizerConfig(lr=1.0, decay_rate=0.5, hinge_step=3))
        rates = []
        for _ in range(6):
            opt.t += 1
            rates.append(opt.learning_rate())
        opt.t = 0
        assert rates == [1.0, 1.0, 1.0, 0.5, 0.25, 0.125]


class TestTrainConfig:
    def test_round_trip_and_validation(self, tmp_path):
        doc = {"model": {"descriptor_dim": 16, "guidance_dim": 8, "num_blocks": 1},
               "optimizer": {"lr": 0.01}, "steps": 3, "batch_size": 2}
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(doc))
        config = tr.load_train_config(path)
        assert config.model.descriptor_dim == 16
        assert config.optimizer.lr == 0.01

    def test_bad_keep_ratio_names_field(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"model": {"keep_ratio": 1.5}}))
        with pytest.raises(tr.ConfigError, match="keep_ratio"):
            tr.load_train_config(path)

    def test_unknown_key_named(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"learning_rate": 1.0}))
        with pytest.raises(tr.ConfigError, match="learning_rate"):
            tr.load_train_config(path)


def small_model(c=16, cp=8, blocks=1, **kwargs):
    return md.init_model(md.MatcherConfig(
        descriptor_dim=c, guidance_dim=cp, num_blocks=blocks, num_heads=2,
        num_frequencies=4, sinkhorn_iterations=30, **kwargs), seed=0)


def training_set(n_pairs, seed=100):
    spec = sd.HomographyPairSpec(crop_size=(160, 160), corner_perturbation_radius=20.0)
    ext = sd.SurrogateExtractorConfig(descriptor_dim=16, guidance_dim=8, max_keypoints=48)
    pairs = []
    i = 0
    while len(pairs) < n_pairs:
        img = sd.procedural_texture("blobs", 320, np.random.default_rng(seed + i))
        try:
            pairs.append(sd.make_pair(img, spec, ext, np.random.default_rng(seed + 1000 + i),
                                      f"p{i}"))
        except sd.InsufficientKeypointsError:
            pass
        i += 1
    return pairs


class TestTrainLoop:
    def test_overfit_single_pair_loss_decreases(self, tmp_path):
        pairs = training_set(1)
        model = small_model()
        config = tr.TrainConfig(model=model.config, optimizer=tr.OptimizerConfig(lr=2e-3),
                                batch_size=1, steps=200, eval_interval=0, seed=0)
        losses = []
        tr.train(model, pairs, config, tmp_path / "run",
                 progress=lambda step, loss: losses.append(loss))
        assert len(losses) == 200
        for start in range(0, 150, 50):
            window_a = np.mean(losses[start:start + 50])
            window_b = np.mean(losses[start + 50:start + 100])
            assert window_b < window_a
        assert losses[-1] < 0.5 * losses[0]

    def test_zero_steps_checkpoint_equals_init(self, tmp_path):
        pairs = training_set(1, seed=300)
        model = small_model()
        init_params = [p.data.copy() for p in model.parameters()]
        config = tr.TrainConfig(model=model.config, batch_size=1, steps=0, seed=0)
        result = tr.train(model, pairs, config, tmp_path / "run")
        loaded, _ = md.load_checkpoint(result.checkpoint_path)
        for p, q in zip(loaded.parameters(), init_params):
            assert np.array_equal(p.data, q)

    def test_resume_reproduces_uninterrupted_run(self, tmp_path):
        pairs = training_set(3, seed=400)

        def run(steps, out, start_from=None):
            if start_from is None:
                model = small_model()
                state = None
            else:
                model, state = md.load_checkpoint(start_from)
            config = tr.TrainConfig(model=model.config,
                                    optimizer=tr.OptimizerConfig(lr=1e-3),
                                    batch_size=2, steps=steps, seed=7)
            losses = []
            result = tr.train(model, pairs, config, out, optimizer_state=state,
                              progress=lambda s, l: losses.append((s, l)))
            return model, result, losses

        model_full, _, losses_full = run(12, tmp_path / "full")
        _, result_half, _ = run(6, tmp_path / "half")
        model_resumed, _, losses_resumed = run(12, tmp_path / "resumed",
                                               start_from=result_half.checkpoint_path)
        assert losses_resumed == losses_full[6:]
        for p, q in zip(model_resumed.parameters(), model_full.parameters()):
            assert np.array_equal(p.data, q.data)

    def test_determinism(self, tmp_path):
        pairs = training_set(2, seed=500)

        def run(out):
            model = small_model()
            config = tr.TrainConfig(model=model.config, batch_size=2, steps=5, seed=3)
            tr.train(model, pairs, config, out)
            return [p.data.copy() for p in model.parameters()]

        a = run(tmp_path / "a")
        b = run(tmp_path / "b")
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_metrics_log_written(self, tmp_path):
        pairs = training_set(2, seed=600)
        model = small_model()
        config = tr.TrainConfig(model=model.config, batch_size=1, steps=4,
                                eval_interval=2, seed=0)
        result = tr.train(model, pairs, config, tmp_path / "run", eval_pairs=pairs[:1])
        lines = [json.loads(line) for line in result.metrics_path.read_text().splitlines()]
        assert any("loss" in row for row in lines)
        eval_rows = [row for row in lines if "precision" in row]
        assert len(eval_rows) == 2
        assert {"precision", "recall"} <= set(eval_rows[0])

    def test_empty_dataset_rejected(self, tmp_path):
        model = small_model()
        config = tr.TrainConfig(model=model.config, steps=1)
        with pytest.raises(ValueError, match="empty"):
            tr.train(model, [], config, tmp_path / "run")
