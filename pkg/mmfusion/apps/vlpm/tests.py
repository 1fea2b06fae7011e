import math

import numpy as np
from django.test import SimpleTestCase

from mmfusion.apps.dataio.clouds import PointCloud, RangeSpec
from mmfusion.apps.tensor_core.checkpoint import decode_checkpoint, encode_checkpoint
from mmfusion.apps.tensor_core.engine import Tensor, no_grad
from mmfusion.apps.tensor_core.gradcheck import grad_check
from mmfusion.apps.tensor_core.params import ParamStore
from mmfusion.apps.vlpm.module import VlpmConfig, dynamic_weights, init_vlpm, point_attention, vlpm_forward
from mmfusion.apps.voxelizer.voxels import VoxelBatch, VoxelConfig, voxelize
from mmfusion.errors import ConfigError, DomainError, ShapeError


def make_params(cfg, seed=0, dtype="f64"):
    params = ParamStore(seed=seed, dtype=dtype)
    init_vlpm(params, cfg)
    # zero biases would hide bugs in bias wiring
    rng = np.random.default_rng(seed + 100)
    for name in params.names():
        if name.rsplit(".", 1)[-1].startswith("b"):
            params.set_value(name, rng.normal(scale=0.1, size=params.value(name).shape))
    return params


def random_batch(seed, k, n_max=5, dtype=np.float32):
    rng = np.random.default_rng(seed)
    counts = rng.integers(1, n_max + 1, size=k)
    points = np.zeros((k, n_max, 4), dtype=dtype)
    for v, c in enumerate(counts):
        base = rng.uniform(-2, 2, size=3)
        points[v, :c, :3] = base + rng.uniform(0, 0.05, size=(c, 3))
        points[v, :c, 3] = rng.uniform(0, 1, size=c)
    means = np.stack([points[v, :c].mean(axis=0) for v, c in enumerate(counts)]).astype(dtype)
    indices = np.stack([np.arange(k), np.zeros(k, dtype=int), np.zeros(k, dtype=int)], axis=1)
    return VoxelBatch(indices, points, counts.astype(np.int64), means, (k, 1, 1), int(counts.sum()))


def fc(params, prefix, x):
    p = lambda n: params.value(f"{prefix}.{n}")  # noqa: E731
    return np.maximum(x @ p("w1").T + p("b1"), 0) @ p("w2").T + p("b2")


def oracle(batch, cfg, params):
    """Straight-line re-evaluation, one voxel and one point pair at a time."""
    out = []
    for v in range(len(batch)):
        n = int(batch.counts[v])
        pts = batch.points[v, :n].astype(np.float64)
        c = pts[:, :3]
        feats = pts
        stages = cfg.num_pam_stages if cfg.dwm_input == "pam" else 0
        for s in range(1, stages + 1):
            pre = f"pam{s}"
            new = []
            for i in range(n):
                acc = 0.0
                for j in range(n):
                    q = fc(params, f"{pre}.alpha", c[i])
                    k = fc(params, f"{pre}.beta", c[j])
                    pos = fc(params, f"{pre}.delta", c[i] - c[j])
                    w = fc(params, f"{pre}.epsilon", q - k + pos)
                    acc = acc + w * fc(params, f"{pre}.gamma", feats[j])
                new.append(acc)
            feats = np.stack(new)
        cbar = batch.means[v, :3].astype(np.float64)
        total = 0.0
        for i in range(n):
            w = fc(params, "dwm.theta", fc(params, "dwm.zeta", cbar) - fc(params, "dwm.eta", c[i]))
            total = total + w * feats[i]
        out.append(total)
    return np.stack(out)


class VlpmConfigTests(SimpleTestCase):
    def test_defaults(self):
        cfg = VlpmConfig()
        self.assertEqual((cfg.feature_dim, cfg.num_pam_stages, cfg.output_dim), (16, 2, 16))
        self.assertFalse(cfg.normalize_pam_weights)

    def test_raw_mode_and_ablation_widths(self):
        self.assertEqual(VlpmConfig(dwm_input="raw").output_dim, 4)
        self.assertEqual(VlpmConfig(enabled=False).output_dim, 4)

    def test_rejects_bad_values(self):
        with self.assertRaises(ConfigError):
            VlpmConfig(num_pam_stages=0)
        with self.assertRaises(ConfigError):
            VlpmConfig.from_dict({"stages": 2})
        with self.assertRaises(ConfigError):
            VlpmConfig(hidden_widths={"omega": 3})

    def test_param_names(self):
        params = make_params(VlpmConfig(feature_dim=4))
        self.assertIn("pam2.epsilon.w2", params)
        self.assertIn("dwm.theta.b1", params)


class PointAttentionTests(SimpleTestCase):
    def setUp(self):
        self.cfg = VlpmConfig(feature_dim=4, num_pam_stages=2)
        self.params = make_params(self.cfg, seed=3)

    def set_identity_gamma_and_unit_epsilon(self, stage):
        d = self.cfg.feature_dim
        d_in = self.cfg.stage_input_dim(stage)
        self.params.set_value(f"pam{stage}.gamma.w1", np.eye(d, d_in))
        self.params.set_value(f"pam{stage}.gamma.b1", np.zeros(d))
        self.params.set_value(f"pam{stage}.gamma.w2", np.eye(d))
        self.params.set_value(f"pam{stage}.gamma.b2", np.zeros(d))
        self.params.set_value(f"pam{stage}.epsilon.w2", np.zeros((d, d)))
        self.params.set_value(f"pam{stage}.epsilon.b2", np.ones(d))

    def test_single_point_unit_weight_returns_its_feature(self):
        self.set_identity_gamma_and_unit_epsilon(2)
        feat = np.array([[0.5, 1.5, 2.0, 0.25]])
        out = point_attention([[1.0, 2.0, 0.5]], Tensor(feat), self.params, 2, self.cfg)
        np.testing.assert_allclose(out.data, feat)

    def test_duplicate_points_get_equal_features(self):
        coords = [[0.3, -0.2, 0.1]] * 2
        feats = Tensor(np.array([[0.2, 0.4, 0.6, 0.8]] * 2))
        out = point_attention(coords, feats, self.params, 1, self.cfg)
        np.testing.assert_array_equal(out.data[0], out.data[1])

    def test_two_point_scalar_hand_evaluation(self):
        cfg = VlpmConfig(feature_dim=1, num_pam_stages=2)
        params = ParamStore(seed=0, dtype="f64")
        init_vlpm(params, cfg)
        for name in params.names():
            params.set_value(name, np.zeros(params.value(name).shape))
        # every FC block maps its input through sum-then-relu with unit weights
        for block in ("alpha", "beta", "gamma", "delta", "epsilon"):
            params.set_value(f"pam2.{block}.w1", np.ones(params.value(f"pam2.{block}.w1").shape))
            params.set_value(f"pam2.{block}.w2", np.ones((1, 1)))
        params.set_value("pam2.epsilon.b2", np.array([0.5]))
        c = np.array([[0.2, 0.1, 0.3], [0.5, 0.4, 0.6]])
        f = np.array([[2.0], [3.0]])
        relu = lambda x: max(x, 0.0)  # noqa: E731
        q = [relu(sum(ci)) for ci in c]
        k = q
        v = [relu(fi[0]) for fi in f]
        expected = []
        for i in range(2):
            acc = 0.0
            for j in range(2):
                p_ij = relu(sum(c[i] - c[j]))
                w_ij = relu(q[i] - k[j] + p_ij) + 0.5
                acc += w_ij * v[j]
            expected.append([acc])
        out = point_attention(c, Tensor(f), params, 2, cfg)
        np.testing.assert_allclose(out.data, expected, rtol=1e-12)

    def test_empty_voxel_is_domain_error(self):
        with self.assertRaises(DomainError):
            point_attention(np.zeros((0, 3)), Tensor(np.zeros((0, 4))), self.params, 1, self.cfg)

    def test_wrong_input_width(self):
        with self.assertRaises(ShapeError):
            point_attention([[0, 0, 0]], Tensor(np.zeros((1, 3))), self.params, 1, self.cfg)

    def test_normalized_weights_sum_to_one_over_points(self):
        cfg = VlpmConfig(feature_dim=4, normalize_pam_weights=True)
        params = make_params(cfg, seed=4)
        d = cfg.feature_dim
        params.set_value("pam1.gamma.w1", np.eye(d, 4))
        params.set_value("pam1.gamma.b1", np.zeros(d))
        params.set_value("pam1.gamma.w2", np.eye(d))
        params.set_value("pam1.gamma.b2", np.zeros(d))
        feats = np.full((3, 4), 0.7)
        out = point_attention(np.random.default_rng(0).normal(size=(3, 3)), Tensor(feats), params, 1, cfg)
        np.testing.assert_allclose(out.data, feats, rtol=1e-12)


class DynamicWeightsTests(SimpleTestCase):
    def setUp(self):
        self.cfg = VlpmConfig(feature_dim=4)
        self.params = make_params(self.cfg, seed=5)

    def test_single_point_unit_weight(self):
        self.params.set_value("dwm.theta.w2", np.zeros((4, 4)))
        self.params.set_value("dwm.theta.b2", np.ones(4))
        feat = np.array([[1.0, -2.0, 3.0, 0.5]])
        out = dynamic_weights([[0.1, 0.2, 0.3]], Tensor(feat), [0.1, 0.2, 0.3], self.params, self.cfg)
        np.testing.assert_allclose(out.data, feat[0])

    def test_points_at_mean_share_one_weight(self):
        cbar = [0.4, -0.1, 0.2]
        feats = np.random.default_rng(2).normal(size=(3, 4))
        out = dynamic_weights([cbar] * 3, Tensor(feats), cbar, self.params, self.cfg)
        one = dynamic_weights([cbar], Tensor(feats.sum(axis=0, keepdims=True)), cbar, self.params, self.cfg)
        np.testing.assert_allclose(out.data, one.data, rtol=1e-12)

    def test_two_point_scalar_hand_evaluation(self):
        cfg = VlpmConfig(feature_dim=1, num_pam_stages=1)
        params = ParamStore(seed=0, dtype="f64")
        init_vlpm(params, cfg)
        for name in params.names():
            params.set_value(name, np.zeros(params.value(name).shape))
        for block in ("zeta", "eta", "theta"):
            params.set_value(f"dwm.{block}.w1", np.ones(params.value(f"dwm.{block}.w1").shape))
            params.set_value(f"dwm.{block}.w2", np.ones((1, 1)))
        params.set_value("dwm.theta.b2", np.array([0.25]))
        c = np.array([[0.1, 0.1, 0.1], [0.3, 0.2, 0.2]])
        cbar = c.mean(axis=0)
        f = np.array([[2.0], [4.0]])
        zeta = max(cbar.sum(), 0.0)
        expected = sum((max(zeta - max(ci.sum(), 0.0), 0.0) + 0.25) * fi[0] for ci, fi in zip(c, f))
        out = dynamic_weights(c, Tensor(f), cbar, params, cfg)
        self.assertAlmostEqual(out.item(), expected, places=12)

    def test_width_mismatch_is_shape_error(self):
        with self.assertRaises(ShapeError):
            dynamic_weights([[0, 0, 0]], Tensor(np.zeros((1, 3))), [0, 0, 0], self.params, self.cfg)


class VlpmForwardTests(SimpleTestCase):
    def test_empty_batch(self):
        cfg = VlpmConfig(feature_dim=4)
        batch = voxelize(PointCloud(), VoxelConfig())
        out = vlpm_forward(batch, cfg, make_params(cfg), chunk=8)
        self.assertEqual(out.dims, [0, 4])

    def test_matches_brute_force_oracle(self):
        cfg = VlpmConfig(feature_dim=4)
        params = make_params(cfg, seed=0)
        batch = random_batch(0, 3)
        out = vlpm_forward(batch, cfg, params, chunk=2)
        np.testing.assert_allclose(out.data, oracle(batch, cfg, params), rtol=1e-10, atol=1e-12)

    def test_matches_oracle_with_single_point_voxels(self):
        cfg = VlpmConfig(feature_dim=3)
        params = make_params(cfg, seed=1)
        batch = random_batch(1, 4, n_max=1)
        np.testing.assert_allclose(
            vlpm_forward(batch, cfg, params, chunk=16).data, oracle(batch, cfg, params), rtol=1e-10, atol=1e-12
        )

    def test_permutation_invariance_float32(self):
        cfg = VlpmConfig(feature_dim=8)
        params = make_params(cfg, seed=2, dtype="f32")
        batch = random_batch(2, 100)
        rng = np.random.default_rng(7)
        shuffled = VoxelBatch(batch.indices, batch.points.copy(), batch.counts, batch.means, batch.grid)
        for v, c in enumerate(batch.counts):
            shuffled.points[v, :c] = batch.points[v, rng.permutation(c)]
        with no_grad():
            a = vlpm_forward(batch, cfg, params, chunk=64).data
            b = vlpm_forward(shuffled, cfg, params, chunk=64).data
        self.assertLess(float(np.max(np.abs(a - b))), 1e-5)

    def test_extra_padding_is_bit_identical(self):
        cfg = VlpmConfig(feature_dim=4)
        params = make_params(cfg, seed=3, dtype="f32")
        batch = random_batch(3, 10, n_max=5)
        padded = VoxelBatch(
            batch.indices,
            np.concatenate([batch.points, np.zeros((10, 3, 4), dtype=np.float32)], axis=1),
            batch.counts,
            batch.means,
            batch.grid,
        )
        a = vlpm_forward(batch, cfg, params, chunk=4).data
        b = vlpm_forward(padded, cfg, params, chunk=4).data
        self.assertEqual(a.tobytes(), b.tobytes())

    def test_voxel_independence(self):
        cfg = VlpmConfig(feature_dim=4)
        params = make_params(cfg, seed=4)
        batch = random_batch(4, 6)
        moved = VoxelBatch(batch.indices, batch.points.copy(), batch.counts, batch.means, batch.grid)
        moved.points[2, 0, :3] += 0.01
        a = vlpm_forward(batch, cfg, params, chunk=16).data
        b = vlpm_forward(moved, cfg, params, chunk=16).data
        changed = np.any(np.abs(a - b) > 1e-12, axis=1)
        self.assertEqual(changed.tolist(), [False, False, True, False, False, False])

    def test_worker_count_does_not_change_result(self):
        cfg = VlpmConfig(feature_dim=4)
        params = make_params(cfg, seed=5, dtype="f32")
        batch = random_batch(5, 40)
        a = vlpm_forward(batch, cfg, params, chunk=8, workers=1).data
        b = vlpm_forward(batch, cfg, params, chunk=8, workers=4).data
        self.assertEqual(a.tobytes(), b.tobytes())

    def test_disabled_module_mean_pools(self):
        cfg = VlpmConfig(enabled=False)
        batch = random_batch(6, 5)
        out = vlpm_forward(batch, cfg, ParamStore(), chunk=8)
        np.testing.assert_array_equal(out.data, batch.means)

    def test_raw_dwm_input_width(self):
        cfg = VlpmConfig(feature_dim=4, dwm_input="raw")
        out = vlpm_forward(random_batch(7, 3), cfg, make_params(cfg), chunk=8)
        self.assertEqual(out.dims, [3, 4])

    def test_raw_mode_weights_the_points_directly(self):
        cfg = VlpmConfig(feature_dim=4, dwm_input="raw")
        params = make_params(cfg, seed=3)
        batch = random_batch(7, 6, dtype=np.float64)
        out = vlpm_forward(batch, cfg, params, chunk=4)
        np.testing.assert_allclose(out.data, oracle(batch, cfg, params), rtol=1e-10, atol=1e-12)

    def test_raw_mode_has_no_attention_parameters(self):
        cfg = VlpmConfig(feature_dim=4, dwm_input="raw")
        params = make_params(cfg)
        self.assertEqual(sorted({n.split(".")[0] for n in params.names()}), ["dwm"])
        loaded = decode_checkpoint(encode_checkpoint(params), dtype="f64")
        self.assertFalse([n for n in loaded.names() if n.startswith("pam")])
        self.assertEqual(loaded.names(), params.names())
        with self.assertRaises(ConfigError):
            point_attention(np.zeros((2, 3)), np.zeros((2, 4)), params, 1, cfg)

    def test_runs_on_voxelizer_output(self):
        vcfg = VoxelConfig(voxel_size=(0.5, 0.5, 0.5), range=RangeSpec(x=(0, 4), y=(-2, 2), z=(-1, 1)))
        rng = np.random.default_rng(0)
        pts = np.hstack([rng.uniform([0, -2, -1], [3.99, 1.99, 0.99], size=(60, 3)), rng.uniform(size=(60, 1))])
        batch = voxelize(PointCloud(pts.astype(np.float32)), vcfg)
        out = vlpm_forward(batch, VlpmConfig(feature_dim=4), make_params(VlpmConfig(feature_dim=4)), chunk=8)
        self.assertEqual(out.dims, [len(batch), 4])
        self.assertTrue(np.all(np.isfinite(out.data)))

    def test_gradients_match_finite_differences(self):
        cfg = VlpmConfig(feature_dim=2, num_pam_stages=2)
        params = make_params(cfg, seed=6)
        batch = random_batch(8, 3, n_max=3, dtype=np.float64)
        weights = np.random.default_rng(1).normal(size=(3, 2))

        def loss(p):
            return (vlpm_forward(batch, cfg, p, chunk=2) * weights).sum()

        report = grad_check(loss, params, tol=1e-5)
        self.assertTrue(report.passed, msg=f"{report.worst_name}: {report.max_rel_error}")
        self.assertTrue(math.isfinite(report.max_rel_error))
