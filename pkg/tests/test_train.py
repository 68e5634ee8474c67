import numpy as np
import pytest

from roidepth.geometry import Pose
from roidepth.losses import LossWeights
from roidepth.model import DepthSegNet
from roidepth.scene import generate_scene
from roidepth.tensor import Parameter
from roidepth.train import Adam, DivergenceError, RunConfig, loss_and_backward, train

SMALL = dict(height=32, width=96)


def test_lr_schedule():
    run = RunConfig(steps=100, lr=1.0)
    assert [run.lr_at(s, 1.0) for s in (0, 49, 50, 74, 75, 99)] == pytest.approx([1, 1, 0.1, 0.1, 0.01, 0.01])


def test_adam_first_step_is_lr_times_sign():
    p = Parameter(np.array([1.0, -2.0, 0.5]))
    p.grad[...] = [3.0, -0.01, 0.0]
    Adam([p], lr=0.1).step()
    np.testing.assert_allclose(p.value, [0.9, -1.9, 0.5], atol=1e-6)


def test_rejects_bad_run_config():
    with pytest.raises(ValueError):
        RunConfig(steps=0)
    with pytest.raises(ValueError):
        RunConfig(height=40)


def test_plane_smoke_loss_decreases():
    """Photometric-only objective, known pose, one textured wall."""
    run = RunConfig(
        steps=50, lr=1e-4, weights=LossWeights(beta_smooth=0.0, gamma_seg=0.0), use_mask=False, gt_pose=True, **SMALL
    )
    scene = generate_scene(0, run.height, run.width, layout="plane")
    losses = [h["loss"] for h in train(run, scene=scene, log_every=0).history]
    assert np.all(np.diff(losses) < 0), np.diff(losses)


def test_deterministic():
    run = RunConfig(steps=3, **SMALL)
    a, b = train(run, log_every=0), train(run, log_every=0)
    assert a.history == b.history
    np.testing.assert_array_equal(a.final_depth, b.final_depth)


def test_history_logs_every_term():
    result = train(RunConfig(steps=2, **SMALL), log_every=0)
    assert set(result.history[0]) == {"step", "loss", "photo", "smooth", "seg", "lr"}
    assert len(result.history) == 2


def test_mask_never_increases_loss():
    run = RunConfig(**SMALL)
    scene = generate_scene(1, run.height, run.width)
    model = DepthSegNet(run.model, seed=0)
    poses = [Pose.from_vector(p.as_vector() * 0.5) for p in scene.gt_poses]
    masked, _ = loss_and_backward(model, scene, poses, run, backward=False)
    plain, _ = loss_and_backward(model, scene, poses, RunConfig(use_mask=False, **SMALL), backward=False)
    assert masked.photo <= plain.photo
    assert masked.photo < plain.photo  # the scene has vehicles, so some pixels are down-weighted


def test_pose_gradient_matches_finite_difference():
    run = RunConfig(**SMALL)
    scene = generate_scene(2, run.height, run.width)
    model = DepthSegNet(run.model, seed=0)
    vec = scene.gt_poses[1].as_vector() * 0.7
    poses = [scene.gt_poses[0], Pose.from_vector(vec)]
    _, grads = loss_and_backward(model, scene, poses, run)
    h = 1e-4
    for i in (2, 3, 5):
        e = np.zeros(6)
        e[i] = h
        up, _ = loss_and_backward(model, scene, [poses[0], Pose.from_vector(vec + e)], run, backward=False)
        dn, _ = loss_and_backward(model, scene, [poses[0], Pose.from_vector(vec - e)], run, backward=False)
        assert grads[1][i] == pytest.approx((up.loss - dn.loss) / (2 * h), rel=2e-2, abs=1e-6)


def test_divergence_aborts():
    scene = generate_scene(0, **SMALL)
    scene.images[1] = scene.images[1].copy()
    scene.images[1][0, 0, 0] = np.nan
    with pytest.raises(DivergenceError):
        train(RunConfig(steps=1, **SMALL), scene=scene, log_every=0)


def test_save_run_outputs(tmp_path):
    train(RunConfig(steps=1, **SMALL), out_dir=tmp_path, log_every=0)
    names = {p.name for p in tmp_path.iterdir()}
    assert {"checkpoint", "train_log.csv", "metrics.csv", "depth_pred.pgm", "depth_pred.rtns", "depth_gt.pgm"} <= names
