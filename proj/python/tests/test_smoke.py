"""Smoke tests for the Python bindings.

Run with PYTHONPATH pointing at the CMake build tree's pypkg directory
(or after `pip install .`).
"""

import math

import numpy as np
import pytest

import trackemb as te


def test_triplet_loss_scalar():
    assert te.triplet_loss(0.2, 0.9) == 0.0
    assert te.triplet_loss(0.5, 0.6) == pytest.approx(0.4)
    assert te.triplet_loss(1.0, 1.0) == pytest.approx(0.5)


def test_cosine_distance():
    a = np.array([1.0, 0.0], dtype=np.float32)
    b = np.array([0.0, 1.0], dtype=np.float32)
    assert te.cosine_distance(a, a) == pytest.approx(0.0)
    assert te.cosine_distance(a, b) == pytest.approx(1.0)
    assert te.cosine_distance(a, -a) == pytest.approx(2.0)


def test_forward_shapes_and_determinism():
    params = te.init_params(te.default_net_spec(), 32, seed=3)
    assert params.input_side == 32
    assert params.embed_dim == 64
    rng = np.random.default_rng(0)
    batch = rng.random((5, 32, 32)).astype(np.float32)
    e1 = te.forward(params, batch)
    e2 = te.forward(params, batch)
    assert e1.shape == (5, 64)
    assert np.array_equal(e1, e2)


def test_checkpoint_roundtrip(tmp_path):
    params = te.init_params(te.default_net_spec(), 32, seed=9)
    path = tmp_path / "enc.ckpt"
    te.save_checkpoint(params, 123, path)
    ck = te.load_checkpoint(path)
    assert ck.step == 123
    batch = np.zeros((1, 32, 32), dtype=np.float32)
    assert np.array_equal(te.forward(params, batch), te.forward(ck.params, batch))


def test_rawgrid_roundtrip(tmp_path):
    img = np.random.default_rng(1).random((16, 16)).astype(np.float32)
    path = tmp_path / "p.grid"
    te.write_rawgrid(img, path)
    back = te.read_rawgrid(path)
    assert np.array_equal(img, back)


def test_motion_gate():
    labels = [te.MotionLabel.Moving] * 5 + [te.MotionLabel.Static] * 5
    gate = te.gate_frame(labels)
    assert gate.moving_fraction == pytest.approx(0.5)
    assert gate.verdict == te.GateVerdict.Accept
    gate_low = te.gate_frame([te.MotionLabel.Static] * 10)
    assert gate_low.verdict == te.GateVerdict.RejectTooFew


def test_classify_moving_threshold():
    flows = [te.PointFlow(0.0, 0.0), te.PointFlow(0.5, 0.0), te.PointFlow(0.6, 0.0)]
    labels = te.classify_moving(flows)
    assert labels == [te.MotionLabel.Static, te.MotionLabel.Static, te.MotionLabel.Moving]


def test_synthetic_tracks_and_training_step():
    tracks = te.generate_synthetic_tracks(11, n_classes=3, instances_per_class=2,
                                          frames_per_track=4, side=32)
    assert tracks.n_classes == 3
    assert tracks.n_tracks() == 6
    frame = tracks.track_frame(0, 0)
    assert frame.shape == (32, 32)
    data = te.tracks_to_pairs(tracks, 3)
    cfg = te.TrainConfig()
    cfg.total_iters = 2
    cfg.batch_size = 4
    cfg.k_negatives = 1
    cfg.random_phase_iters = 2
    cfg.seed = 5
    reports = []
    ck = te.train(data, te.default_net_spec(), 32, cfg,
                  report=lambda it, loss, active, lr: reports.append((it, loss)))
    assert ck.params.embed_dim == 64
    assert ck.step == 2
    assert all(math.isfinite(loss) for _, loss in reports)


def test_retrieval_on_separable_classes():
    tracks = te.generate_synthetic_tracks(2, n_classes=4, instances_per_class=5,
                                          frames_per_track=2, side=32)
    queries = te.tracks_to_labeled_set(tracks, 0)
    db = te.tracks_to_labeled_set(tracks, 1)
    params = te.init_params(te.default_net_spec(), 32, seed=1)
    rep = te.nn_retrieval_rate(queries, db, [params], k=1)
    assert rep.queries == 20
    assert 0.0 <= rep.rate <= 1.0
