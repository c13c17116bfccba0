import csv
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panet.cli import main
from panet.harness.anchors import generate_anchors
from panet.harness.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from panet.harness.config import TrainConfig, parse_overrides
from panet.harness.data import (
    box_iou,
    crop_masks,
    ellipse_mask,
    generate_synthetic_scene,
    jitter_boxes,
    make_proposals,
    sample_rois,
    tight_box,
)
from panet.harness.evaluate import ScenePredictions, evaluate, mask_iou, paste_mask, score_scene, write_report
from panet.harness.losses import mask_bce_loss, smooth_l1_box_loss, softmax_cross_entropy
from panet.harness.model import PANet
from panet.harness.train import learning_rate, make_scenes, median_window, train
from panet.tensor import ConfigurationError, ContractViolation, Tensor

TINY = dict(steps=3, num_scenes=4, eval_scenes=2, rois_per_image=16)


def test_scene_is_deterministic_per_seed():
    a, b = generate_synthetic_scene(11), generate_synthetic_scene(11)
    np.testing.assert_array_equal(a.image, b.image)
    assert [i.class_id for i in a.instances] == [i.class_id for i in b.instances]
    assert not np.array_equal(a.image, generate_synthetic_scene(12).image)


def test_ellipse_area_close_to_closed_form():
    for ry, rx in ((10, 14), (20, 8), (25, 25)):
        area = ellipse_mask(64, 64, 32, 32, ry, rx).sum()
        assert abs(area - math.pi * ry * rx) / (math.pi * ry * rx) < 0.05


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_scene_boxes_are_tight_and_objects_disjoint(seed):
    scene = generate_synthetic_scene(seed)
    union = np.zeros(scene.size, dtype=int)
    for inst in scene.instances:
        np.testing.assert_array_equal(inst.box, tight_box(inst.mask))
        x0, y0, x1, y1 = inst.box.astype(int)
        assert inst.mask[y0:y1, x0:x1].sum() == inst.mask.sum()
        union += inst.mask
    assert union.max() <= 1


def test_zero_jitter_reproduces_gt_and_proposals_stay_in_bounds():
    scene = generate_synthetic_scene(3)
    gt = scene.gt_boxes
    same = jitter_boxes(gt, np.random.default_rng(0), 0.0, 4)
    np.testing.assert_array_equal(same, np.repeat(gt, 4, axis=0))
    for seed in range(5):
        for r in make_proposals(scene, seed):
            assert 0 <= r.x0 < r.x1 <= 64 and 0 <= r.y0 < r.y1 <= 64
            assert 2 <= r.assigned_level <= 5


def test_jittered_proposals_mostly_overlap_their_gt():
    rng = np.random.default_rng(0)
    hits = total = 0
    for seed in range(100):
        gt = generate_synthetic_scene(seed).gt_boxes
        jit = jitter_boxes(gt, rng, 0.2, 8)
        iou = box_iou(jit, gt)[np.arange(len(jit)), np.repeat(np.arange(len(gt)), 8)]
        hits += int((iou > 0.5).sum())
        total += len(jit)
    assert hits / total >= 0.9


def test_sample_rois_ratio_and_mask_targets():
    scene = generate_synthetic_scene(5)
    batch = sample_rois(make_proposals(scene, 1), scene, 64, 0.25, np.random.default_rng(0))
    pos = batch.positives
    assert 0 < len(pos) <= 16 and len(batch.rois) <= 64
    assert np.all(batch.labels[pos] > 0) and np.all(batch.labels[len(pos):] == 0)
    assert batch.mask_targets.shape == (len(pos), 28, 28)
    # pasting a positive's target back recovers most of its instance
    for i in pos[:4]:
        inst = scene.instances[batch.matched_gt[i]]
        box = batch.rois[i].as_array()
        pasted = paste_mask(batch.mask_targets[i], box, 64, 64)
        inside = np.zeros_like(inst.mask)
        x0, y0, x1, y1 = box
        ys, xs = np.mgrid[0:64, 0:64] + 0.5
        inside[(ys >= y0) & (ys < y1) & (xs >= x0) & (xs < x1)] = 1
        assert mask_iou(pasted, inst.mask & inside) >= 0.9


def test_gt_mask_round_trip_through_crop_and_paste():
    for seed in range(10):
        scene = generate_synthetic_scene(seed)
        for inst in scene.instances:
            crop = crop_masks(inst.mask, inst.box)[0]
            assert mask_iou(paste_mask(crop, inst.box, 64, 64), inst.mask) >= 0.95


def test_sample_rois_degenerate_cases():
    scene = generate_synthetic_scene(2)
    far = [r for r in make_proposals(scene, 0) if box_iou(r.as_array(), scene.gt_boxes).max() < 0.5]
    batch = sample_rois(far, scene, 16)
    assert len(batch.positives) == 0 and batch.mask_targets.shape == (0, 28, 28)
    from panet.roi import RoI

    exact = [RoI(*b) for b in scene.gt_boxes]
    with pytest.warns(RuntimeWarning, match="no negatives"):
        batch = sample_rois(exact, scene, 16)
    assert len(batch.positives) == len(exact)
    with pytest.raises(ContractViolation):
        sample_rois(exact, scene, 2)


def test_loss_values_on_hand_examples():
    ce = softmax_cross_entropy(Tensor(np.zeros((4, 3))), np.array([0, 1, 2, 0]))
    assert ce.item() == pytest.approx(math.log(3))
    deltas = np.zeros((2, 8))
    deltas[0, 4:] = [0.5, 0, 2.0, 0]  # class 2 columns
    sl1 = smooth_l1_box_loss(Tensor(deltas), np.array([2, 0]), np.zeros((2, 4)))
    assert sl1.item() == pytest.approx((0.5 * 0.25 + 1.5) / 2)
    bce = mask_bce_loss(Tensor(np.zeros((1, 2, 28, 28))), np.array([1]), np.ones((1, 28, 28)))
    assert bce.item() == pytest.approx(math.log(2))
    big = mask_bce_loss(Tensor(np.full((1, 2, 28, 28), 800.0)), np.array([2]), np.zeros((1, 28, 28)))
    assert big.item() == pytest.approx(800.0)


def test_anchor_presets():
    mvd = generate_anchors("mvd")
    assert len(mvd) == 35
    assert len(generate_anchors("cityscapes")) == 15
    np.testing.assert_allclose(mvd.anchors[3 * 5 + 2], [64, 64])
    w, h = mvd.anchors[:, 0], mvd.anchors[:, 1]
    np.testing.assert_allclose(w * h, np.repeat(mvd.scales, 5))
    np.testing.assert_allclose(w / h, np.tile(mvd.aspect_ratios, 7))
    custom = generate_anchors("custom", [100.0], [4.0])
    np.testing.assert_allclose(custom.anchors, [[20, 5]])
    for bad in (lambda: generate_anchors("coco"), lambda: generate_anchors("custom"),
                lambda: generate_anchors("custom", [0.0], [1.0])):
        with pytest.raises(ContractViolation):
            bad()


def test_learning_rate_schedule():
    cfg = TrainConfig(steps=100, warmup_steps=10)
    assert learning_rate(cfg, 0) == pytest.approx(0.02 / 3)
    assert learning_rate(cfg, 10) == pytest.approx(0.02)
    assert learning_rate(cfg, 75) == pytest.approx(0.02)
    assert learning_rate(cfg, 76) == pytest.approx(0.002)


def test_config_text_round_trip_and_rejection():
    cfg = TrainConfig(seed=3, afp=False, box_fusion_mode="sum", backbone_channels=(8, 16, 32, 64))
    assert TrainConfig.from_text(cfg.to_text()) == cfg
    assert parse_overrides(["# comment", "steps = 5  # trailing", ""]) == {"steps": 5}
    for bad in (["nope = 1"], ["steps 5"], ["afp = maybe"], ["steps = x"]):
        with pytest.raises(ConfigurationError):
            parse_overrides(bad)
    with pytest.raises(ConfigurationError):
        TrainConfig(image_size=48)
    with pytest.raises(ConfigurationError):
        TrainConfig(box_fusion_mode="mean")


def test_checkpoint_round_trip(tmp_path):
    cfg = TrainConfig(**TINY)
    model = PANet(cfg, np.random.default_rng(1))
    path = tmp_path / "m.pank"
    save_checkpoint(model, cfg, path)
    loaded, cfg2 = load_checkpoint(path)
    assert cfg2 == cfg
    a, b = model.state_dict(), loaded.state_dict()
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    (tmp_path / "bad.pank").write_bytes(b"NOPE" + path.read_bytes())
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.pank")
    (tmp_path / "long.pank").write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "long.pank")


def _perfect_predictions(scene):
    boxes = scene.gt_boxes
    grids = np.stack([crop_masks(inst.mask, inst.box)[0] for inst in scene.instances])
    return ScenePredictions(boxes, boxes.copy(), scene.gt_classes, grids)


def test_scoring_ground_truth_as_predictions():
    for seed in range(10):
        scene = generate_synthetic_scene(seed)
        s = score_scene(scene, _perfect_predictions(scene))
        assert all(m >= 0.95 for m in s.mask_iou)
        assert all(b == 1.0 for b in s.box_iou) and all(s.correct)


def test_scoring_penalises_wrong_class_and_empty_mask():
    scene = generate_synthetic_scene(4)
    pred = _perfect_predictions(scene)
    pred.classes = 3 - pred.classes
    pred.mask_probs = np.zeros_like(pred.mask_probs)
    s = score_scene(scene, pred)
    assert not any(s.correct) and all(m == 0.0 for m in s.mask_iou)


def test_evaluate_report_and_csv(tmp_path):
    cfg = TrainConfig(**TINY)
    model = PANet(cfg, np.random.default_rng(0))
    scenes = make_scenes(cfg, 3, 99)
    report = evaluate(model, scenes)
    assert len(report.rows) == 3
    assert 0 <= report.mean_mask_iou <= 1 and 0 <= report.accuracy <= 1
    write_report(report, tmp_path / "e.csv")
    rows = list(csv.reader(open(tmp_path / "e.csv", encoding="utf-8")))
    assert rows[0] == ["scene", "instances", "mask_iou", "box_iou", "accuracy"]
    assert len(rows) == 5 and rows[-1][0] == "all"
    assert int(rows[-1][1]) == sum(len(s.instances) for s in scenes)
    assert float(rows[-1][2]) == pytest.approx(report.mean_mask_iou, abs=1e-6)


def test_training_is_deterministic_for_a_seed():
    cfg = TrainConfig(**TINY)
    a, b = train(cfg), train(cfg)
    assert a.rows == b.rows
    c = train(cfg.replace(seed=1))
    assert c.rows != a.rows
    assert median_window(a.rows, 1, 3) == float(np.median([r[5] for r in a.rows]))


def test_all_switches_off_is_a_plain_baseline():
    off = dict(bpa=False, afp=False, ff=False, hhd=False, mbn=False)
    model = PANet(TrainConfig(**TINY, **off))
    assert model.bottom_up is None
    assert not model.mask_head.cfg.fc_branch and not hasattr(model.mask_head, "fc")
    assert model.cfg.box_config().variant == "two_fc"


def test_cli_train_eval_stats_and_tools(tmp_path, capsys):
    out = tmp_path / "run"
    sets = [f"--set={k}={v}" for k, v in TINY.items()]
    assert main(["train", *sets, "--out", str(out), "--quiet"]) == 0
    for name in ("config.txt", "metrics.csv", "model.pank", "loss_curves.png"):
        assert (out / name).stat().st_size > 0
    assert main(["eval", str(out / "model.pank"), "--out", str(out)]) == 0
    assert (out / "eval.csv").exists() and (out / "eval_iou.png").exists()
    assert main(["stats", str(out / "model.pank"), "--out", str(out)]) == 0
    assert (out / "source_ratios.csv").exists() and (out / "source_ratios.png").exists()
    capsys.readouterr()
    assert main(["anchors", "--preset", "cityscapes"]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 16
    assert main(["shapes", "--dump", str(tmp_path / "s"), "--count", "3", "--format", "ppm"]) == 0
    assert (tmp_path / "s" / "scene_002.ppm").read_bytes().startswith(b"P6\n64 64\n255\n")
    assert main(["shapes", "--dump", str(tmp_path / "p"), "--count", "2"]) == 0
    assert (tmp_path / "p" / "scenes.png").exists()


def test_cli_rejects_bad_config(tmp_path, capsys):
    assert main(["train", "--set", "bogus=1", "--out", str(tmp_path)]) == 2
    assert "unknown key" in capsys.readouterr().err
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert main(["anchors", "--preset", "custom"]) == 2


def test_input_standardization_is_per_image_and_channel():
    from panet.harness.model import standardize_images

    rng = np.random.default_rng(9)
    x = rng.uniform(0, 1, (2, 3, 8, 8)) * np.array([1, 5, 0.1])[None, :, None, None] + 3
    out = standardize_images(Tensor(x)).data
    np.testing.assert_allclose(out.mean(axis=(2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=(2, 3)), 1, atol=1e-4)
    np.testing.assert_array_equal(standardize_images(Tensor(x[:1])).data, out[:1])
