"""One test per acceptance criterion; each prints a PASS/FAIL line.

The trained-model criteria (5 and 7) share a single full-length default run.
"""

import csv
import itertools
import time

import numpy as np
import pytest

from panet.cli import main
from panet.harness.anchors import generate_anchors
from panet.harness.config import ABLATION_SWITCHES, TrainConfig
from panet.harness.evaluate import evaluate
from panet.harness.gradsuite import TOLERANCE, run_gradient_suite
from panet.harness.model import PANet
from panet.harness.train import build_batch, eval_scenes, make_scenes, median_window, train, train_step
from panet.heads import BoxHead, BoxHeadConfig, MaskHead, MaskHeadConfig
from panet.pyramid import AugmentedPath
from panet.roi import RoI, roi_align
from panet.sync_bn import BNLayer
from panet.tensor import Tensor, mul

from oracles import scalar_roi_align


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("default_run")
    result = train(TrainConfig(), out)
    return result, out


def test_criterion_1_gradient_suite(verdict):
    reports, seconds = run_gradient_suite(seed=0)
    for r in reports:
        print("  " + r.line())
    required = ("conv2d", "conv_transpose2d", "linear", "relu", "elementwise_fuse", "roi_align",
                "bottom_up_block", "box head", "mask head", "syncbn")
    covered = all(any(r.name.startswith(op) for r in reports) for op in required)
    worst = max(r.max_rel_error for r in reports)
    ok = covered and all(r.passed for r in reports) and worst <= TOLERANCE and seconds < 300
    verdict(1, "finite-difference gradient suite", ok,
            f"{sum(r.passed for r in reports)}/{len(reports)} checks, worst rel err {worst:.1e}, {seconds:.1f}s")


def test_criterion_2_roi_align_oracle(verdict):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        c, h, w = rng.integers(1, 5), rng.integers(4, 20), rng.integers(4, 20)
        stride = float(rng.choice([1, 4, 8]))
        fmap = rng.standard_normal((c, h, w))
        x0, y0 = rng.uniform(-2, w * stride), rng.uniform(-2, h * stride)
        box = np.array([x0, y0, x0 + rng.uniform(0.2, w * stride), y0 + rng.uniform(0.2, h * stride)])
        size, ratio = int(rng.integers(1, 8)), int(rng.integers(1, 4))
        got = roi_align(Tensor(fmap), RoI(*box), size, ratio, stride=stride).data
        worst = max(worst, float(np.abs(got - scalar_roi_align(fmap, box, size, ratio, stride)).max()))
    verdict(2, "ROIAlign matches scalar oracle on 100 pairs", worst <= 1e-6, f"max abs err {worst:.1e}")


def _sharded_run(x, up, gamma, beta, n):
    layer = BNLayer(x.shape[1])
    layer.gamma.data[:] = gamma
    layer.beta.data[:] = beta
    xt = Tensor(x.copy(), requires_grad=True)
    out = layer(xt, [x.shape[0] // n] * n)
    mul(out, Tensor(up)).sum().backward()
    return [out.data, layer.running_mean, layer.running_var, xt.grad, layer.gamma.grad, layer.beta.grad]


def test_criterion_3_sync_bn_shard_invariance(verdict):
    rng = np.random.default_rng(3)
    worst = 0.0
    for shape in ((8, 4, 6, 6), (8, 5)):
        x = rng.standard_normal(shape) * 2.5 + 0.7
        up = rng.standard_normal(shape)
        gamma, beta = rng.uniform(0.5, 2.0, shape[1]), rng.standard_normal(shape[1])
        ref = _sharded_run(x, up, gamma, beta, 1)
        for n in (2, 4):
            got = _sharded_run(x, up, gamma, beta, n)
            worst = max(worst, max(float(np.abs(a - b).max()) for a, b in zip(ref, got)))
    verdict(3, "sync-BN outputs, running stats and gradients agree for n=1,2,4", worst <= 1e-6,
            f"max abs diff {worst:.1e}")


def test_criterion_4_structural_counts(verdict):
    rng = np.random.default_rng(4)
    path_layers = AugmentedPath(8, rng).num_param_layers()
    mask = MaskHead(MaskHeadConfig(channels=8), 8, rng)
    fg = mask([Tensor(rng.standard_normal((2, 8, 14, 14)))] * 4).fg_logits
    heavy = BoxHead(BoxHeadConfig(variant="heavier", conv_channels=8, hidden_dim=8), 8, 7, rng).num_convs()
    mvd, city = len(generate_anchors("mvd")), len(generate_anchors("cityscapes"))
    ok = (path_layers == 6 and mask.fc.weight.shape[0] == 784 and fg.shape == (2, 1, 28, 28)
          and heavy == 4 and mvd == 35 and city == 15)
    verdict(4, "structural counts", ok,
            f"path layers {path_layers}, fc outputs {mask.fc.weight.shape[0]} -> {fg.shape[2:]}, "
            f"heavier convs {heavy}, anchors {mvd}/{city}")


@pytest.mark.slow
def test_criterion_5_desk_scale_training(trained, verdict):
    result, _ = trained
    cfg = result.model.cfg
    early, late = median_window(result.rows, 1, 200), median_window(result.rows, 1800, 2000)
    t0 = time.perf_counter()
    report = evaluate(result.model, eval_scenes(cfg), cfg.seed)
    eval_seconds = time.perf_counter() - t0
    ok = (result.seconds < 1800 and late <= 0.4 * early
          and report.mean_mask_iou >= 0.5 and report.accuracy >= 0.9)
    verdict(5, "default training run", ok,
            f"{result.seconds:.0f}s, median loss {early:.3f} -> {late:.3f} ({1 - late / early:.0%} drop), "
            f"mask IoU {report.mean_mask_iou:.3f}, accuracy {report.accuracy:.3f}, eval {eval_seconds:.0f}s")


def _one_step(cfg, scenes):
    model = PANet(cfg)
    model.train()
    images, batch = build_batch(cfg, scenes, 1)
    return model, train_step(model, images, batch).values()


def _cli_metrics(tmp_path, name, **overrides):
    out = tmp_path / name
    sets = [f"--set={k}={v}" for k, v in {"steps": 1, "num_scenes": 2, "rois_per_image": 16, **overrides}.items()]
    code = main(["train", *sets, "--out", str(out), "--quiet"])
    rows = list(csv.reader(open(out / "metrics.csv", encoding="utf-8"))) if code == 0 else []
    return code == 0 and len(rows) == 2 and np.isfinite([float(v) for v in rows[1][2:]]).all()


def test_criterion_6_ablation_machinery(tmp_path, verdict):
    cfg = TrainConfig()
    scenes = make_scenes(cfg, 2)
    finite = 0
    for combo in itertools.product((False, True), repeat=len(ABLATION_SWITCHES)):
        _, values = _one_step(cfg.replace(**dict(zip(ABLATION_SWITCHES, combo))), scenes)
        finite += bool(np.all(np.isfinite(values)))
    variants = {
        "box_before_fc1": {"box.fusion_placement": "before_fc1", "hhd": "false"},
        "box_after_fc1": {"box.fusion_placement": "after_fc1", "hhd": "false"},
        **{f"fc_start_{s}": {"mask.fc_branch_start": s} for s in ("conv2", "conv3", "conv4")},
        **{f"fc_op_{m}": {"mask.fc_fusion_op": m} for m in ("product", "sum", "max")},
        **{f"afp_{m}": {"box.fusion_mode": m, "mask.fusion_mode": m} for m in ("product", "sum", "max")},
    }
    produced = [name for name, over in variants.items() if _cli_metrics(tmp_path, name, **over)]
    ok = finite == 32 and len(produced) == len(variants)
    verdict(6, "ablation switches and variants", ok,
            f"{finite}/32 switch combinations finite, {len(produced)}/{len(variants)} variant metrics CSVs")


@pytest.mark.slow
def test_criterion_7_off_level_source_ratios(trained, tmp_path, verdict):
    _, run_dir = trained
    code = main(["stats", str(run_dir / "model.pank"), "--out", str(tmp_path)])
    rows = list(csv.DictReader(open(tmp_path / "source_ratios.csv", encoding="utf-8")))
    groups = {}
    for r in rows:
        g = int(r["group_level"])
        total = int(r["total"])
        off = int(r["count"]) if int(r["source_level"]) != g else 0
        groups.setdefault(g, [0, total])[0] += off
    fractions = {g: off / total for g, (off, total) in groups.items()}
    ok = code == 0 and bool(fractions) and all(f >= 0.10 for f in fractions.values())
    verdict(7, "every assigned-level group draws >= 10% from other levels", ok,
            ", ".join(f"level {g}: {f:.1%}" for g, f in sorted(fractions.items())))


def test_criterion_8_determinism(tmp_path, verdict):
    cfg = TrainConfig(steps=20, num_scenes=20)
    train(cfg, tmp_path / "a")
    train(cfg, tmp_path / "b")
    a, b = (tmp_path / "a" / "metrics.csv").read_bytes(), (tmp_path / "b" / "metrics.csv").read_bytes()
    verdict(8, "identical seeds give byte-identical metrics CSVs", a == b, f"{len(a)} bytes")
