"""Which pyramid level wins the max fusion, grouped by each proposal's assigned level."""

from __future__ import annotations

import numpy as np

from ..pyramid import LEVELS
from ..roi import BOX_POOL, SourceRatioStats, source_ratio_stats
from ..tensor import ConfigurationError, Tensor, no_grad
from .data import SyntheticScene, make_proposals
from .train import EVAL_SEED_OFFSET


def pooling_source_stats(model, scenes: list[SyntheticScene], seed: int = 0) -> list[SourceRatioStats]:
    """Tally, per assigned-level group, the level that supplies each fused box-head feature.

    Only groups that occur in the proposals are reported.
    """
    cfg = model.cfg
    if not cfg.afp:
        raise ConfigurationError("source statistics need adaptive feature pooling (afp = true)")
    model.eval()
    totals: dict[int, SourceRatioStats] = {}
    for i, scene in enumerate(scenes):
        rois = make_proposals(
            scene, seed * 7_919 + EVAL_SEED_OFFSET + i, cfg.proposal_jitter, cfg.negatives_per_gt,
            cfg.proposals_per_gt, cfg.level_reference,
        )
        boxes = np.array([r.as_array() for r in rois])
        levels = np.array([r.assigned_level for r in rois])
        with no_grad():
            feats = model.features(Tensor(scene.image[None]))
            grids = model.pool(feats, boxes, np.zeros(len(rois), dtype=np.int64), levels, BOX_POOL)
            per_level = [g.data for g in model.box_head.first_layer_levels(grids)]
        for k in LEVELS:
            sel = levels == k
            if not sel.any():
                continue
            s = source_ratio_stats([g[sel] for g in per_level], k)
            totals[k] = totals[k] + s if k in totals else s
    return [totals[k] for k in sorted(totals)]
