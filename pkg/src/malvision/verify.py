"""Full-model gradient verification on a tiny configuration.

Builds the complete network in float64, runs one combined forward (unit
regression + depth + segmentation + classification so every parameter
receives signal), and checks the tape gradients against central
differences.

The query/key projections are scaled down so the recurrence normalizer
sits firmly on its lower bound everywhere: finite differences cannot
verify gradients at the max() switch point itself, so the probe must stay
on one branch.  The opposite branch is covered by the dedicated
recurrence-core checks in the test suite.
"""

from __future__ import annotations

import numpy as np

from .gradcheck import GradCheckReport, grad_check
from .masking import cluster_block_mask, ratio_selection
from .model import ModelConfig, classify_head, depth_head, init_model, seg_head
from .objectives import cross_entropy, depth_loss, seg_loss
from .tensor import Tensor, add, mul

QK_SCALE = 0.05


def tiny_config() -> ModelConfig:
    """Smallest configuration exercising every component."""
    return ModelConfig(image_size=8, channels=1, patch=2, dim=16, heads=2,
                       enc_blocks=2, dec_blocks=2, dec_width=16,
                       cluster_h=2, cluster_w=2, classes=2, seg_classes=2)


def full_model_gradcheck(seed: int = 0, eps: float = 1e-5,
                         tol: float = 1e-4) -> GradCheckReport:
    from .train import _ar_forward, _depth_token_targets, _seg_token_targets

    cfg = tiny_config()
    rng = np.random.default_rng(seed)
    model = init_model(cfg, rng, dtype=np.float64)
    for blk in model.encoder.blocks:
        blk.wq.data = blk.wq.data * QK_SCALE
        blk.wk.data = blk.wk.data * QK_SCALE

    plan = model.plan
    image = rng.uniform(0.0, 1.0, size=(1, cfg.channels, cfg.image_size,
                                        cfg.image_size))
    from .train import patchify_batch

    patches = patchify_batch(image, cfg.patch)
    selection = ratio_selection(plan, 0.5, "cluster", rng_seed=1)
    mask = cluster_block_mask(plan, dtype=np.float64)
    depth_map = rng.uniform(0.2, 1.0, size=(1, cfg.image_size, cfg.image_size))
    seg_map = rng.integers(0, cfg.seg_classes,
                           size=(1, cfg.image_size, cfg.image_size))
    label = np.asarray([1])
    depth_tokens = _depth_token_targets(model, depth_map)
    seg_tokens = _seg_token_targets(model, seg_map)

    def f() -> Tensor:
        ar, hidden = _ar_forward(model, patches, mask, selection,
                                 mode="masked", target_norm="patch")
        d = depth_loss(depth_head(hidden, model.heads), depth_tokens)
        s = seg_loss(seg_head(hidden, model.heads, cfg.seg_classes), seg_tokens)
        from .model import embed_tokens, encoder_forward

        enc_out = encoder_forward(embed_tokens(model, patches), model.encoder)
        ce = cross_entropy(classify_head(enc_out, model.heads), label)
        return add(add(ar, mul(d, 0.5)), add(mul(s, 0.5), ce))

    return grad_check(f, model.named_parameters(), eps=eps, tol=tol)
