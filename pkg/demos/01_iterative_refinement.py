"""Watch the estimator refine its flow over recurrent steps.

An untrained model starts at zero flow (the prediction heads are
zero-initialized), so we train a small one for a couple hundred steps and
then print the endpoint error after each recurrent iteration on a held-out
pair. The point of the architecture is visible in the numbers: every warp /
update round moves the estimate closer.

Run:  python3 demos/01_iterative_refinement.py        (~10 min on 1 CPU core)
"""

import tempfile

from warpflow import autodiff as ad
from warpflow.flow_ops import FlowField
from warpflow.metrics import endpoint_error
from warpflow.model import ModelConfig
from warpflow.synth import gen_batch
from warpflow.train import TrainConfig, train

cfg = TrainConfig(
    model=ModelConfig(T=5, feature_dim=16, embed_dim=48, n_blocks=2,
                      n_heads=4, refine_dim=16, dtype="float32"),
    steps=250, batch_size=4, max_disp=4.0, image_size=(48, 48),
    val_every=50, val_size=4, seed=0,
)

with tempfile.TemporaryDirectory() as out:
    model = train(cfg, out, log=lambda line: None)

f1, f2, gt, valid = gen_batch(seed=1234, n=4, max_disp=4.0, size=(48, 48))
with ad.no_grad():
    result = model.forward(ad.Tensor(f1), ad.Tensor(f2))

gt_field = FlowField(ad.Tensor(gt))
print("recurrent step -> validation EPE (px)")
for t, flow in enumerate(result.flows):
    epe = endpoint_error(flow, gt_field, valid)
    print(f"  t={t}: {epe:6.3f}")
