"""Overfit four pupil phantoms: 30 epochs x 10 steps, printing the per-epoch log."""

import argparse

from recalnet.model import ModelConfig, build_model
from recalnet.synthdata import PhantomSpec, generate
from recalnet.train import LossConfig, TrainConfig, train

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--variant", default="recal")
parser.add_argument("--seed", type=int, default=7)
parser.add_argument("--clip-mode", default="value", choices=["value", "norm"])
parser.add_argument("--out")
args = parser.parse_args()

data = generate(PhantomSpec(image_size=(64, 64), cls="pupil", seed=args.seed), 4)
model = build_model(ModelConfig(variant=args.variant, width_scale=8, input_size=(64, 64), seed=args.seed))
cfg = TrainConfig(epochs=30, steps_per_epoch=10, batch_size=4, clip_mode=args.clip_mode, seed=args.seed)
result = train(model, data, cfg, LossConfig(), out_dir=args.out)
for row in result.rows:
    print(f"epoch {row['epoch']:>2}  lr {row['lr']:.5f}  loss {row['train_loss']:.4f}  iou {row['val_iou_mean']:.4f}")
