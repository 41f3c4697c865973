"""Generate the synthetic gesture set, train the classifier and print a confusion matrix.

    python3 demos/train_and_evaluate.py --epochs 30 --checkpoint /tmp/mpm.bin
"""
import argparse
import time

from hoiassist import dataset as ds
from hoiassist.mpm import checkpoint
from hoiassist.mpm.training import TrainingConfig, confusion_matrix, train_mpm

parser = argparse.ArgumentParser()
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--epochs", type=int, default=100)
parser.add_argument("--checkpoint")
args = parser.parse_args()

data = ds.default_dataset(seed=args.seed)
train, val = ds.stratified_split(data, 0.8, seed=0)
print(f"{len(train)} training and {len(val)} validation windows of shape {data.windows.shape[1:]}")

start = time.perf_counter()
net, trace = train_mpm(train, val, TrainingConfig(epochs=args.epochs, seed=args.seed))
print(f"trained {args.epochs} epochs in {time.perf_counter() - start:.0f} s, "
      f"loss {trace.train_loss[0]:.3f} -> {trace.train_loss[-1]:.3f}")

names = [c.label for c in ds.MotionClass]
print("true \\ predicted  " + "  ".join(f"{n:>5}" for n in names))
for name, row in zip(names, confusion_matrix(net, val)):
    print(f"{name:>16}  " + "  ".join(f"{v:5d}" for v in row))

# a different operator: same recipe, other seed
other = ds.default_dataset(seed=args.seed + 1)
print(f"validation accuracy {trace.final_val_accuracy:.3f}; "
      f"unseen operator {confusion_matrix(net, other).trace() / len(other):.3f}")

if args.checkpoint:
    checkpoint.save(net, args.checkpoint, tuple(names))
    print(f"saved {args.checkpoint}")
