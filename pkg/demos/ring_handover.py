"""Full assistance run: pick, gesture teleoperation, Ring, cooperative alignment and release.

Reuses a checkpoint from train_and_evaluate.py when given, otherwise trains one first (about 100 s).

    python3 demos/ring_handover.py --checkpoint /tmp/mpm.bin --out /tmp/ring_run
"""
import argparse

from hoiassist import dataset as ds
from hoiassist import scenario as sc
from hoiassist.mpm import checkpoint
from hoiassist.mpm.training import train_mpm

parser = argparse.ArgumentParser()
parser.add_argument("--checkpoint")
parser.add_argument("--out")
args = parser.parse_args()

if args.checkpoint:
    net, _ = checkpoint.load(args.checkpoint)
else:
    train, val = ds.stratified_split(ds.default_dataset(seed=0), 0.8, seed=0)
    net, _ = train_mpm(train, val)

script = sc.ring_script()
run = sc.run_scenario(script, net)
print(run.report.summary(script.thresholds), end="")

# what the operator saw: each recognized gesture and the command it produced
for g in run.report.latencies:
    print(f"{g.label:<5} shown at {g.onset:6.2f} s, arm reacted at {g.action_time:6.2f} s")

if args.out:
    print(f"traces written to {sc.write_outputs(run, args.out)}")
