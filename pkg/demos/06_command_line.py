# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: light
#       format_version: '1.5'
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# # The command-line workflow
#
# Five verbs cover the whole experiment. Each one writes its resolved
# configuration as `config.ini` next to its outputs. Settings come from
# an optional INI file plus `--set section.key=value` overrides.

# +
import subprocess
import sys
import tempfile
from pathlib import Path

work = Path(tempfile.mkdtemp())


def edmsr(*args):
    cmd = [sys.executable, "-m", "edmsr.cli", *args]
    proc = subprocess.run(cmd, capture_output=True, text=True, cwd=work)
    print("$ edmsr", " ".join(args), "\n ->", (proc.stdout or proc.stderr).strip())
    return proc.returncode
# -

# Short settings keep this quick: tiny batches, a handful of updates, and
# two sampler steps for the 3D model.

fast = ["--set", "train.batch_size=2", "--set", "train.updates_per_epoch=10", "--set", "sampler.steps_3d=2"]

edmsr("synth", "--out", "raw", "--n-subjects", "4", "--dims", "16,32,32")
edmsr("preprocess", "--in", "raw", "--out", "store", "--scale", "2")
edmsr(*fast, "train", "--data", "store", "--out", "model3d", "--arch", "3d")
edmsr(*fast, "infer", "--checkpoint", "model3d/checkpoint.ckpt", "--arch", "3d", "--data", "store", "--out", "pred3d")
edmsr("eval", "--data", "store", "--out", "eval", "--pred", "edm3d=pred3d")

print(sorted(p.name for p in (work / "eval").iterdir()))
print((work / "eval" / "report.csv").read_text().splitlines()[:3])

# Declared failures exit with status 2 and a JSON message on stderr, for
# example asking a 3D run to load the wrong kind of checkpoint.

edmsr("infer", "--checkpoint", "model3d/checkpoint.ckpt", "--arch", "2.5d", "--data", "store", "--out", "x")
