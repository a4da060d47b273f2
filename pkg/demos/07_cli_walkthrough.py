"""
Command-line walkthrough
========================

Synthesise a dataset, precompute flow, train two folds with the flow
modality, evaluate them, and print the resulting tables. Equivalent shell:

    flowsteer synth --out data --sequences 6 --frames 20
    flowsteer extract-flow --in data --out flow
    flowsteer train --data data --flow flow --modality flow --folds 3 --steps 20 --out runs
    flowsteer eval --data data --flow flow --runs runs --out eval
"""

import tempfile
from pathlib import Path

from flowsteer.cli import main

root = Path(tempfile.mkdtemp(prefix="cli_demo_"))
data, flow, runs, ev = (root / n for n in ("data", "flow", "runs", "eval"))


def run(*argv):
    code = main([str(a) for a in argv])
    print("exit", code, ":", " ".join(str(a) for a in argv[:1]))
    return code


run("synth", "--out", data, "--sequences", 6, "--frames", 20, "--seed", 4)
run("extract-flow", "--in", data, "--out", flow)
run("train", "--data", data, "--flow", flow, "--modality", "flow", "--folds", 3, "--steps", 20,
    "--batch", 4, "--seq-len", 8, "--out", runs)
run("eval", "--data", data, "--flow", flow, "--runs", runs, "--out", ev)

print((ev / "eval.csv").read_text())
print((ev / "eval_folds.csv").read_text())
print("run directory:", sorted(p.name for p in runs.iterdir()))
