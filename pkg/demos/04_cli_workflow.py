"""The full command-line workflow, driven in-process.

Equivalent shell session:

    modquant gen       --seed 3 --out run
    modquant select    --activations run/activations.spqt --out run
    modquant calibrate --activations run/activations.spqt \\
                       --weights run/weights.spqt --out run
    modquant eval      --activations run/activations.spqt \\
                       --layer-dir run/layer --out run
    modquant stability --activations run/activations.spqt --out run

Every command is deterministic: re-running with the same inputs produces
byte-identical output files.

Run with:  python3 demos/04_cli_workflow.py
"""

import pathlib
import tempfile

from modquant.cli import main

with tempfile.TemporaryDirectory() as tmp:
    run = pathlib.Path(tmp) / "run"
    acts = str(run / "activations.spqt")
    weights = str(run / "weights.spqt")

    for argv in (
        ["gen", "--seed", "3", "--out", str(run)],
        ["select", "--activations", acts, "--out", str(run)],
        ["calibrate", "--activations", acts, "--weights", weights,
         "--steps", "50", "--out", str(run)],
        ["eval", "--activations", acts, "--layer-dir", str(run / "layer"),
         "--out", str(run)],
        ["stability", "--activations", acts, "--out", str(run)],
    ):
        print(f"\n$ modquant {' '.join(argv)}")
        rc = main(argv)
        assert rc == 0, f"command failed with exit code {rc}"

    print("\noutput files:")
    for path in sorted(run.rglob("*")):
        if path.is_file():
            print(f"  {path.relative_to(run)}  ({path.stat().st_size} bytes)")
