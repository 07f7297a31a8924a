"""
The command-line workflow
=========================

synth -> train -> eval -> report, all under one scratch directory. The
equivalent shell session is

    mmaffect synth --set paths.out_dir=runs --set paths.run_name=data
    mmaffect train --set paths.eeg=runs/data/eeg.csv --set paths.eye=runs/data/eye.csv ...
"""
import sys
import tempfile
from pathlib import Path

from mmaffect import cli

out = Path(tempfile.mkdtemp())
quick = ["rbm.epochs=30", "finetune.epochs=30", "synth.rows_per_class=60"]


def mmaffect(*args, sets=()):
    argv = list(args)
    for s in quick + [f"paths.out_dir={out}"] + list(sets):
        argv += ["--set", s]
    print("$ mmaffect", " ".join(args), *sets)
    code = cli.main(argv)
    if code:
        sys.exit(code)


mmaffect("synth", sets=["paths.run_name=data"])
data = [f"paths.eeg={out}/data/eeg.csv", f"paths.eye={out}/data/eye.csv"]
mmaffect("train", sets=data + ["run.task=facilitation", "paths.run_name=train"])
mmaffect("eval", sets=[f"paths.models={out}/train", "paths.run_name=eval"])

# eval re-derives the held-out rows from the manifest, so it matches validation.
same = (out / "eval/report.json").read_text() == (out / "train/validation.json").read_text()
print("eval report identical to train-time validation:", same)
mmaffect("report", sets=[f"paths.report={out}/eval", "report.format=csv"])
