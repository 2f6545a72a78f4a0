"""Running experiments from a JSON config, as the flowproc command does."""
# %%
import json
import pathlib
import tempfile

from flowproc.cli import main

work = pathlib.Path(tempfile.mkdtemp())
cfg = work / "particles.json"
cfg.write_text(json.dumps({"numerics": {"h": 0.01, "dt": 1e-3, "times": [0.5, 1.0]},
                           "functionals": [{"kind": "one"}, {"kind": "moment", "power": 2}]}))

# %% exit code 0: every check passed; 2: a statistical check failed; 1: bad config
code = main(["particles", "--config", str(cfg), "--seed", "3", "--replicates", "200", "--out", str(work / "out")])
print("exit code", code)
summary = json.loads((work / "out" / "particles_summary.json").read_text())
for chk in summary["checks"]:
    print(chk)
print((work / "out" / "particles.csv").read_text().splitlines()[0])
