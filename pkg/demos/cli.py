# %% [markdown]
# # Command-line runs
#
# Every experiment is driven by a YAML (or JSON) config. Omitted keys take
# their defaults, which `qmfg show-defaults` prints. A run writes CSV files,
# binary field dumps and a JSON manifest.

# %%
import json
import tempfile
from pathlib import Path

import yaml

from qmfg.cli import main
from qmfg.io import read_csv

work = Path(tempfile.mkdtemp())
cfg = work / "filtering.yaml"
cfg.write_text(yaml.safe_dump({"experiment": "filtering", "spec": {"T": 0.05},
                               "numerics": {"dt": 0.001, "M": 4, "sampleEvery": 10}}))

# %%
print("validate exit code:", main(["validate", "--config", str(cfg)]))
print("run exit code:", main(["run", "--config", str(cfg), "--seed", "5", "--out", str(work / "out")]))

# %%
header, rows = read_csv(work / "out" / "filtering_mean.csv")
print(header)
print(rows[-1])
print(json.dumps(json.loads((work / "out" / "manifest.json").read_text())["results"], indent=1))
