"""From a long-format CSV to stratified tables, through the command line.

Writes a synthetic panel with a hospital-level bed size column, runs
``omniest estimate`` per stratum and merges the Omni and GEE tables with
``omniest report``.  Output goes to ./demo_output.
"""
from pathlib import Path

import numpy as np

from omniest.cli import main
from omniest.data import to_frame
from omniest.simulation import generate_replicate, table1_config

here = Path(__file__).parent
out = Path("demo_output")
out.mkdir(exist_ok=True)

ds, truth = generate_replicate(table1_config(n_hospitals=60), index=2)
frame = to_frame(ds)

# bed size is a hospital attribute: larger hospitals get a bigger label
size = dict(zip(ds.hospital_ids, ds.cluster_sizes))
beds = frame.hospital_id.map(size)
frame["bed_size"] = np.where(beds < 30, "small", np.where(beds < 80, "medium", "large"))
frame.to_csv(out / "panel.csv", index=False, float_format="%.17g")
print(frame.groupby("bed_size").hospital_id.nunique().rename("hospitals").to_string(), "\n")

code = main(["estimate", "--data", str(out / "panel.csv"),
             "--config", str(here / "configs" / "analysis.json"), "--out", str(out / "fits")])
print("estimate exit code", code)

for label in ("small", "medium", "large"):
    print(f"\n== bed size {label} ==")
    main(["report", "--out", str(out / f"merged_{label}.csv"),
          str(out / "fits" / f"coefficients_OMNI_{label}.csv"),
          str(out / "fits" / f"coefficients_GEE_{label}.csv")])
