import json, sys, time
import numpy as np
sys.path.insert(0, "tests")
sys.path.insert(0, ".")
from dnas.space import build_space, load_space_config
from dnas.latency import LatencyTable
from dnas.trainer import SearchHyperParams, run_search
from dnas.data import synth_dataset

pc, tb, noise, seed, out = int(sys.argv[1]), int(sys.argv[2]), float(sys.argv[3]), int(sys.argv[4]), sys.argv[5]
space = build_space(load_space_config("desk_32"))
lut = LatencyTable.load(".scratch/desk_lut.json")
ds = synth_dataset(classes=10, per_class=pc, resolution=32, seed=0, noise=noise)
hyper = SearchHyperParams(theta_batch_size=tb)
t0 = time.perf_counter()
lines = []
state = run_search(space, lut, hyper, ds, seed=seed, on_metrics=lambda m: lines.append(m))
wall = time.perf_counter() - t0
H0, Hend = lines[0]["entropy_nats"], lines[-1]["entropy_nats"]
json.dump({"pc": pc, "tb": tb, "noise": noise, "wall_s": wall, "H0": H0,
           "Hend": Hend, "ratio": Hend / H0, "history": lines}, open(out, "w"), indent=1)
print(f"pc={pc} tb={tb} noise={noise}: wall={wall:.0f}s ratio={Hend/H0:.3f}")
