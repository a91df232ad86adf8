import json, sys, time
import numpy as np
sys.path.insert(0, "tests")
sys.path.insert(0, ".")
from dnas.space import build_space, load_space_config
from dnas.trainer import SearchHyperParams, run_search
from dnas.supernet import arch_entropy
from dnas.data import synth_dataset
from _helpers import synthetic_lut

per_class = int(sys.argv[1])
out = sys.argv[2]
space = build_space(load_space_config("desk_32"))
lut = synthetic_lut(space)
ds = synth_dataset(classes=10, per_class=per_class, resolution=32, seed=0)
hyper = SearchHyperParams()  # desk defaults: 30 epochs, postpone 4, batch 64
t0 = time.perf_counter()
lines = []
state = run_search(space, lut, hyper, ds, seed=11, on_metrics=lambda m: lines.append(m))
wall = time.perf_counter() - t0
H0 = lines[0]["entropy_nats"]
Hend = arch_entropy(state.theta)
with open(out, "w") as fh:
    json.dump({"per_class": per_class, "wall_s": wall, "H0": H0, "Hend": Hend,
               "ratio": Hend / H0, "history": lines}, fh, indent=1)
print(f"done: wall={wall:.0f}s H0={H0:.2f} Hend={Hend:.2f} ratio={Hend/H0:.3f}")
