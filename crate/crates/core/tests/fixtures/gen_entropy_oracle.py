"""Writes entropy_oracle.json: random activation counts and their LAPE entropy
computed with 60-digit arithmetic. Rerun with `python3 gen_entropy_oracle.py`."""
import json
import random

from mpmath import mp, mpf, log

mp.dps = 60
rng = random.Random(20240531)
groups = []
for n_langs in (2, 3, 5, 8):
    totals = [rng.randint(50, 5000) for _ in range(n_langs)]
    neurons = []
    for _ in range(250):
        active = [rng.randint(0, t) if rng.random() > 0.15 else 0 for t in totals]
        if sum(active) == 0:
            active[rng.randrange(n_langs)] = 1
        p = [mpf(a) / t for a, t in zip(active, totals)]
        s = sum(p)
        h = -sum((q / s) * log(q / s) for q in p if q > 0)
        neurons.append({"active": active, "entropy": mp.nstr(h, 30)})
    groups.append({"totals": totals, "neurons": neurons})
with open("entropy_oracle.json", "w") as f:
    json.dump({"groups": groups}, f, indent=1)
