"""Regenerate the bundled example series ``src/acedlnm/data/example.csv``.

Type-i lag weights and response curve, a smooth time trend and negative
binomial counts with theta = 8, on 2,000 consecutive days.
"""

import csv
import datetime as dt
from pathlib import Path

import numpy as np

from acedlnm.nbinom import sample_nb
from acedlnm.simulate import MAX_LAG, THETA, ScenarioSpec, scenario_truth

N_ROWS = 2000
SEED = 20250601
START = dt.date(2010, 1, 1)


def main():
    burn_in = int(np.ceil(MAX_LAG))
    truth = scenario_truth(ScenarioSpec(n=N_ROWS - burn_in, n_rep=1))
    log_mu = np.r_[np.full(burn_in, truth.log_mu[0]), truth.log_mu]
    y = sample_nb(np.random.default_rng(SEED), np.exp(log_mu), THETA)
    out = Path(__file__).resolve().parents[1] / "src" / "acedlnm" / "data" / "example.csv"
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "count", "exposure", "time"])
        for i in range(N_ROWS):
            w.writerow([(START + dt.timedelta(days=i)).isoformat(), int(y[i]), f"{truth.x[i]:.6f}", i + 1])
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
