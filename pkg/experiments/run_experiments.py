# experiments/run_experiments.py

import os
import sys
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
import logging

import numpy as np
import pandas as pd

from src.regression import fit as cellmr_fit
from src.sensitivity import bivariate_base_sample, cellmr_slope_functional, if_surface, ols_slope_functional, SURROGATE_LABEL
from src.simulation import ScenarioConfig, run_coverage, run_ii_bias, run_mse
from src.utils import content_hash, load_config, write_json

logger = logging.getLogger("experiments")


def scenario(base, **overrides):
    cfg = dict(base)
    cfg.update(overrides)
    return ScenarioConfig.from_dict(cfg)


def main():
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    config_path = "experiments/configs/config.json"
    config = load_config(config_path)
    seed = config["seed"]
    threads = config["threads"]
    out = config["output_dir"]
    os.makedirs(out, exist_ok=True)

    # === Step 1: Bivariate recovery ===
    rec_cfg = config["recovery"]
    rows = []
    for s in range(rec_cfg["seeds"]):
        data = bivariate_base_sample(rec_cfg["n"], seed + s)
        model = cellmr_fit(data, 1, rec_cfg["k"], rec_cfg["lambda"])
        rows.append({"seed": seed + s, "slope": model.B[0, 0], "error_var": model.sigma_eps[0, 0]})
    recovery = pd.DataFrame(rows)
    recovery["pass"] = (np.abs(recovery["slope"] - 0.9) <= 0.05) & (np.abs(recovery["error_var"] - 0.19) <= 0.04)
    recovery.to_csv(os.path.join(out, "recovery.csv"), index=False)
    print('Bivariate recovery: {} of {} seeds within tolerance'.format(int(recovery["pass"].sum()), len(recovery)))

    # === Step 2: Prediction MSE under contamination and missing cells ===
    mse_cfg = config["mse"]
    tables = []
    for na in mse_cfg["na_fraction"]:
        clean = run_mse(scenario(mse_cfg["scenario"], kind="clean", gamma=0.0, na_fraction=na, seed=seed),
                        threads=threads, progress=True)
        tables.append(clean.assign(na_fraction=na))
        for kind in mse_cfg["kinds"]:
            for gamma in mse_cfg["gammas"]:
                cfg = scenario(mse_cfg["scenario"], kind=kind, gamma=float(gamma), na_fraction=na, seed=seed)
                tables.append(run_mse(cfg, threads=threads, progress=True).assign(na_fraction=na))
    mse_table = pd.concat(tables, ignore_index=True)
    mse_table.to_csv(os.path.join(out, "simulate_mse.csv"), index=False)
    print(mse_table[mse_table["metric"] == "mse_median"].to_string(index=False))

    # === Step 3: Indirect-inference bias reduction ===
    ii_cfg = config["ii_bias"]
    ii_table = run_ii_bias(ii_cfg["d"], ii_cfg["n"], ii_cfg["H"], ii_cfg["reps"], ii_cfg["k"], seed,
                           threads=threads, progress=True)
    ii_table.to_csv(os.path.join(out, "ii_bias.csv"), index=False)
    print('II improved the auxiliary estimate in {:.0%} of replications'.format(ii_table["improved"].mean()))

    # === Step 4: Bootstrap coverage ===
    cov_cfg = config["coverage"]
    tables = []
    for kind in cov_cfg["kinds"]:
        gamma = 0.0 if kind == "clean" else float(cov_cfg["gamma"])
        cfg = scenario(cov_cfg["scenario"], kind=kind, gamma=gamma, seed=seed)
        tables.append(run_coverage(cfg, level=cov_cfg["level"], B=cov_cfg["B"], H=cov_cfg["H"],
                                   threads=threads, progress=True))
    coverage = pd.concat(tables, ignore_index=True)
    coverage.to_csv(os.path.join(out, "simulate_coverage.csv"), index=False)
    print(coverage[coverage["metric"] == "coverage"].to_string(index=False))

    # === Step 5: Empirical influence surfaces ===
    inf_cfg = config["influence"]
    base = bivariate_base_sample(inf_cfg["n"], seed)
    grid = np.linspace(-inf_cfg["grid_limit"], inf_cfg["grid_limit"], inf_cfg["grid_points"])
    frames = []
    for method, functional in (("cellmr", cellmr_slope_functional(inf_cfg["k"], inf_cfg["lambda"])),
                               ("ols", ols_slope_functional(inf_cfg["lambda"]))):
        for kind in ("casewise", "cellwise"):
            surface = if_surface(base, functional, kind, grid, inf_cfg["epsilon"], seed, inf_cfg["draws"],
                                 threads=threads, progress=True)
            frames.append(surface.assign(method=method, kind=kind, label=SURROGATE_LABEL))
    influence = pd.concat(frames, ignore_index=True)
    influence.to_csv(os.path.join(out, "influence.csv"), index=False)
    peak = influence.groupby(["method", "kind"])["if_value"].apply(lambda v: np.abs(v).max())
    print(peak.to_string())

    write_json({"config": config, "config_hash": content_hash(config_path)}, os.path.join(out, "manifest.json"))


if __name__ == "__main__":
    main()
