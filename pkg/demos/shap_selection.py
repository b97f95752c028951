"""Score features on a synthetic matrix and show which ones the xi threshold keeps.

    python demos/shap_selection.py [xi]
"""

import sys

from aptkit.data import SynthConfig, generate_synthetic
from aptkit.nn import TrainConfig
from aptkit.xai import ShapConfig, score_features, select_features


def main(xi=0.95):
    m, _ = generate_synthetic(SynthConfig(n_benign=400, n_anomalies=4, d=16, n_nuisance=4, seed=1))
    table = score_features(m, 0.5, 0.5, 0.5, TrainConfig(learning_rate=3e-3, epochs=50),
                           ShapConfig(instances="top_error"))
    sel = select_features(table, xi)
    print(f"{'feature':10s} {'RE':>7s} {'H':>7s} {'SHAP':>9s} {'S':>7s}  kept")
    for j, name in enumerate(table.names):
        kept = "*" if j in sel.selected else ""
        print(f"{name:10s} {table.re[j]:7.3f} {table.ent[j]:7.3f} {table.shap[j]:9.5f} {table.s[j]:7.3f}  {kept}")
    print(f"xi={xi}: K={sel.K}")


if __name__ == "__main__":
    main(float(sys.argv[1]) if len(sys.argv) > 1 else 0.95)
