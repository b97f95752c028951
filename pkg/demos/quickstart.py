"""Walk one synthetic source/target pair through the transfer pipeline and rank target processes.

    python demos/quickstart.py
"""

import numpy as np

from aptkit.detect import rank_processes
from aptkit.eval import ranking_metrics
from aptkit.eval.protocols import ProtocolConfig, run_p3_pipeline, synthetic_pair
from aptkit.nn import reconstruction_errors, train_autoencoder


def main():
    source, target = synthetic_pair(seed=0, n=500, d=20, n_nuisance=4)
    print(f"source {source.n}x{source.d}, target {target.n}x{target.d}, "
          f"{int(target.labels.sum())} planted anomalies in the target")

    # baseline: AAE trained on the source, applied to the target as is
    cfg = ProtocolConfig().seeded(0)
    base, _ = train_autoencoder(source, "AAE", cfg=cfg.train)
    direct = reconstruction_errors(base, target)

    p = run_p3_pipeline(source, target, cfg)
    print(f"kept {p['selection'].K} of {source.d} features: "
          + ", ".join(source.col_names[j] for j in p["columns"]))
    transfer = reconstruction_errors(p["model"], p["target_sel"])

    for name, s in (("source model, raw target", direct), ("after transfer", transfer)):
        m = ranking_metrics(s, target.labels)
        print(f"{name:26s} nDCG={m.ndcg:.3f} AUC={m.auc:.3f}")

    sim = p["similarity"]
    print(f"cross-domain cosine: positive {sim['cross/positive']['mean']:.3f}, "
          f"negative {sim['cross/negative']['mean']:.3f}")

    label = dict(zip(target.row_ids, target.labels))
    print("top 5 target processes:")
    for rid, score, rank in rank_processes(transfer, target.row_ids, top_n=5):
        print(f"  {rank}. {rid} score={score:.4f} anomaly={int(label[rid])}")
    return np.asarray(transfer)


if __name__ == "__main__":
    main()
