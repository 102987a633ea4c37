#!/usr/bin/env python3
"""
Check the structure of the synthetic dataset suite.
"""
import os
import sys
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

try:
    import numpy as np
    import polars as pl

    from hetmoe.data import default_downstream, default_suite, generate
    from hetmoe.models.schemas import TaskKind

    rows = []
    for spec in default_suite() + default_downstream():
        for split in ("train", "test"):
            data = generate(spec, split)
            row = {
                "dataset_id": spec.dataset_id,
                "name": spec.name,
                "split": split,
                "task": spec.task_kind.value,
                "n": len(data),
                "d": data.x.shape[1],
                "feature_mean": float(data.x.mean()),
                "feature_std": float(data.x.std()),
            }
            if spec.task_kind == TaskKind.CLASSIFICATION:
                counts = np.bincount(data.y, minlength=spec.n_classes)
                row["classes"] = spec.n_classes
                row["min_class_share"] = float(counts.min() / len(data))
            else:
                row["classes"] = 0
                row["min_class_share"] = None
            rows.append(row)

    table = pl.DataFrame(rows)
    print(f"📏 Shape: {table.shape}")
    with pl.Config(tbl_rows=-1, tbl_cols=-1):
        print(table)

except Exception as e:
    print(f"❌ Error: {e}")
    import traceback
    traceback.print_exc()
    sys.exit(1)
