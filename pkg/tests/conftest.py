from dualplan.config import ExperimentConfig, small_grid


def tiny_config(dtype="float64", **over):
    """Small grid and model so the full pipeline runs in seconds."""
    cfg = ExperimentConfig().with_overrides(**{
        "data.n_train": 12, "data.n_val": 4, "data.n_test": 4,
        "bank.k": 4, "bank.k_l": 3,
        "model.d": 16, "model.heads": 2, "model.layers": 1, "model.ffn": 32,
        "model.n_collect": 4, "model.n_det": 6, "model.n_lane": 4, "model.memory_frames": 2,
        "train.batch": 8, "train.dtype": dtype,
        "train.ego_mlp.epochs": 3, "train.compressor.epochs": 1, "train.adapter.epochs": 1,
        "train.e2e_head.epochs": 1, "train.joint.epochs": 1, "train.synergy.epochs": 1,
        "train.baseline.epochs": 1,
        **over,
    })
    return small_grid(cfg, height=8, width=8, supersample=2)
