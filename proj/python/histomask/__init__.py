"""Python access to the histomask core library."""

from ._core import (
    ConfigError,
    DivergenceError,
    MissingPrerequisite,
    RunConfig,
    build_schedule,
    chain_total_variation,
    check_schedule_invariants,
    config_keys,
    corr_matrix_compare,
    evaluate,
    finetune,
    gen_data,
    generate_dataset,
    log_gene_zeta,
    mse_mae,
    pcc_topk,
    pearson,
    per_gene_pearson,
    pretrain,
    sample,
    schedule_dump,
    ssim_gene_map,
    subsample_schedule,
    wilcoxon_paired,
)

__all__ = [
    "ConfigError",
    "DivergenceError",
    "MissingPrerequisite",
    "RunConfig",
    "build_schedule",
    "chain_total_variation",
    "check_schedule_invariants",
    "config_keys",
    "corr_matrix_compare",
    "evaluate",
    "finetune",
    "gen_data",
    "generate_dataset",
    "log_gene_zeta",
    "mse_mae",
    "pcc_topk",
    "pearson",
    "per_gene_pearson",
    "pretrain",
    "sample",
    "schedule_dump",
    "ssim_gene_map",
    "subsample_schedule",
    "wilcoxon_paired",
]
