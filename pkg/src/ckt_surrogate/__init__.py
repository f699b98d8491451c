"""Sequence-model circuit surrogates and surrogate-guided transistor sizing."""
__version__ = "0.1.0"

from .circuits import (  # noqa: E402
    TECHNOLOGIES, TOPOLOGIES, Constraint, FoMSpec, constraints_met, evaluate_oracle, fom,
    get_technology, get_topology,
)
from .data import Dataset, NormStats, build_dataset, sample_designs, split  # noqa: E402
from .model import (  # noqa: E402
    FCEnsembleConfig, InsightConfig, InsightModel, SequenceLayout, SurrogateCheckpoint,
    embed_sequence, fc_ensemble_predict, forward_teacher_forced, load_checkpoint, rollout,
    rollout_with_uncertainty, save_checkpoint,
)
from .train import (  # noqa: E402
    EvalReport, TrainRunConfig, evaluate, order_metrics, train_fc_ensemble, train_insight,
    transfer_finetune,
)
from .sizing import (  # noqa: E402
    InsightMConfig, OracleCounter, PPOConfig, SizingResult, SizingTask, default_task,
    insight_m_run, pure_ppo_baseline,
)

__all__ = [
    "TECHNOLOGIES",
    "TOPOLOGIES",
    "Constraint",
    "FoMSpec",
    "constraints_met",
    "evaluate_oracle",
    "fom",
    "get_technology",
    "get_topology",
    "Dataset",
    "NormStats",
    "build_dataset",
    "sample_designs",
    "split",
    "FCEnsembleConfig",
    "InsightConfig",
    "InsightModel",
    "SequenceLayout",
    "SurrogateCheckpoint",
    "embed_sequence",
    "fc_ensemble_predict",
    "forward_teacher_forced",
    "load_checkpoint",
    "rollout",
    "rollout_with_uncertainty",
    "save_checkpoint",
    "EvalReport",
    "TrainRunConfig",
    "evaluate",
    "order_metrics",
    "train_fc_ensemble",
    "train_insight",
    "transfer_finetune",
    "InsightMConfig",
    "OracleCounter",
    "PPOConfig",
    "SizingResult",
    "SizingTask",
    "default_task",
    "insight_m_run",
    "pure_ppo_baseline",
]
