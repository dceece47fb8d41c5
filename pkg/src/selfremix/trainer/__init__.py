from .config import InvalidConfig, TrainConfig, config_from_dict, load_config
from .loop import TrainReport, Trainer, evaluate_model, run_training
from .schedule import WarmupDecaySchedule
from .steps import (
    StepResult,
    step_mixit,
    step_rccl,
    step_remixit,
    step_remixit_plus_self_remixing,
    step_self_remixing_batch,
    step_self_remixing_pair,
    step_semi_supervised,
    step_supervised_pit,
)
