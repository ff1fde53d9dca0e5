"""Multi-task offline RL: a decision transformer whose tasks each train inside
their own binary parameter mask, revised periodically to avoid gradient conflict."""

from .config import RunConfigFile, TrainConfig, load_run_config
from .envs import EvalReport, PointTaskSpec, gen_dataset, rollout
from .errors import (CheckpointError, ConfigError, DimensionError, EmptyBatchError,
                     HarmaskError, NumericError, SelectionError)
from .harmony import avg_harmony_metric, harmony_score
from .mask_update import arg_btm_k, arg_top_k, mask_update, unseen_mask
from .model import ModelConfig, build_layout, forward, init_params, loss_and_grad
from .params import LayerLayout, MaskSet, erk_init
from .trainer import Trainer, alpha_schedule, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
