from .config import ModelConfig, TrainConfig
from .metrics import EvalResult, eval_ap50, iou
from .model import Detection, forward_backward, init_model, predict_scene
from .train import evaluate, load_checkpoint, save_checkpoint, sgd_step, train_loop

__all__ = [
    "Detection",
    "EvalResult",
    "ModelConfig",
    "TrainConfig",
    "eval_ap50",
    "evaluate",
    "forward_backward",
    "init_model",
    "iou",
    "load_checkpoint",
    "predict_scene",
    "save_checkpoint",
    "sgd_step",
    "train_loop",
]
