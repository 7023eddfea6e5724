"""Two-stream (RGB + optical flow) region-proposal detector for surgical tools, in numpy."""
from .config import RunConfig, load_config, load_config_file, preset
from .data import Annotation, SyntheticSceneConfig, VOCObject, parse_voc_xml, write_voc_xml
from .detector import Detection, detect
from .evaluate import evaluate
from .experiment import cross_validate, run_experiment
from .model import ModelConfig, TwoStreamDetector
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Annotation", "Detection", "ModelConfig", "RunConfig", "SyntheticSceneConfig", "TrainConfig",
    "TwoStreamDetector", "VOCObject", "cross_validate", "detect", "evaluate", "load_checkpoint",
    "load_config", "load_config_file", "parse_voc_xml", "preset", "run_experiment", "save_checkpoint",
    "train", "write_voc_xml",
]
