"""Multi-view image-report contrastive pre-training with symmetric local alignment.

Small enough to train on one CPU core; every loss term, sampler and metric is
exposed as a plain function so it can be checked against an independent oracle.
"""

__version__ = "0.1.0"

from .captions import Caption, CaptionBuilder, CaptionStyle, CaptionTemplate, build_caption
from .data_model import ImageRecord, SplitSpec, Study, group_studies, parse_records, split_patients
from .encoders import DualEncoder, EncoderConfig
from .errors import MamaError
from .estimators import ContrastivePretrainer, LinearProbe, ZeroShotClassifier
from .evaluation import EvalReport, ZeroShotSpec, full_finetune, linear_probe, zero_shot_classify
from .losses import LossBreakdown, LossConfig, Temperatures, total_loss
from .multiview import SamplingStrategy
from .synthetic import SynthConfig, generate_corpus, generate_dataset
from .trainer import PretrainConfig, TrainConfig, TrainState, load_checkpoint, run_training, save_checkpoint

__all__ = [
    "Caption", "CaptionBuilder", "CaptionStyle", "CaptionTemplate", "build_caption",
    "ImageRecord", "SplitSpec", "Study", "group_studies", "parse_records", "split_patients",
    "DualEncoder", "EncoderConfig", "MamaError",
    "ContrastivePretrainer", "LinearProbe", "ZeroShotClassifier",
    "EvalReport", "ZeroShotSpec", "full_finetune", "linear_probe", "zero_shot_classify",
    "LossBreakdown", "LossConfig", "Temperatures", "total_loss",
    "SamplingStrategy", "SynthConfig", "generate_corpus", "generate_dataset",
    "PretrainConfig", "TrainConfig", "TrainState", "load_checkpoint", "run_training", "save_checkpoint",
]
