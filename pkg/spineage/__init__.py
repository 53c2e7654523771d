from .model import SpineAgeNet, gradcam, load_checkpoint, save_checkpoint, train
from .pipeline import Pipeline, ablation
from .config import PipelineConfig, load_config

__version__ = "0.1.0"
