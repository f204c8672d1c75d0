"""Global/local prompt learning for zero-shot anomaly detection on frozen vision-language towers."""

from .config import RunConfig, load_checkpoint, load_config, save_checkpoint
from .backbone import Backbone, build_toy, load_archive, resolve_backbone
from .prompts import PromptBank, compose_sequence, init_bank
from .text import GlocalTextEmbeddings, encode_all, encode_prompt
from .vision import VisualFeatures, encode_image, vv_attention
from .data import DatasetIndex, SampleEntry, index_dataset, load_sample, synth_blobs
from .metrics import EvalReport, aupro, auroc, average_precision
from .engine import evaluate, infer, train

__version__ = "0.1.0"
