"""NumPy inference engine for pixel-focused and aggregated attention, convolutional
GLU and the four-stage hierarchical backbone built from them."""

from .aggregated import aggregated_attention_forward, mhsa_stage4_forward
from .archive import load_weights, save_weights
from .config import VARIANTS, ModelConfig, StageConfig, load_config
from .convglu import conv_glu_flops, conv_glu_forward
from .erf import erf_saliency
from .flops import count_flops, count_params
from .kernels import bench, fused_window_av, fused_window_backward, fused_window_qk
from .model import build_model, forward
from .pfa import pfa_concat_oracle, pfa_forward
from .tensor import ConfigError, DomainError, ShapeError
from .window import build_geometry

__version__ = "0.1.0"
