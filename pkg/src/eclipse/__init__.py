"""Model surgery for white-box watermark obfuscation, with simulated schemes and verifiers."""

from .container import load_model, model_from_bytes, model_to_bytes, save_model
from .detect import DetectionResult, FrequencyReport, detect_watermarked_layers
from .model import (
    Activation,
    ConvLayer,
    EquivalenceReport,
    LinearLayer,
    ModelGraph,
    PoolLayer,
    equivalence_report,
    forward_model,
    infer_shapes,
)
from .obf_conv import FrameSpec, NoiseConfig, advanced_obfuscate_conv, base_obfuscate_conv
from .obf_linear import InvertiblePair, advanced_obfuscate_linear, base_obfuscate_linear, gen_invertible_pair
from .pipeline import Mode, ObfuscationPlan, attack_report, run
from .watermark import (
    Scheme,
    SecretKey,
    Status,
    VerificationOutcome,
    active_verify,
    embed,
    extract,
    make_key,
    similarity,
    verify,
)

__version__ = "0.1.0"
