from .checks import ProbeReport, convexity_probe, gradient_check, numeric_grad
from .mixers import LinearMixer, MixerVariant, TwoLayerMixer, VDNMixer, make_mixer, mix
from .nets import MLP, ApproxSpec
from .optim import Adam, step

__all__ = [
    "Adam", "ApproxSpec", "LinearMixer", "MLP", "MixerVariant", "ProbeReport",
    "TwoLayerMixer", "VDNMixer", "convexity_probe", "gradient_check", "make_mixer",
    "mix", "numeric_grad", "step",
]
