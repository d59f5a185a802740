from .model import (
    VOCAB, ModelConfig, Params, denoise, diffusion_loss, encode_instruction, init_params, mhca, predict_noise,
    tokenize, vae_decode, vae_encode,
)
from .network import SFDNet
from .sample import initial_frame, sample_flows
from .schedule import NoiseSchedule, diffuse_forward, posterior_mean, reverse_step
from .train import FlowSample, TrainConfig, TrainingDiverged, samples_from_episodes, stage2_loss, train

__all__ = [
    "VOCAB", "ModelConfig", "Params", "denoise", "diffusion_loss", "encode_instruction", "init_params", "mhca",
    "predict_noise", "tokenize", "vae_decode", "vae_encode", "SFDNet", "initial_frame", "sample_flows",
    "NoiseSchedule", "diffuse_forward", "posterior_mean", "reverse_step", "FlowSample", "TrainConfig",
    "TrainingDiverged", "samples_from_episodes", "stage2_loss", "train",
]
