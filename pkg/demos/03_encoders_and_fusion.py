"""
Encoders and fusion
===================

The same batch of RGB frames plus flow, pushed through early fusion (extra
input channels), the VAE encoder, and the two-stream hybrid encoder.
"""

import numpy as np

from flowsteer.data import ChannelStats, SynthConfig, build_windows, cropped_sequence, ensure_flow
from flowsteer.model import ModelConfig, SteeringModel, make_batch

seq = cropped_sequence(SynthConfig(seed=1, sequences=1, frames=6), 0)
ensure_flow(seq)
windows = build_windows(seq, length=4, stride=2)
batch = make_batch(windows, ChannelStats.identity(), "flow", keep_rgb01=True)
print("batch", batch.shape, "rgb", batch.rgb.shape, "flow", batch.extra.shape)

for cfg in (
    ModelConfig(modality="none"),
    ModelConfig(modality="flow"),
    ModelConfig(encoder="vae", modality="flow"),
    ModelConfig(fusion="hybrid", modality="flow"),
):
    model = SteeringModel(cfg, seed=0)
    feats, _ = model.encode(batch)
    n_params = sum(p.data.size for p in model.parameters().values())
    pred = model.predict(batch)
    print(f"{cfg.encoder:3s} {cfg.fusion:6s} {cfg.modality:4s}  in={model.input_channels}  "
          f"features={feats.shape}  params={n_params:,}  pred={np.round(pred[0], 3)}")
