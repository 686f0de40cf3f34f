"""Small model/data builders shared by the test modules."""
import numpy as np
import torch

from cmml.data import SyntheticSpec, generate_synthetic, synthetic_schema
from cmml.encoders import EncoderConfig
from cmml.model import ModelConfig, tensorize
from cmml.trainer import build_model


def tiny_config(d=16, n_attributes=2, feature_dim=6, dtype="float64", hidden=8, channels=4, **kw) -> ModelConfig:
    schema = synthetic_schema(n_attributes)
    enc = EncoderConfig(d=d, d_r=12, S=(3, 2, 4 * n_attributes), channels=channels, hidden=hidden,
                        feature_dims=(feature_dim, feature_dim), heads=4)
    defaults = dict(n_classes=3, L=2, r=4 if d % 16 == 0 else 2, memory_slots=6, dtype=dtype)
    defaults.update(kw)
    return ModelConfig(encoder=enc, schema=[tuple(e) for e in schema.entries], **defaults)


def tiny_samples(n=8, feature_dim=6, n_attributes=2, seed=0):
    spec = SyntheticSpec(n_samples=n, feature_dim=feature_dim, latent_dim=4, seed=seed,
                         n_attributes=n_attributes, S=(3, 2, 4 * n_attributes))
    return generate_synthetic(spec)


def tiny_model(switches=(), seed=0, **kw):
    cfg = tiny_config(**kw)
    return build_model(cfg, switches, seed), cfg


def tiny_batch(cfg, n=8, seed=0):
    return tensorize(tiny_samples(n, cfg.encoder.feature_dims[0], len(cfg.schema), seed), cfg)


def random_mask(n, M, rng, full=False):
    from cmml.data import sample_dropout_mask
    from cmml.model import mask_tensor

    if full:
        return torch.ones(n, M, dtype=torch.bool)
    return mask_tensor([sample_dropout_mask(M, rng) for _ in range(n)])
