import numpy as np

from streamforge.core import CLEAN, make_chunk, pure_noise


def noise_chunk(cid, config, rng=None):
    rng = rng or np.random.default_rng(cid)
    data = rng.standard_normal((config.latents_per_chunk, config.latent_dim))
    return make_chunk(cid, data, pure_noise(config.ladder), config, f"c{cid}")


def clean_chunk(cid, config, value=0.0):
    data = np.full((config.latents_per_chunk, config.latent_dim), float(value))
    return make_chunk(cid, data, CLEAN, config, f"c{cid}")


def step_all(bank):
    """Advance every stream chunk one rung without changing its data."""
    from streamforge.core import level_for

    ladder = bank.config.ladder
    bank.advance_stream([
        c.with_data(c.data, level_for(ladder, c.noise_level.ladder_index - 1)) for c in bank.stream
    ])
