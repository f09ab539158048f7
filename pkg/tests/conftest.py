"""Shared test helpers: a micro pipeline config that runs in seconds."""

from semalignvc.config import config_from_dict


def micro_config_dict(run_dir, seed=0, **overrides):
    data = {
        "seed": seed,
        "run_dir": str(run_dir),
        "corpus": {"speakers": 2, "utts_per_speaker": 4,
                   "min_symbols": 5, "max_symbols": 7},
        "features": {"n_mels": 24},
        "quantizer": {"vocab_size": 64, "code_dim": 8, "stack": 2},
        "semenc": {"layers": 1, "d": 16, "heads": 2, "conv_kernel": 3,
                   "token_vocab": 64, "d_text": 16, "dropout": 0.0,
                   "token_dropout": 0.0, "steps": 6, "ablation_steps": 6,
                   "batch_size": 4},
        "lm": {"layers": 1, "d": 16, "heads": 2, "token_vocab": 64,
               "d_sem": 16, "n_mels": 24, "steps": 6, "batch_size": 4},
        "acoustic": {"layers": 1, "d": 16, "heads": 2, "n_mels": 24,
                     "token_vocab": 64, "d_token": 8, "stack": 2,
                     "steps": 6, "batch_size": 4},
        "convert": {"pairs": 2, "identity_pairs": 1, "ode_steps": 2},
        "probe": {"epochs": 1},
        "pca": {"utterances": 2},
    }
    for key, val in overrides.items():
        data.setdefault(key, {}).update(val)
    return data


def micro_config(run_dir, seed=0, **overrides):
    """Smallest config that exercises every stage in seconds."""
    return config_from_dict(micro_config_dict(run_dir, seed, **overrides))
