# SELF-DESCRIBING CHECKPOINT CONTAINER

# DEPENDENCIES

import torch
from pathlib import Path

from logger.logger import LoggerSetup
from src.utils.exceptions import CheckpointError

# LOGGER SETUP
checkpoint_logger = LoggerSetup(logger_name = "checkpoint.py", log_filename_prefix = "checkpoint").get_logger()

FORMAT_VERSION    = 1


def save_checkpoint(path : str | Path, kind : str, config : dict, states : dict, step : int = 0, extra : dict | None = None) -> Path:
    """
    Write a checkpoint holding model/optimizer states together with the configuration that built them.

    Arguments:

        - `path`           {str | Path}      : Target file; written atomically through a temporary sibling.

        - `kind`               {str}         : Container type tag, e.g. "diffusion" or "surrogate".

        - `config`             {dict}        : Plain-typed configuration echoed for shape validation on load.

        - `states`             {dict}        : Named `state_dict()` mappings.

        - `step`               {int}         : Training step or epoch reached.

        - `extra`              {dict}        : Additional plain-typed payload (schedule, RNG state, ...).
    """
    path              = Path(path)
    path.parent.mkdir(parents = True, exist_ok = True)

    payload           = {"format_version" : FORMAT_VERSION,
                         "kind"           : kind,
                         "config"         : dict(config),
                         "states"         : states,
                         "step"           : int(step),
                         "extra"          : extra or {},
                         }

    staging           = path.with_name(path.name + ".tmp")
    torch.save(payload, staging)
    staging.replace(path)

    checkpoint_logger.info(f"Saved {kind} checkpoint at step {step} to {path}")

    return path


def load_checkpoint(path : str | Path, kind : str, expected_config : dict | None = None, map_location : str = "cpu") -> dict:
    """
    Read and validate a checkpoint.

    Raises:

        - `CheckpointError`          : Missing or unreadable file, wrong container kind, or a config value
                                       that differs from `expected_config` (each mismatch is listed).
    """
    path              = Path(path)

    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")

    try:
        payload       = torch.load(path, map_location = map_location, weights_only = True)

    except Exception as e:
        checkpoint_logger.error(f"Error loading checkpoint: {repr(e)}")

        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e

    if not isinstance(payload, dict) or payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path} is not a version-{FORMAT_VERSION} checkpoint container")

    if payload.get("kind") != kind:
        raise CheckpointError(f"{path} holds a {payload.get('kind')!r} checkpoint, expected {kind!r}")

    if expected_config:
        stored        = payload["config"]
        mismatches    = [f"{key}: stored {stored.get(key)!r} != requested {value!r}" for key, value in expected_config.items() if stored.get(key) != value]

        if mismatches:
            raise CheckpointError(f"checkpoint {path.name} does not match the requested configuration; " + "; ".join(mismatches))

    return payload
