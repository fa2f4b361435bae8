# PROJECT-WIDE DEFAULTS AND RUN-CONFIG FILE HANDLING

# DEPENDENCIES

import io
import os
from pathlib import Path
from dotenv import load_dotenv
from dotenv import dotenv_values
from dotenv.parser import parse_stream

from src.utils.exceptions import ConfigurationError

# LOADING ENVIRONMENT VARIABLES
load_dotenv()

LOG_DIR                     = os.environ.get('MICRODIFF_LOG_DIR', 'logs')
LOG_LEVEL                   = os.environ.get('MICRODIFF_LOG_LEVEL', 'INFO')
LOG_TO_FILE                 = os.environ.get('MICRODIFF_LOG_TO_FILE', '1') not in ('0', 'false', 'False', '')
DEVICE                      = os.environ.get('MICRODIFF_DEVICE', 'cpu')

# -------------------------
# MATERIAL AND DATA SET
# -------------------------

POISSON_RATIO               = 0.3
YOUNG_MIN                   = 1.0
YOUNG_MAX                   = 100.0
IMAGE_SIZE                  = 28
NUM_LOAD_STEPS              = 13
MAX_DISPLACEMENT            = 14.0

# CUBIC a*x^3 + b*x^2 + c*x COEFFICIENT RANGES OVER THE REFERENCE DATA SET
COEFFICIENT_RANGES          = {"a" : (-0.0162, -0.0047),
                               "b" : (0.6346,  1.3968),
                               "c" : (0.00532, 0.4114)
                               }

# TARGET POLYNOMIALS FROM HIGHER TO LOWER ENERGY RANGE
TARGET_POLYNOMIALS          = {"high"   : (-0.014, 1.368, 0.057),
                               "medium" : (-0.011, 0.919, 0.062),
                               "low"    : (-0.013, 0.709, 0.276)
                               }

# -------------------------
# FINITE ELEMENT SOLVER
# -------------------------

SUBDIVISION                 = 2
NEWTON_TOL                  = 1e-8
NEWTON_ATOL                 = 1e-10
MAX_NEWTON                  = 20
BISECTION_DEPTH             = 6

# -------------------------
# DIFFUSION
# -------------------------

DIFFUSION_STEPS             = 1000
BETA_START                  = 1e-4
BETA_END                    = 0.02
MAX_BETA                    = 0.999
VLB_WEIGHT                  = 0.001
DIFFUSION_LR                = 1e-4
DIFFUSION_BATCH             = 128
DIFFUSION_TRAIN_STEPS       = 50_000
CONTEXT_DROP_PROB           = 0.1
EMBEDDING_WIDTH             = 128
BASE_CHANNELS               = 32
CHANNEL_MULTIPLIERS         = (1, 2, 4, 8)
ATTENTION_RESOLUTIONS       = (16, 8, 4)
PADDED_SIZE                 = 32

# -------------------------
# SURROGATE
# -------------------------

SURROGATE_LR                = 1e-3
SURROGATE_BATCH             = 256
SURROGATE_EPOCHS            = 200
SURROGATE_LR_FACTOR         = 0.9
SURROGATE_PATIENCE          = 5

# -------------------------
# DESIGN PIPELINE
# -------------------------

MSE_LIMIT                   = 1e-4
N_ACCEPT                    = 512
MAX_GENERATED               = 4096
GENERATION_BATCH            = 64
SNAPSHOT_STEPS              = (1, 750, 1000)
MSE_QUANTILES               = (0.0, 0.05, 0.5, 0.95, 1.0)


def parse_config_text(text : str) -> dict:
    """
    Parse flat `key = value` text into a dictionary of strings.

    The dotenv grammar applies: blank lines and `#` comment lines are skipped, a ` # note` after a
    value is dropped and quoted values are unquoted. Keys are normalized so that `newton-tol` and
    `newton_tol` refer to the same setting.

    Arguments:

        - `text`          {str}      : Raw config file contents.

    Returns:

        - `settings`     {dict}      : Mapping of normalized keys to raw string values.

    Raises:

        - `ConfigurationError`       : On an unparsable line, a key without `=` or a duplicated key.
    """
    seen                      = set()

    for binding in parse_stream(io.StringIO(text)):
        line_number           = binding.original.line
        raw_line              = binding.original.string.strip()

        if binding.error:
            raise ConfigurationError(f"config line {line_number} cannot be parsed: {raw_line!r}")

        if binding.key is None:
            continue

        if binding.value is None:
            raise ConfigurationError(f"config line {line_number} has no '=': {raw_line!r}")

        key                   = normalize_key(binding.key)

        if key in seen:
            raise ConfigurationError(f"config key {key!r} is set twice (line {line_number})")

        seen.add(key)

    values                    = dotenv_values(stream = io.StringIO(text), interpolate = False)

    return {normalize_key(key) : value for key, value in values.items()}


def normalize_key(key : str) -> str:
    return key.strip().replace('-', '_')


def load_config_file(path : str | Path) -> dict:
    """
    Read a run-config file from disk.

    Arguments:

        - `path`          {str | Path}      : Location of the key-value config file.

    Returns:

        - `settings`        {dict}          : Parsed settings (string values).
    """
    path                      = Path(path)

    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")

    return parse_config_text(path.read_text())


def format_config(settings : dict) -> str:
    """
    Render a resolved configuration as `key = value` lines in sorted key order.
    """
    lines                     = []

    for key in sorted(settings):
        value                 = settings[key]

        if isinstance(value, (list, tuple)):
            value             = ",".join(str(item) for item in value)

        lines.append(f"{key} = {value}")

    return "\n".join(lines) + "\n"


def write_config_echo(settings : dict, output_dir : str | Path, filename : str = "config.txt") -> Path:
    """
    Echo the fully resolved run configuration into the output directory.
    """
    target                    = Path(output_dir) / filename
    target.write_text(format_config(settings))

    return target
