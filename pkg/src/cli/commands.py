# COMMAND-LINE SUBCOMMANDS AND RUN-CONFIG RESOLUTION

# DEPENDENCIES

import torch
import argparse
import numpy as np
import pandas as pd
from pathlib import Path

from config import config as defaults
from config.config import format_config
from config.config import load_config_file
from config.config import write_config_echo
from logger.logger import LoggerSetup
from src.mnist_data.curves import EnergyCurve
from src.mnist_data.curves import DatasetManifest
from src.mnist_data.curves import normalize_curves
from src.mnist_data.curves import read_curves_csv
from src.mnist_data.curves import write_curves_csv
from src.mnist_data.curves import normalization_constant
from src.mnist_data.material import to_property_field
from src.mnist_data.idx_reader import Bitmap
from src.mnist_data.idx_reader import load_idx
from src.mnist_data.idx_reader import write_idx
from src.mnist_data.idx_reader import load_image
from src.mnist_data.polynomial import PolyCoeffs
from src.mnist_data.polynomial import fit_cubic
from src.mnist_data.polynomial import eval_polynomial
from src.mnist_data.polynomial import coefficient_ranges
from src.fem_solver.solver import LoadSchedule
from src.fem_solver.solver import NewtonSettings
from src.fem_solver.solver import solve_many
from src.diffusion.schedule import linear_beta_schedule
from src.diffusion.trainer import DiffusionTrainer
from src.diffusion.trainer import DiffusionTrainingConfig
from src.diffusion.trainer import load_diffusion
from src.diffusion.trainer import smoothed_improvement
from src.denoiser.conditional import build_denoiser
from src.surrogate.model import SurrogateCNN
from src.surrogate.model import mse_to_target
from src.surrogate.trainer import SurrogateTrainer
from src.surrogate.trainer import SurrogateTrainingConfig
from src.surrogate.trainer import load_surrogate
from src.pipeline.design import EXHAUSTED
from src.pipeline.design import GenerationTarget
from src.pipeline.design import rank
from src.pipeline.design import generate_and_filter
from src.pipeline.design import save_design_images
from src.pipeline.design import save_snapshot_grids
from src.pipeline.validation import validate_with_fem
from src.pipeline.validation import discrepancy_summary
from src.utils.image_io import save_image
from src.utils.exceptions import ExhaustionError
from src.utils.exceptions import InputPathError
from src.utils.exceptions import ConfigurationError

# LOGGER SETUP
cli_logger = LoggerSetup(logger_name = "commands.py", log_filename_prefix = "cli").get_logger()

TRUE_WORDS = ("1", "true", "yes", "on")

# SETTINGS PER SUBCOMMAND; THE DEFAULT'S TYPE DRIVES PARSING, None MEANS A REQUIRED PATH OR OPTIONAL TEXT
COMMON     = {"output" : None, "seed" : 0, "jobs" : 1}

GEN_DATASET      = {**COMMON,
                    "images"           : None,
                    "split"            : "train",
                    "start"            : 0,
                    "count"            : 10,
                    "manifest"         : None,
                    "subdivision"      : defaults.SUBDIVISION,
                    "newton_tol"       : defaults.NEWTON_TOL,
                    "max_newton"       : defaults.MAX_NEWTON,
                    "bisection_depth"  : defaults.BISECTION_DEPTH,
                    "steps"            : defaults.NUM_LOAD_STEPS,
                    "max_displacement" : defaults.MAX_DISPLACEMENT,
                    "poisson"          : defaults.POISSON_RATIO,
                    "dump_dir"         : None,
                    }

TRAIN_SURROGATE  = {**COMMON,
                    "dataset"          : None,
                    "epochs"           : defaults.SURROGATE_EPOCHS,
                    "batch_size"       : defaults.SURROGATE_BATCH,
                    "lr"               : defaults.SURROGATE_LR,
                    "lr_factor"        : defaults.SURROGATE_LR_FACTOR,
                    "patience"         : defaults.SURROGATE_PATIENCE,
                    "early_stop"       : 0,
                    "val_fraction"     : 0.1,
                    "device"           : defaults.DEVICE,
                    "resume"           : False,
                    }

TRAIN_DIFFUSION  = {**COMMON,
                    "dataset"               : None,
                    "limit"                 : 0,
                    "steps"                 : defaults.DIFFUSION_TRAIN_STEPS,
                    "batch_size"            : defaults.DIFFUSION_BATCH,
                    "lr"                    : defaults.DIFFUSION_LR,
                    "drop_prob"             : defaults.CONTEXT_DROP_PROB,
                    "independent_drop"      : False,
                    "vlb_weight"            : defaults.VLB_WEIGHT,
                    "T"                     : defaults.DIFFUSION_STEPS,
                    "beta_start"            : defaults.BETA_START,
                    "beta_end"              : defaults.BETA_END,
                    "base_channels"         : defaults.BASE_CHANNELS,
                    "channel_multipliers"   : defaults.CHANNEL_MULTIPLIERS,
                    "num_res_blocks"        : 1,
                    "attention_resolutions" : defaults.ATTENTION_RESOLUTIONS,
                    "dropout"               : 0.0,
                    "use_curve"             : True,
                    "use_topology"          : False,
                    "checkpoint_every"      : 5000,
                    "log_every"             : 100,
                    "device"                : defaults.DEVICE,
                    "resume"                : False,
                    }

TARGET           = {"coeffs"           : None,
                    "preset"           : "medium",
                    "twin_dataset"     : None,
                    "sample_id"        : -1,
                    }

DESIGN           = {**COMMON,
                    **TARGET,
                    "diffusion"        : None,
                    "surrogate"        : None,
                    "topology"         : None,
                    "twin_topology"    : False,
                    "mse_limit"        : defaults.MSE_LIMIT,
                    "n_accept"         : defaults.N_ACCEPT,
                    "max_generated"    : defaults.MAX_GENERATED,
                    "batch_size"       : defaults.GENERATION_BATCH,
                    "guidance_weight"  : 0.0,
                    "snapshot_steps"   : (),
                    "png"              : False,
                    "validate_k"       : 0,
                    "manifest"         : None,
                    "subdivision"      : defaults.SUBDIVISION,
                    "device"           : defaults.DEVICE,
                    }

VALIDATE         = {**COMMON,
                    **TARGET,
                    "images"           : None,
                    "manifest"         : None,
                    "surrogate"        : None,
                    "k"                : 16,
                    "mse_limit"        : defaults.MSE_LIMIT,
                    "subdivision"      : defaults.SUBDIVISION,
                    }

FIT_POLY         = {**COMMON,
                    "curves"           : None,
                    "coeffs"           : None,
                    }


def parse_value(raw : str, default):
    """
    Convert a textual setting to the type of its default. Tuples are comma-separated integers.
    """
    raw = str(raw).strip()

    if default is None:
        return None if raw in ("", "None") else raw

    try:
        if isinstance(default, bool):
            return raw.lower() in TRUE_WORDS

        if isinstance(default, int):
            return int(raw)

        if isinstance(default, float):
            return float(raw)

        if isinstance(default, tuple):
            return tuple(int(item) for item in raw.split(",") if item.strip())

    except ValueError as e:
        raise ConfigurationError(f"cannot read {raw!r} as {type(default).__name__}") from e

    return raw


def resolve_settings(args : argparse.Namespace, table : dict) -> dict:
    """
    Defaults, then the `--config` file, then explicit flags.
    """
    settings = dict(table)

    if getattr(args, "config", None):
        for key, raw in load_config_file(args.config).items():
            if key not in table:
                raise ConfigurationError(f"unknown setting {key!r} in {args.config}")

            settings[key] = parse_value(raw, table[key])

    for key, default in table.items():
        value = getattr(args, key, None)

        if value is not None:
            settings[key] = parse_value(value, default)

    return settings


def _require(settings : dict, *keys : str) -> None:
    missing = [key for key in keys if settings.get(key) is None]

    if missing:
        raise ConfigurationError("missing required setting(s): " + ", ".join(f"--{key.replace('_', '-')}" for key in missing))


def prepare_output_dir(settings : dict, overwrite : bool) -> Path:
    """
    Create the output directory and echo the resolved settings into it. A non-empty directory is
    refused unless `--overwrite` is given or the run resumes.
    """
    _require(settings, "output")

    output = Path(settings["output"])

    if output.exists() and any(output.iterdir()) and not overwrite and not settings.get("resume", False):
        raise ConfigurationError(f"output directory {output} is not empty; pass --overwrite to reuse it")

    output.mkdir(parents = True, exist_ok = True)
    write_config_echo(settings, output)

    return output


def _existing(path : str | None, what : str) -> Path:
    if path is None or not Path(path).exists():
        raise InputPathError(f"{what} not found: {path}")

    return Path(path)


def _load_dataset(path : str) -> tuple:
    """ Images, normalized curves and manifest of a generated data set directory. """
    root                = _existing(path, "dataset directory")
    manifest            = DatasetManifest.read(root / "manifest.txt")
    images              = load_idx(root / manifest.images_file)
    _, curves           = read_curves_csv(root / manifest.curves_file)

    return images, np.stack([curve.energies for curve in curves]), manifest


def _twin_source(settings : dict) -> tuple | None:
    """
    Bitmap, normalized curve and manifest of sample `sample_id` in `twin_dataset`, or None when no
    twin data set is configured. The sample id is the one written in the data set's curves.csv.
    """
    if not settings.get("twin_dataset"):
        return None

    if settings.get("coeffs"):
        raise ConfigurationError("coeffs and twin_dataset both name a target; set only one")

    sample_id           = settings.get("sample_id", -1)

    if sample_id < 0:
        raise ConfigurationError("twin_dataset needs a non-negative sample_id")

    root                = _existing(settings["twin_dataset"], "dataset directory")
    manifest            = DatasetManifest.read(root / "manifest.txt")
    sample_ids, curves  = read_curves_csv(root / manifest.curves_file)

    if sample_id not in sample_ids:
        raise ConfigurationError(f"sample {sample_id} is not in {root}")

    row                 = sample_ids.index(sample_id)
    images              = load_idx(root / manifest.images_file)

    return Bitmap(images[row]), curves[row], manifest


def _target_curve(settings : dict, twin : tuple | None = None) -> tuple:
    """ Target behavior from a twin data set sample, `coeffs = a,b,c` or a named reference polynomial. """
    twin                = twin if twin is not None else _twin_source(settings)

    if twin is not None:
        _, curve, _     = twin
        coeffs, _       = fit_cubic(curve)

        return curve, f"twin_{settings['sample_id']}", coeffs

    if settings.get("coeffs"):
        try:
            values  = [float(item) for item in str(settings["coeffs"]).split(",")]

        except ValueError as e:
            raise ConfigurationError(f"coeffs must be three comma-separated numbers, got {settings['coeffs']!r}") from e

        if len(values) != 3:
            raise ConfigurationError(f"coeffs must have three entries, got {len(values)}")

        coeffs      = PolyCoeffs(*values)
        name        = "custom"

    else:
        preset      = settings.get("preset") or "medium"

        if preset not in defaults.TARGET_POLYNOMIALS:
            raise ConfigurationError(f"unknown target preset {preset!r}; choose from {sorted(defaults.TARGET_POLYNOMIALS)}")

        coeffs      = PolyCoeffs(*defaults.TARGET_POLYNOMIALS[preset])
        name        = preset

    return eval_polynomial(coeffs), name, coeffs


def cmd_gen_dataset(args : argparse.Namespace) -> dict:
    settings      = resolve_settings(args, GEN_DATASET)
    _require(settings, "images")

    stack         = load_idx(_existing(settings["images"], "IDX file"))
    start, count  = settings["start"], settings["count"]

    if start < 0 or count < 1 or start + count > len(stack):
        raise ConfigurationError(f"samples [{start}, {start + count}) are outside the {len(stack)} available")

    output        = prepare_output_dir(settings, args.overwrite)
    images        = stack[start:start + count]
    fields        = [to_property_field(Bitmap(image), settings["poisson"]) for image in images]
    schedule      = LoadSchedule.canonical(settings["steps"], settings["max_displacement"])
    newton        = NewtonSettings(tol = settings["newton_tol"], max_iter = settings["max_newton"], bisection_depth = settings["bisection_depth"])

    cli_logger.info(f"Solving {count} {settings['split']} samples from index {start} at s = {settings['subdivision']}")

    sample_ids    = list(range(start, start + count))
    dump_dirs     = [Path(settings["dump_dir"]) / f"sample_{i:05d}" for i in sample_ids] if settings["dump_dir"] else None

    raw_curves    = solve_many(fields, schedule, settings["subdivision"], newton, jobs = settings["jobs"], dump_dirs = dump_dirs)
    raw           = np.stack([curve.energies for curve in raw_curves])

    if settings["manifest"]:
        scale     = DatasetManifest.read(_existing(settings["manifest"], "manifest")).normalization

    else:
        if settings["split"] != "train":
            cli_logger.warning("No training manifest given; normalizing by this split's own maximum final energy")

        scale     = normalization_constant(raw)

    normalized    = normalize_curves(raw, scale)
    manifest      = DatasetManifest(split         = settings["split"],
                                    count         = count,
                                    normalization = scale,
                                    poisson       = settings["poisson"],
                                    displacements = schedule.displacements,
                                    subdivision   = settings["subdivision"],
                                    source_offset = start,
                                    split_sizes   = {settings["split"] : count},
                                    )

    write_idx(output / manifest.images_file, images)
    write_curves_csv(output / manifest.raw_curves_file, sample_ids, raw_curves)
    write_curves_csv(output / manifest.curves_file, sample_ids, [EnergyCurve(schedule.displacements, row, normalized = True) for row in normalized])
    manifest.write(output / "manifest.txt")

    cli_logger.info(f"Dataset written to {output} (S = {scale:.6g})")

    return settings


def cmd_train_surrogate(args : argparse.Namespace) -> dict:
    settings      = resolve_settings(args, TRAIN_SURROGATE)
    _require(settings, "dataset")

    images, curves, _ = _load_dataset(settings["dataset"])
    output        = prepare_output_dir(settings, args.overwrite)

    torch.manual_seed(settings["seed"])

    config        = SurrogateTrainingConfig(epochs       = settings["epochs"],
                                            batch_size   = settings["batch_size"],
                                            lr           = settings["lr"],
                                            lr_factor    = settings["lr_factor"],
                                            patience     = settings["patience"],
                                            early_stop   = settings["early_stop"] or None,
                                            val_fraction = settings["val_fraction"],
                                            seed         = settings["seed"],
                                            )
    trainer       = SurrogateTrainer(SurrogateCNN(), config, output, settings["device"])

    if settings["resume"] and trainer.checkpoint_path.is_file():
        trainer.resume(trainer.checkpoint_path)

    trainer.fit(images, curves)

    return settings


def cmd_train_diffusion(args : argparse.Namespace) -> dict:
    settings      = resolve_settings(args, TRAIN_DIFFUSION)
    _require(settings, "dataset")

    images, curves, _ = _load_dataset(settings["dataset"])

    if settings["limit"]:
        images, curves = images[:settings["limit"]], curves[:settings["limit"]]

    output        = prepare_output_dir(settings, args.overwrite)

    torch.manual_seed(settings["seed"])

    model         = build_denoiser({key : settings[key] for key in ("base_channels", "channel_multipliers", "num_res_blocks",
                                                                      "attention_resolutions", "dropout", "use_curve", "use_topology")})
    schedule      = linear_beta_schedule(settings["T"], settings["beta_start"], settings["beta_end"])
    config        = DiffusionTrainingConfig(steps            = settings["steps"],
                                            batch_size       = settings["batch_size"],
                                            lr               = settings["lr"],
                                            drop_prob        = settings["drop_prob"],
                                            independent_drop = settings["independent_drop"],
                                            vlb_weight       = settings["vlb_weight"],
                                            seed             = settings["seed"],
                                            checkpoint_every = settings["checkpoint_every"],
                                            log_every        = settings["log_every"],
                                            T                = settings["T"],
                                            beta_start       = settings["beta_start"],
                                            beta_end         = settings["beta_end"],
                                            )
    trainer       = DiffusionTrainer(model, schedule, config, output, settings["device"])

    if settings["resume"] and trainer.checkpoint_path.is_file():
        trainer.resume(trainer.checkpoint_path)

    log           = trainer.train(images, curves if settings["use_curve"] else None)

    if len(log) >= 2:
        cli_logger.info(f"Smoothed l_mu fell by {smoothed_improvement(log):.1%} between the first and last tenth of the run")

    return settings


def cmd_design(args : argparse.Namespace) -> dict:
    settings      = resolve_settings(args, DESIGN)
    _require(settings, "diffusion", "surrogate")

    device        = settings["device"]
    model, schedule, _ = load_diffusion(_existing(settings["diffusion"], "diffusion checkpoint"), device)
    surrogate     = load_surrogate(_existing(settings["surrogate"], "surrogate checkpoint"), device)
    twin          = _twin_source(settings)
    behavior, name, coeffs = _target_curve(settings, twin)

    if settings["topology"]:
        topology  = load_image(settings["topology"])

    elif settings["twin_topology"]:
        if twin is None:
            raise ConfigurationError("twin_topology needs twin_dataset and sample_id")

        topology  = twin[0]

    else:
        topology  = None

    target        = GenerationTarget(behavior      = behavior,
                                     topology      = topology,
                                     mse_limit     = settings["mse_limit"],
                                     n_accept      = settings["n_accept"],
                                     max_generated = settings["max_generated"],
                                     name          = name,
                                     )
    output        = prepare_output_dir(settings, args.overwrite)

    cli_logger.info(f"Target {name}: {coeffs}")
    write_curves_csv(output / "target.csv", [max(settings["sample_id"], 0)], [behavior])

    if twin is not None:
        save_image(output / "twin_source.pgm", twin[0].values)
        source_mse = float(mse_to_target(surrogate.predict_batch(twin[0].values[None]), behavior)[0])
        cli_logger.info(f"Twin source sample {settings['sample_id']}: surrogate MSE {source_mse:.3e} against its own curve")

    accepted, report = generate_and_filter(model, surrogate, target, schedule,
                                           seed            = settings["seed"],
                                           batch_size      = settings["batch_size"],
                                           device          = device,
                                           guidance_weight = settings["guidance_weight"],
                                           snapshot_steps  = settings["snapshot_steps"],
                                           progress        = True,
                                           )

    report.write(output)
    save_design_images(output / "accepted", accepted, report.accepted_ids, png = settings["png"])

    if report.snapshots:
        save_snapshot_grids(output / "snapshots", report.snapshots)

    if settings["validate_k"] and report.accepted_count:
        if twin is not None and not settings["manifest"]:
            manifest = twin[2]

        else:
            manifest = DatasetManifest.read(_existing(settings["manifest"], "manifest"))

        order     = rank(report, top_k = settings["validate_k"], accepted_only = True)
        position  = {sample_id : i for i, sample_id in enumerate(report.accepted_ids)}
        errors    = {record.sample_id : record.surrogate_mse for record in report.records}
        table     = validate_with_fem(accepted[[position[i] for i in order]], behavior, len(order), manifest.normalization,
                                      sample_ids    = order,
                                      surrogate_mse = [errors[i] for i in order],
                                      subdivision   = settings["subdivision"],
                                      jobs          = settings["jobs"],
                                      )
        _write_validation(output, table, settings["mse_limit"])

    cli_logger.info(f"Design finished: {report.accepted_count} accepted of {report.generated_count} generated ({report.status})")

    if report.status == EXHAUSTED:
        raise ExhaustionError(f"no design met MSE < {settings['mse_limit']:g} within {report.generated_count} samples")

    return settings


def _write_validation(output : Path, table : pd.DataFrame, limit : float) -> dict:
    summary = discrepancy_summary(table, limit)

    table.to_csv(output / "validation.csv", index = False)
    (output / "validation_summary.txt").write_text(format_config(summary))

    return summary


def cmd_validate(args : argparse.Namespace) -> dict:
    settings      = resolve_settings(args, VALIDATE)
    twin          = _twin_source(settings)
    _require(settings, "images", *(() if twin is not None else ("manifest",)))

    images        = load_idx(_existing(settings["images"], "IDX bundle"))
    behavior, _, _ = _target_curve(settings, twin)

    if twin is not None and not settings["manifest"]:
        manifest  = twin[2]

    else:
        manifest  = DatasetManifest.read(_existing(settings["manifest"], "manifest"))
    output        = prepare_output_dir(settings, args.overwrite)

    k             = min(settings["k"], len(images))
    errors        = None

    if settings["surrogate"]:
        surrogate = load_surrogate(_existing(settings["surrogate"], "surrogate checkpoint"))
        errors    = mse_to_target(surrogate.predict_batch(images[:k]), behavior).tolist()

    table         = validate_with_fem(images, behavior, k, manifest.normalization,
                                      surrogate_mse = errors,
                                      subdivision   = settings["subdivision"],
                                      jobs          = settings["jobs"],
                                      )
    summary       = _write_validation(output, table, settings["mse_limit"])

    cli_logger.info(f"Validation: {summary}")

    return settings


def cmd_fit_poly(args : argparse.Namespace) -> dict:
    settings      = resolve_settings(args, FIT_POLY)
    output        = prepare_output_dir(settings, args.overwrite)

    if settings["coeffs"]:
        curve, _, coeffs = _target_curve(settings)
        write_curves_csv(output / "target.csv", [0], [curve])
        print(f"{coeffs}: " + ", ".join(f"{value:.6g}" for value in curve.energies))

        return settings

    _require(settings, "curves")

    sample_ids, curves = read_curves_csv(_existing(settings["curves"], "curve file"))
    fits          = [fit_cubic(curve) for curve in curves]
    frame         = pd.DataFrame([{"sample_id" : sample_id, "a" : c.a, "b" : c.b, "c" : c.c, "residual" : residual}
                                  for sample_id, (c, residual) in zip(sample_ids, fits)])
    ranges        = coefficient_ranges([c for c, _ in fits])

    frame.to_csv(output / "fits.csv", index = False, float_format = "%.17g")
    (output / "ranges.txt").write_text(format_config({name : list(bounds) for name, bounds in ranges.items()}))

    for name, (low, high) in ranges.items():
        print(f"{name} = [{low:.6g}, {high:.6g}]")

    return settings


COMMANDS = {"gen-dataset"     : (cmd_gen_dataset, GEN_DATASET, "solve FEM energy curves for IDX bitmaps"),
            "train-surrogate" : (cmd_train_surrogate, TRAIN_SURROGATE, "train the CNN curve predictor"),
            "train-diffusion" : (cmd_train_diffusion, TRAIN_DIFFUSION, "train the conditional diffusion model"),
            "design"          : (cmd_design, DESIGN, "generate, filter and rank designs for a target curve"),
            "validate"        : (cmd_validate, VALIDATE, "re-score designs with the FEM solver"),
            "fit-poly"        : (cmd_fit_poly, FIT_POLY, "fit cubic polynomials or evaluate a target"),
            }


def build_parser() -> argparse.ArgumentParser:
    """
    One sub-parser per command. Every setting is a `--kebab-case` flag; values arrive as text and
    are typed by `resolve_settings`, so a config file and the command line share one grammar.
    """
    parser      = argparse.ArgumentParser(prog = "microdiff", description = "Inverse design of hyperelastic microstructures with conditional diffusion")
    subparsers  = parser.add_subparsers(dest = "command", required = True)

    for name, (handler, table, help_text) in COMMANDS.items():
        sub     = subparsers.add_parser(name, help = help_text)
        sub.add_argument("--config", default = None, help = "key = value run-config file")
        sub.add_argument("--overwrite", action = "store_true", help = "reuse a non-empty output directory")

        for key, default in table.items():
            flag = "--" + key.replace("_", "-")

            if isinstance(default, bool):
                sub.add_argument(flag, dest = key, action = "store_const", const = "true", default = None, help = f"(default {default})")

            else:
                shown = ",".join(str(item) for item in default) if isinstance(default, tuple) else default
                sub.add_argument(flag, dest = key, default = None, help = f"(default {shown})")

        sub.set_defaults(handler = handler)

    return parser
