import math

import numpy as np
import pandas as pd
import pytest
import torch

from src.pipeline.design import CAPPED
from src.pipeline.design import COMPLETE
from src.pipeline.design import EXHAUSTED
from src.pipeline.design import rank
from src.pipeline.design import refilter
from src.pipeline.design import batch_seed
from src.pipeline.design import FilterReport
from src.pipeline.design import SampleRecord
from src.pipeline.design import GeneratedPool
from src.pipeline.design import mse_quantiles
from src.pipeline.design import GenerationTarget
from src.pipeline.design import save_design_images
from src.pipeline.design import save_snapshot_grids
from src.pipeline.design import generate_and_filter
from src.pipeline.validation import validate_with_fem
from src.pipeline.validation import discrepancy_summary
from src.pipeline.validation import VALIDATION_COLUMNS
from src.diffusion.schedule import NoiseSchedule
from src.denoiser.conditional import build_denoiser
from src.mnist_data.curves import EnergyCurve
from src.mnist_data.curves import canonical_displacements
from src.mnist_data.material import to_property_field
from src.mnist_data.idx_reader import Bitmap
from src.mnist_data.idx_reader import load_idx
from src.fem_solver.solver import LoadSchedule
from src.fem_solver.solver import run_uniaxial_extension
from src.utils.exceptions import ContractError
from src.utils.exceptions import ConfigurationError
from src.utils.exceptions import NonConvergenceError


class FillSurrogate:
    """ Predicts a flat curve at the share of stiff pixels, so the error is easy to control. """

    def predict_batch(self, images):
        fill = np.asarray(images).reshape(len(images), -1).mean(axis = 1) / 255.0

        return np.repeat(fill[:, None], 13, axis = 1)


@pytest.fixture
def model():
    denoiser = build_denoiser({"base_channels" : 4, "channel_multipliers" : (1, 2), "attention_resolutions" : (16,), "embedding_width" : 16})
    torch.nn.init.xavier_uniform_(denoiser.unet.tail[-1].weight)

    return denoiser


@pytest.fixture
def schedule():
    return NoiseSchedule.from_betas(np.linspace(0.05, 0.3, 4))


def _target(limit, n_accept = 3, max_generated = 8, level = 0.5):
    return GenerationTarget(behavior      = EnergyCurve(canonical_displacements(), np.full(13, level)),
                            mse_limit     = limit,
                            n_accept      = n_accept,
                            max_generated = max_generated,
                            )


def _report(errors, accepted = None):
    accepted = accepted if accepted is not None else [True] * len(errors)
    records  = [SampleRecord(sample_id = i, batch = 0, seed = 7, surrogate_mse = e, accepted = a, mean_intensity = 10.0 * i)
                for i, (e, a) in enumerate(zip(errors, accepted))]

    return FilterReport(target_name = "t", mse_limit = 1.0, n_accept = len(errors), max_generated = len(errors),
                        batch_size = len(errors), status = COMPLETE, records = records, seeds = [7])


# -------------------------
# TARGETS AND SEEDS
# -------------------------

@pytest.mark.parametrize("kwargs", [{"limit" : -1.0}, {"limit" : math.nan}, {"limit" : 1.0, "n_accept" : 0}, {"limit" : 1.0, "max_generated" : 0}])
def test_target_validation(kwargs):
    with pytest.raises(ConfigurationError):
        _target(**kwargs)


def test_target_contexts(digit_stack):
    target   = _target(1.0)
    target.topology = Bitmap(digit_stack[0])
    contexts = target.contexts()

    assert contexts.curves.shape == (1, 13)
    assert contexts.topology.shape == (1, 1, 28, 28)
    assert float(contexts.topology.max()) == 1.0


def test_batch_seeds_are_stable_and_distinct():
    seeds = [batch_seed(11, k) for k in range(50)]

    assert seeds == [batch_seed(11, k) for k in range(50)]
    assert len(set(seeds)) == 50
    assert all(0 <= s < 2 ** 63 for s in seeds)
    assert batch_seed(12, 0) != seeds[0]


# -------------------------
# GENERATE AND FILTER
# -------------------------

def test_unbounded_limit_accepts_first_batch(model, schedule):
    images, report = generate_and_filter(model, FillSurrogate(), _target(math.inf), schedule, seed = 1, batch_size = 4)

    assert report.status == COMPLETE
    assert report.generated_count == 4
    assert report.accepted_ids == [0, 1, 2]
    assert images.shape == (3, 28, 28)
    assert len(report.seeds) == 1


def test_zero_limit_exhausts_cap(model, schedule):
    images, report = generate_and_filter(model, FillSurrogate(), _target(0.0), schedule, seed = 1, batch_size = 4)

    assert report.status == EXHAUSTED
    assert report.generated_count == 8
    assert report.accepted_count == 0
    assert len(images) == 0
    assert report.seeds == [batch_seed(1, 0), batch_seed(1, 1)]


def test_generation_is_reproducible(model, schedule):
    first_images, first   = generate_and_filter(model, FillSurrogate(), _target(0.0), schedule, seed = 5, batch_size = 4)
    second_images, second = generate_and_filter(model, FillSurrogate(), _target(0.0), schedule, seed = 5, batch_size = 4)

    pd.testing.assert_frame_equal(first.to_frame(), second.to_frame())
    np.testing.assert_array_equal(first_images, second_images)


def test_larger_cap_only_appends(model, schedule):
    small = GeneratedPool()
    large = GeneratedPool()
    generate_and_filter(model, FillSurrogate(), _target(0.0, max_generated = 4), schedule, seed = 2, batch_size = 4, pool = small)
    generate_and_filter(model, FillSurrogate(), _target(0.0, max_generated = 8), schedule, seed = 2, batch_size = 4, pool = large)

    np.testing.assert_array_equal(large.images[:4], small.images)
    assert large.seeds[:1] == small.seeds


def test_snapshots_come_from_first_batch(model, schedule):
    _, report = generate_and_filter(model, FillSurrogate(), _target(math.inf), schedule, batch_size = 2, snapshot_steps = (1, 4))

    assert sorted(report.snapshots) == [1, 4]
    assert report.snapshots[4].shape == (2, 28, 28)


def test_refilter_is_monotone_in_limit(model, schedule):
    pool      = GeneratedPool()
    generate_and_filter(model, FillSurrogate(), _target(0.0), schedule, seed = 3, batch_size = 4, pool = pool)

    counts    = [refilter(pool, _target(limit, n_accept = 100), batch_size = 4)[1].accepted_count for limit in (0.0, 0.01, 0.1, 0.3, math.inf)]
    _, loose  = refilter(pool, _target(math.inf, n_accept = 100), batch_size = 4)

    assert counts == sorted(counts)
    assert counts[-1] == 8
    assert loose.status == CAPPED


def test_report_invariants(model, schedule, tmp_path):
    pool           = GeneratedPool()
    generate_and_filter(model, FillSurrogate(), _target(0.0), schedule, seed = 4, batch_size = 4, pool = pool)
    images, report = refilter(pool, _target(0.2, n_accept = 2), batch_size = 4)

    assert report.accepted_count <= 2
    assert all(report.records[i].surrogate_mse < 0.2 for i in report.accepted_ids)
    assert len(images) == report.accepted_count
    assert report.status in (COMPLETE, CAPPED, EXHAUSTED)

    table_path, summary_path = report.write(tmp_path)
    table                    = pd.read_csv(table_path)

    assert len(table) == report.generated_count
    assert table["accepted"].sum() == report.accepted_count
    assert "mse_q050 = " in summary_path.read_text()


def test_pool_rejects_misaligned_batches():
    with pytest.raises(ContractError):
        GeneratedPool().append(np.zeros((2, 28, 28)), np.zeros((3, 13)), seed = 0)


def test_pool_tracks_batches():
    pool = GeneratedPool()
    pool.append(np.zeros((2, 28, 28)), np.zeros((2, 13)), seed = 10)
    pool.append(np.zeros((3, 28, 28)), np.zeros((3, 13)), seed = 11)

    assert len(pool) == 5
    assert pool.batches.tolist() == [0, 0, 1, 1, 1]
    assert pool.seeds == [10, 11]


# -------------------------
# RANKING AND SUMMARIES
# -------------------------

def test_rank_orders_by_error_then_id():
    report = _report([0.3, 0.1, math.nan, 0.1, 0.2])

    assert rank(report) == [1, 3, 4, 0, 2]
    assert rank(report, top_k = 2) == [1, 3]


def test_rank_matches_stable_sort(rng):
    errors = rng.random(40).round(2).tolist()

    assert rank(_report(errors)) == np.argsort(errors, kind = "stable").tolist()


def test_rank_accepted_only():
    report = _report([0.3, 0.1, 0.2], accepted = [True, False, True])

    assert rank(report, accepted_only = True) == [2, 0]


def test_rank_empty_report():
    with pytest.raises(ContractError):
        rank(_report([]))


def test_quantiles():
    values = mse_quantiles(np.array([0.0, 1.0, 2.0, 3.0, 4.0, np.nan]), quantiles = (0.0, 0.5, 1.0))

    assert values == {0.0 : 0.0, 0.5 : 2.0, 1.0 : 4.0}
    assert all(math.isnan(v) for v in mse_quantiles(np.array([]), quantiles = (0.5,)).values())


def test_mean_accepted_intensity():
    report = _report([0.1, 0.2, 0.3], accepted = [False, True, True])

    assert report.mean_accepted_intensity == pytest.approx(15.0)
    assert math.isnan(_report([0.1], accepted = [False]).mean_accepted_intensity)


# -------------------------
# OUTPUT FILES
# -------------------------

def test_save_design_images(tmp_path, digit_stack):
    written = save_design_images(tmp_path, digit_stack[:2], [4, 9], png = True)

    assert (tmp_path / "design_00004.pgm").is_file()
    assert (tmp_path / "design_00009.png").is_file()
    assert (tmp_path / "accepted_grid.pgm").is_file()
    np.testing.assert_array_equal(load_idx(tmp_path / "accepted.idx"), digit_stack[:2])
    assert len(written) == 6


def test_save_snapshot_grids(tmp_path, digit_stack):
    paths = save_snapshot_grids(tmp_path, {10 : digit_stack, 2 : digit_stack})

    assert [path.name for path in paths] == ["snapshot_step0002.pgm", "snapshot_step0010.pgm"]


# -------------------------
# FEM VALIDATION
# -------------------------

def test_validation_with_no_designs(small_bitmap):
    table = validate_with_fem(small_bitmap.values[None], _target(1.0).behavior, k = 0, normalization = 1.0)

    assert table.empty
    assert list(table.columns) == VALIDATION_COLUMNS


def test_negative_validation_count(small_bitmap):
    with pytest.raises(ConfigurationError):
        validate_with_fem(small_bitmap.values[None], _target(1.0).behavior, k = -1, normalization = 1.0)


def test_validation_reproduces_fem_curve(small_bitmap):
    schedule = LoadSchedule(np.linspace(0.0, 1.0, 3))
    raw      = run_uniaxial_extension(to_property_field(small_bitmap), schedule, subdivision = 1)
    target   = run_uniaxial_extension(to_property_field(small_bitmap), schedule, subdivision = 1, normalization = raw.energies[-1])
    table    = validate_with_fem(small_bitmap.values[None], target, k = 1, normalization = raw.energies[-1],
                                 sample_ids = [17], surrogate_mse = [0.5], subdivision = 1)

    assert table["sample_id"].tolist() == [17]
    assert table["fem_mse"].iloc[0] == 0.0
    assert bool(table["converged"].iloc[0])
    assert table["surrogate_mse"].iloc[0] == 0.5


def test_validation_records_non_convergence(monkeypatch, digit_stack):
    def fake_solver(field, schedule, subdivision, settings, normalization = None, dump_dir = None):
        if field.bitmap.values.mean() > 100:
            raise NonConvergenceError("stalled", residual_norm = 1.0, step = 3)

        return EnergyCurve(schedule.displacements, np.zeros(len(schedule.displacements)))

    monkeypatch.setattr("src.pipeline.validation.run_uniaxial_extension", fake_solver)

    images      = np.stack([np.zeros((28, 28), dtype = np.uint8), np.full((28, 28), 255, dtype = np.uint8)])
    table       = validate_with_fem(images, _target(1.0, level = 0.1).behavior, k = 5, normalization = 1.0)

    assert table["converged"].tolist() == [True, False]
    assert table["fem_mse"].iloc[0] == pytest.approx(0.01)
    assert math.isnan(table["fem_mse"].iloc[1])
    assert "stalled" in table["error"].iloc[1]


def test_discrepancy_summary():
    table   = pd.DataFrame({"sample_id"     : [0, 1, 2, 3],
                            "surrogate_mse" : [0.1, 0.2, 0.3, 0.4],
                            "fem_mse"       : [0.15, 0.25, 0.9, math.nan],
                            "converged"     : [True, True, True, False],
                            "error"         : ["", "", "", "stalled"],
                            })
    summary = discrepancy_summary(table, limit = 0.1)

    assert summary["validated"] == 4
    assert summary["converged"] == 3
    assert summary["spearman"] == pytest.approx(1.0)
    assert summary["within_3x_limit"] == pytest.approx(2.0 / 3.0)
    assert summary["mean_abs_gap"] == pytest.approx((0.05 + 0.05 + 0.6) / 3.0)


def test_discrepancy_summary_single_row():
    table = pd.DataFrame({"sample_id" : [0], "surrogate_mse" : [0.1], "fem_mse" : [0.2], "converged" : [True], "error" : [""]})

    assert math.isnan(discrepancy_summary(table, limit = 0.1)["spearman"])
