import json

import numpy as np
import pytest

from spritz.dataio import (CheckpointError, CsvSchema, DataError, Dataset, Example, FeatureRow, Manifest,
                           NormStats, class_template, load_checkpoint, load_csv, rows_to_dataset,
                           save_checkpoint, synth_dataset, to_grid, write_csv)
from spritz.models import EnsembleModel, build_autoencoder, build_cnn2c, build_combiner


def small_rows(n=6, width=5, seed=0):
    rng = np.random.default_rng(seed)
    return [FeatureRow(rng.normal(size=width), int(i % 2)) for i in range(n)]


def test_csv_round_trip(tmp_path):
    schema = CsvSchema(5)
    rows = small_rows()
    write_csv(rows, tmp_path / "d.csv", schema)
    assert load_csv(tmp_path / "d.csv", schema) == rows


def test_csv_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b,label\n1,2,0\n1,x,1\n")
    with pytest.raises(DataError, match="line 3"):
        load_csv(p, CsvSchema(2))
    p.write_text("a,b,label\n1,2,0\n1,2\n")
    with pytest.raises(DataError, match="line 3"):
        load_csv(p, CsvSchema(2))
    p.write_text("a,b,label\n1,2,maybe\n")
    with pytest.raises(DataError, match="line 2"):
        load_csv(p, CsvSchema(2))
    with pytest.raises(DataError, match="feature columns"):
        load_csv(p, CsvSchema(3))
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "missing.csv", CsvSchema(2))


def test_grid_endpoints_and_degenerate_feature():
    rows = [FeatureRow(np.array([0.0, 5.0, 2.0]), 0), FeatureRow(np.array([10.0, 5.0, 4.0]), 1)]
    stats = NormStats.fit(rows)
    lo = to_grid(rows[0], stats).grid.reshape(-1)
    hi = to_grid(rows[1], stats).grid.reshape(-1)
    assert lo[0] == 0.0 and hi[0] == 255.0
    assert lo[1] == 0.0 and hi[1] == 0.0
    # cyclic tiling repeats the width-3 vector across all 4096 cells
    assert np.array_equal(hi[:3], hi[3:6]) and hi.size == 4096
    padded = to_grid(rows[1], stats, mode="pad").grid.reshape(-1)
    assert np.array_equal(padded[:3], hi[:3]) and not padded[3:].any()


def test_grid_clamps_out_of_range_values():
    stats = NormStats(np.array([0.0]), np.array([1.0]))
    g = to_grid(FeatureRow(np.array([2.0]), 0), stats).grid
    assert g.max() == 255.0


def test_stats_come_from_training_rows_only(tmp_path):
    rows = small_rows(10)
    train = rows[:6]
    stats = NormStats.fit(train)
    again = NormStats.fit(train)
    assert np.array_equal(stats.minimum, again.minimum) and np.array_equal(stats.maximum, again.maximum)
    ds = rows_to_dataset(rows[6:], stats)
    assert len(ds) == 4 and ds.x.min() >= 0 and ds.x.max() <= 255


def test_manifest(tmp_path):
    schema = CsvSchema(5)
    write_csv(small_rows(8), tmp_path / "a.csv", schema)
    (tmp_path / "m.json").write_text(json.dumps({"paths": ["a.csv"], "width": 5, "subsample": 4}))
    m = Manifest.load(tmp_path / "m.json")
    assert len(m.rows()) == 4
    with pytest.raises(FileNotFoundError):
        Manifest.load(tmp_path / "nope.json")


def test_example_validation():
    with pytest.raises(DataError):
        Example(np.zeros((8, 8)), 0)
    with pytest.raises(DataError):
        Example(np.full((64, 64), 300.0), 0)
    with pytest.raises(DataError):
        Example(np.zeros((64, 64)), 2)


def test_synthetic_data_is_separable_by_template_difference():
    ds = synth_dataset(200, difficulty=0.0, seed=3)
    w = class_template(1) - class_template(0)
    proj = (ds.x * w).sum(axis=(1, 2))
    assert proj[ds.y == 0].max() < 0 < proj[ds.y == 1].min()
    assert ds.x.min() >= 0 and ds.x.max() <= 255
    assert np.array_equal(ds.x, synth_dataset(200, 0.0, 3).x)


def test_dataset_save_load(tmp_path):
    ds = synth_dataset(3, 0.5, 1)
    ds.save(tmp_path / "d.npz")
    back = Dataset.load(tmp_path / "d.npz")
    assert np.array_equal(back.x, ds.x) and back.ids == ds.ids


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    g = build_cnn2c(seed=4)
    x = synth_dataset(2, 0.0, 0).x
    save_checkpoint(g, tmp_path / "g.spz")
    back = load_checkpoint(tmp_path / "g.spz", expected=build_cnn2c(seed=9))
    assert np.array_equal(back.predict(x), g.predict(x))


def test_ensemble_checkpoint_keeps_thresholds(tmp_path):
    e = EnsembleModel(build_cnn2c(0), build_autoencoder(1, "leg"), build_autoencoder(2, "mal"),
                      build_combiner(3), 12.5, 40.25, True)
    save_checkpoint(e, tmp_path / "e.spz")
    back = load_checkpoint(tmp_path / "e.spz")
    assert (back.leg_threshold, back.mal_threshold, back.combiner_trained) == (12.5, 40.25, True)
    x = synth_dataset(1, 0.0, 0).x
    assert np.array_equal(back.predict_proba(x), e.predict_proba(x))


def test_checkpoint_detects_corruption_and_mismatch(tmp_path):
    g = build_combiner(0)
    p = save_checkpoint(g, tmp_path / "c.spz")
    with pytest.raises(CheckpointError, match="descriptor"):
        load_checkpoint(p, expected=build_cnn2c(0))
    blob = bytearray(p.read_bytes())
    blob[100] ^= 0xFF
    p.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(p)
    (tmp_path / "junk.spz").write_bytes(b"hello")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.spz")
