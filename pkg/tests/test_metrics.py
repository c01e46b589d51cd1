import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from evolvecast.errors import FormatError, MissingArtifact, ShapeError, UndefinedMetric
from evolvecast.metrics import (
    MetricReport,
    horizon_metrics,
    mae,
    mape,
    read_predictions,
    rmse,
    write_predictions,
)

finite = st.floats(-1e4, 1e4, allow_nan=False)


def test_hand_example():
    pred = [2.0, 4.0, 6.0, 8.0]
    truth = [2.0, 4.0, 8.0, 8.0]
    assert mae([1, 2], [2, 1]) == 1.0
    assert rmse([0, 0], [2, 0]) == math.sqrt(2)
    assert mape([3.0, 5.0], [4.0, 4.0]) == 25.0
    assert mae(pred, truth) == 0.5
    assert rmse(pred, truth) == 1.0


def test_mape_skips_zero_truth():
    assert mape([1.0, 5.0], [0.0, 4.0]) == 25.0
    with pytest.raises(UndefinedMetric):
        mape([1.0], [0.0])


def test_metric_errors():
    with pytest.raises(ShapeError):
        mae([1, 2], [1, 2, 3])
    with pytest.raises(UndefinedMetric):
        rmse([], [])


@given(arrays(np.float64, st.integers(1, 30), elements=finite), st.data())
def test_rmse_dominates_mae(pred, data):
    truth = data.draw(arrays(np.float64, pred.shape, elements=finite))
    assert rmse(pred, truth) >= mae(pred, truth) - 1e-9 * (1 + mae(pred, truth))


@given(arrays(np.float64, st.integers(1, 30), elements=finite), st.data(), st.floats(0.01, 100))
def test_homogeneity(pred, data, c):
    truth = data.draw(arrays(np.float64, pred.shape, elements=finite))
    assert mae(c * pred, c * truth) == pytest.approx(c * mae(pred, truth), rel=1e-9, abs=1e-9)
    assert rmse(c * pred, c * truth) == pytest.approx(c * rmse(pred, truth), rel=1e-9, abs=1e-9)
    keep = np.abs(truth) >= 1.0
    if keep.any():
        assert mape(c * pred[keep], c * truth[keep]) == pytest.approx(mape(pred[keep], truth[keep]), rel=1e-9)


def test_horizon_metrics_pick_single_steps(rng):
    truth = rng.uniform(10, 20, (4, 3, 1, 12))
    pred = truth.copy()
    pred[..., 5] += 2.0
    m = horizon_metrics(pred, truth)
    assert sorted(m) == [3, 6, 12]
    assert m[3][0] == 0.0 and m[12][0] == 0.0
    assert m[6][0] == pytest.approx(2.0) and m[6][1] == pytest.approx(2.0)
    assert sorted(horizon_metrics(pred[..., :6], truth[..., :6])) == [3, 6]


def test_report_round_trip(tmp_path, rng):
    truth = rng.uniform(50, 150, (5, 4, 1, 12))
    pred = truth + rng.normal(size=truth.shape)
    report = MetricReport("continual")
    report.add_period(2, pred, truth, epochs=7, nodes=4, train_seconds=1.25, per_epoch_seconds=0.5)
    report.add_period(2, pred[:, :2], truth[:, :2], subset="stable")
    path = tmp_path / "r.csv"
    report.write(path)
    back = MetricReport.read(path)
    assert back.scenario == "continual"
    assert len(back.rows) == 6
    for a, b in zip(report.rows, back.rows):
        assert (a.period, a.subset, a.horizon, a.mae, a.rmse, a.mape, a.epochs, a.nodes) == \
               (b.period, b.subset, b.horizon, b.mae, b.rmse, b.mape, b.epochs, b.nodes)
    assert back.select(subset="stable", horizon=6)[0].minutes == 30
    assert back.total_train_seconds() == 1.25
    for r in back.rows:
        assert r.rmse >= r.mae


def test_report_read_errors(tmp_path):
    with pytest.raises(MissingArtifact):
        MetricReport.read(tmp_path / "x.csv")
    bad = tmp_path / "bad.csv"
    bad.write_text("period,subset\n")
    with pytest.raises(FormatError):
        MetricReport.read(bad)


def test_report_to_stream():
    r = MetricReport("full")
    r.add_period(1, np.ones((1, 1, 1, 3)), np.full((1, 1, 1, 3), 2.0), horizons=(3,))
    buf = io.StringIO()
    r.write(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "# scenario=full"
    assert lines[2].startswith("1,all,3,15,1.0,1.0,50.0,")


def test_predictions_round_trip(tmp_path, rng):
    values = rng.normal(size=(3, 4, 1, 5))
    path = tmp_path / "p.csv"
    write_predictions(path, values, [9, 3, 4, 7])
    back, nodes = read_predictions(path)
    assert nodes == [3, 4, 7, 9]
    np.testing.assert_array_equal(back, values[:, [1, 2, 3, 0]])


def test_predictions_errors(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("window,node_id,step,value\n0,1,1,2.0\n0,1,2\n")
    with pytest.raises(FormatError) as info:
        read_predictions(p)
    assert info.value.line == 3
    p.write_text("window,node_id,step,value\n0,1,1,2.0\n0,2,2,1.0\n")
    with pytest.raises(FormatError):
        read_predictions(p)
