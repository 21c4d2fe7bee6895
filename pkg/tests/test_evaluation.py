import json
import math
import os

import numpy as np
import pytest
import yaml
from scipy.spatial.transform import Rotation

from bevloop import evaluation
from bevloop.constellation import Se2Transform
from bevloop.dataset import se2_to_pose
from bevloop.evaluation import (
    FN,
    FP,
    SKIPPED,
    TN,
    TP,
    EvalConfig,
    LabeledLog,
    Prediction,
    PredictionLog,
    classify,
    evaluate,
    fp_error_distribution,
    mpe_stats,
    pr_curve,
    project_se2,
    read_timing_csv,
    relative_pose,
    summarize_timings,
    write_report,
    write_timing_csv,
)
from bevloop.utils import STAGES, ConfigError, DataFormatError, SchemaError

CFG = EvalConfig(l3=5.0, exclusion_window=0)
# 0 and 2 are 1 m apart, as are 1 and 4; 5 revisits 0
XS = [0.0, 100.0, 1.0, 200.0, 101.0, 0.5]
GT = [se2_to_pose(Se2Transform(0.0, (x, 0.0))) for x in XS]


@pytest.fixture()
def dirname(tmp_path):
    yield str(tmp_path)


def mixed_log(score=0.9):
    return PredictionLog(
        [
            Prediction(2, 0, score, Se2Transform(0.0, (-1.0, 0.0))),
            Prediction(4, 1, score, Se2Transform(0.0, (-1.0, 0.0))),
            Prediction(3, 0, score, Se2Transform(0.0, (-200.0, 0.0))),
            Prediction(5),
        ]
    )


def test_eval_config():
    with pytest.raises(ConfigError):
        EvalConfig(l3=0)
    assert EvalConfig(threshold_sweep=[1, 0.5]).threshold_sweep == (1.0, 0.5)


def test_classify():
    pose = Se2Transform.identity()
    assert classify(Prediction(2, 0, 0.9, pose), GT, CFG, 0.5) == TP
    assert classify(Prediction(3, 0, 0.9, pose), GT, CFG, 0.5) == FP
    assert classify(Prediction(2), GT, CFG, 0.5) == FN
    assert classify(Prediction(2, 0, 0.3, pose), GT, CFG, 0.5) == FN
    assert classify(Prediction(3), GT, CFG, 0.5) == TN
    assert classify(Prediction(0), GT, CFG, 0.5) == TN
    assert classify(Prediction(1), GT[:1] + [None] + GT[2:], CFG, 0.5) == SKIPPED


def test_classify_exclusion_window():
    cfg = EvalConfig(l3=5.0, exclusion_window=3)
    # pose 0 is within the window of query 2, so nothing counts as a revisit
    assert classify(Prediction(2), GT, cfg, 0.5) == TN
    assert classify(Prediction(5), GT, cfg, 0.5) == FN


def test_pr_curve_example():
    labeled = LabeledLog(mixed_log(), GT, CFG)
    assert labeled.counts(0.9) == {TP: 2, FP: 1, FN: 1, TN: 0, SKIPPED: 0}
    curve = pr_curve(labeled, CFG)
    assert len(curve.points) == 1
    point = curve.points[0]
    assert point.precision == pytest.approx(2 / 3)
    assert point.recall == pytest.approx(2 / 3)
    assert curve.max_f1 == pytest.approx(2 / 3)
    assert curve.best_threshold == 0.9


def test_pr_curve_sweep():
    log = mixed_log()
    log.entries[2] = log.entries[2]._replace(score=0.5)
    curve = pr_curve(LabeledLog(log, GT, CFG), CFG)
    assert [p.threshold for p in curve.points] == [0.5, 0.9]
    assert curve.max_f1 == pytest.approx(0.8)
    assert curve.best_threshold == 0.9
    recalls = [p.recall for p in curve.points]
    assert recalls == sorted(recalls, reverse=True)

    fixed = EvalConfig(l3=5.0, exclusion_window=0, threshold_sweep=(0.0, 0.95))
    curve = pr_curve(LabeledLog(log, GT, fixed), fixed)
    assert [p.threshold for p in curve.points] == [0.0]


def test_pr_curve_perfect_and_duplicated():
    perfect = PredictionLog(mixed_log().entries[:2])
    assert pr_curve(LabeledLog(perfect, GT, CFG), CFG).max_f1 == 1.0

    log = mixed_log()
    doubled = PredictionLog(log.entries + log.entries)
    labeled = LabeledLog(doubled, GT, CFG)
    assert pr_curve(labeled, CFG).max_f1 == pytest.approx(
        pr_curve(LabeledLog(log, GT, CFG), CFG).max_f1
    )
    assert sum(labeled.counts(0.9).values()) == len(doubled)


def test_pr_curve_without_positives():
    log = PredictionLog([Prediction(1), Prediction(3)])
    curve = pr_curve(LabeledLog(log, GT, CFG), CFG)
    assert curve.max_f1 == 0.0
    assert curve.best_threshold is None
    assert curve.points[0].threshold == math.inf


def test_relative_pose_invariant_to_world_frame():
    rng = np.random.default_rng(0)
    poses = []
    for _ in range(2):
        theta = rng.uniform(-3, 3)
        poses.append(se2_to_pose(Se2Transform(theta, rng.normal(size=2))))
    world = se2_to_pose(Se2Transform(1.1, (50.0, -20.0)))
    moved = [world @ pose for pose in poses]
    np.testing.assert_allclose(
        relative_pose(poses, 0, 1), relative_pose(moved, 0, 1), atol=1e-10
    )


def test_project_se2():
    pose = se2_to_pose(Se2Transform(0.4, (1.0, 2.0)))
    transform, tilt, flagged = project_se2(pose)
    assert transform.theta == pytest.approx(0.4)
    np.testing.assert_allclose(transform.t, [1.0, 2.0])
    assert tilt == pytest.approx(0.0, abs=1e-6)
    assert not flagged

    tilted = pose.copy()
    roll = Rotation.from_euler("x", 5, degrees=True).as_matrix()
    tilted[:3, :3] = tilted[:3, :3] @ roll
    transform, tilt, flagged = project_se2(tilted)
    assert tilt == pytest.approx(5.0)
    assert flagged
    assert transform.theta == pytest.approx(0.4, abs=1e-2)


def test_mpe_stats():
    log = PredictionLog(
        [
            Prediction(2, 0, 0.9, Se2Transform(math.radians(0.5), (-0.8, 0.0))),
            Prediction(3, 0, 0.9, Se2Transform(0.0, (0.0, 0.0))),
        ]
    )
    stats = mpe_stats(log, GT, CFG, 0.5)
    assert stats.count == 1
    assert stats.mean_trans_m == pytest.approx(0.2)
    assert stats.rmse_trans_m == pytest.approx(0.2)
    assert stats.mean_rot_deg == pytest.approx(0.5)
    assert stats.rmse_rot_deg == pytest.approx(0.5)
    assert not stats.empty

    assert mpe_stats(PredictionLog([Prediction(3)]), GT, CFG, 0.5).empty


def test_fp_error_distribution():
    log = PredictionLog(
        [
            Prediction(3, 0, 0.9, Se2Transform(math.radians(0.5), (-199.5, 0.0))),
            Prediction(4, 0, 0.9, Se2Transform(0.0, (0.0, 0.0))),
        ]
    )
    fp = fp_error_distribution(log, GT, CFG, 0.5)
    assert len(fp.errors) == 2
    assert fp.errors[0] == pytest.approx((0.5, 0.5))
    assert fp.fraction_in_box == 0.5

    none = fp_error_distribution(PredictionLog([Prediction(3)]), GT, CFG, 0.5)
    assert none.errors == [] and none.fraction_in_box is None


def test_prediction_csv_roundtrip(dirname):
    path = os.path.join(dirname, "predictions.csv")
    log = mixed_log(score=0.123456789012)
    log.write_csv(path)
    with open(path) as fd:
        lines = fd.read().splitlines()
    assert lines[0] == "query_id,candidate_id,score,tx_m,ty_m,yaw_rad"
    assert lines[-1] == "5,,,,,"

    read = PredictionLog.read_csv(path)
    assert [e.query_id for e in read] == [2, 4, 3, 5]
    assert [e.candidate_id for e in read] == [0, 1, 0, None]
    assert read.entries[0].score == pytest.approx(0.123456789, rel=1e-8)
    np.testing.assert_allclose(read.entries[2].pose.t, [-200.0, 0.0])


def test_prediction_csv_schema(dirname):
    path = os.path.join(dirname, "predictions.csv")
    with open(path, "w") as fd:
        fd.write("query_id,candidate_id,tx_m,ty_m,yaw_rad\n1,,,,\n")
    with pytest.raises(SchemaError) as e:
        PredictionLog.read_csv(path)
    assert "'score'" in str(e.value)

    with open(path, "w") as fd:
        fd.write("query_id,candidate_id,score,tx_m,ty_m,yaw_rad,extra\n")
    with pytest.raises(SchemaError) as e:
        PredictionLog.read_csv(path)
    assert "'extra'" in str(e.value)

    with open(path, "w") as fd:
        fd.write("query_id,candidate_id,score,tx_m,ty_m,yaw_rad\n1,0,high,0,0,0\n")
    with pytest.raises(DataFormatError) as e:
        PredictionLog.read_csv(path)
    assert e.value.line == 2


def test_timing_csv(dirname):
    path = os.path.join(dirname, "timing.csv")
    rows = [
        (0, {stage: 1.0 for stage in STAGES}),
        (1, {stage: 3.0 for stage in STAGES}),
    ]
    write_timing_csv(path, rows)
    read = read_timing_csv(path)
    assert read[1]["total_ms"] == pytest.approx(3.0 * len(STAGES))
    summary = summarize_timings(read)
    assert summary["retrieval_ms"] == {"mean": 2.0, "max": 3.0}


def test_evaluate_and_report(dirname):
    report = evaluate(mixed_log(), GT, CFG)
    assert report.n_queries == 4
    assert report.curve.max_f1 == pytest.approx(2 / 3)
    assert report.counts[TP] == 2
    assert report.mpe.count == 2
    assert report.mpe.mean_trans_m == pytest.approx(0.0, abs=1e-9)

    write_report(report, dirname)
    with open(os.path.join(dirname, "summary.yaml")) as fd:
        summary = yaml.safe_load(fd)
    assert summary["max_f1"] == pytest.approx(2 / 3)
    assert summary["counts"]["FP"] == 1
    with open(os.path.join(dirname, "report.json")) as fd:
        data = json.load(fd)
    assert len(data["pr_curve"]) == 1
    with open(os.path.join(dirname, "pr_curve.csv")) as fd:
        assert fd.readline().strip() == "threshold,precision,recall,f1"


def test_evaluate_errors():
    with pytest.raises(ValueError):
        evaluate(PredictionLog(), GT, CFG)
    with pytest.raises(DataFormatError):
        evaluate(PredictionLog([Prediction(2, 17, 0.5, Se2Transform())]), GT, CFG)
    with pytest.raises(DataFormatError):
        evaluate(PredictionLog([Prediction(6)]), GT, CFG)


def test_evaluate_long_sequence_reuses_positions(mocker):
    xs = [10.0 * k for k in range(200)] + [0.5]
    gt = [se2_to_pose(Se2Transform(0.0, (x, 0.0))) for x in xs]
    entries = [Prediction(k) for k in range(200)]
    entries.append(Prediction(200, 0, 0.9, Se2Transform(0.0, (-0.5, 0.0))))
    spy = mocker.spy(evaluation, "positions")
    report = evaluate(PredictionLog(entries), gt, CFG)
    assert spy.call_count == 1
    assert report.counts[TP] == 1
    assert report.counts[TN] == 200
    assert report.curve.max_f1 == 1.0
    assert report.mpe.count == 1
