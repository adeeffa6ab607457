"""The gradient-check harness itself: error metric, corruption detection."""
from uception.gradcheck import (
    _check_conv,
    format_results,
    rel_error,
    run_suite,
)
from uception.ops import SAME


def test_rel_error_metric():
    assert rel_error(1.0, 1.0) == 0.0
    assert rel_error(0.0, 0.0) == 0.0
    assert float(rel_error(1.0, 1.0 + 1e-6)) < 1e-5
    assert float(rel_error(1.0, -1.0)) == 1.0


def test_conv_check_detects_corruption_directly():
    clean = _check_conv(3, 1, SAME, 2, 2, 6, corrupt=False)
    broken = _check_conv(3, 1, SAME, 2, 2, 6, corrupt=True)
    assert clean <= 1e-4 < broken


def test_corrupted_backward_reported_as_failing_layer():
    results = run_suite(corrupt="conv-5cube-same")
    failing = [r.name for r in results if not r.passed]
    assert failing == ["conv-5cube-same"]
    text = format_results(results)
    assert "FAIL\tconv-5cube-same" in text
