import numpy as np

from face4d.gradcheck import SUITES, check_block, relative_error, run_gradcheck


def test_relative_error_floor():
    # tiny entries are compared against 1e-3 of the largest gradient entry
    assert relative_error(np.array([1e-9]), np.array([0.0]), scale=1.0) == 1e-6
    assert relative_error(np.array([2.0]), np.array([1.0]), scale=1.0) == 0.5


def test_check_block_flags_wrong_gradient(rng):
    x = rng.normal(size=6)

    def f(v):
        return float(np.sum(v ** 3))

    good = 3 * x ** 2
    assert check_block(f, x, good, 1e-6, rng) <= 1e-7
    assert check_block(f, x, 1.01 * good, 1e-6, rng) > 1e-3


def test_quick_run_covers_every_suite():
    report = run_gradcheck(seeds=range(2), n=120, image_size=48)
    assert sorted({r.name for r in report.results}) == sorted(SUITES)
    assert {r.seed for r in report.results} == {0, 1}
    worst = report.worst()
    assert report.passed, worst
    assert all(worst[s] <= 1e-4 for s in SUITES)
