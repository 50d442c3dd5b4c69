import csv

import numpy as np

from virnet import distributions as D
from virnet import tensor as T
from virnet import verify


def test_fresh_build_passes_everything():
    results = verify.run_all(seed=0)
    failed = [r.name for r in results if not r.passed]
    assert not failed
    names = {r.name for r in results}
    assert {"kl.gaussian_vs_mc", "kl.inverse_gamma_vs_mc", "grad.neg_elbo_denoise", "grad.neg_elbo_sr"} <= names
    assert any(n.startswith("specfun.") for n in names)
    assert any(n.startswith("degradation.") for n in names)
    assert len([n for n in names if n.startswith("grad.")]) >= len(verify.op_cases(np.random.default_rng(0)))


def test_perturbed_kl_constant_is_caught():
    def shifted_kl_inverse_gamma(q, prior):
        # an extra 0.05 nats per pixel, as a wrong normalising constant would add
        return D.kl_inverse_gamma(q, prior) + T.sum(q.alpha * 0.0 + 0.05)

    results = verify.run_all(seed=0, kl_inverse_gamma=shifted_kl_inverse_gamma)
    by_name = {r.name: r for r in results}
    assert not by_name["kl.inverse_gamma_vs_mc"].passed
    assert by_name["kl.gaussian_vs_mc"].passed
    report = verify.format_report(results)
    assert "failed: kl.inverse_gamma_vs_mc" in report


def test_report_lists_each_error(tmp_path):
    results = verify.run_all(seed=1, kl_draws=3, kl_samples=50_000, instances=3)
    report = verify.format_report(results)
    for r in results:
        assert r.name in report
        assert f"{r.max_error:11.3e}" in report
    verify.write_report(results, tmp_path / "v.csv")
    rows = list(csv.DictReader((tmp_path / "v.csv").open()))
    assert [r["check"] for r in rows] == [r.name for r in results]
    assert all(float(row["max_error"]) == r.max_error for row, r in zip(rows, results))
