import csv
import json

import numpy as np
import pytest

from s2lab.audit import AuditConfig, AuditReport, PipelineError, c2_proxy, run_full_pipeline, run_independence_experiment
from s2lab.field_core import Grid
from s2lab.manufactured import manufactured_case


def strip(rows):
    return [{k: v for k, v in r.items() if k != "artifacts"} for r in rows]


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        AuditConfig(h_list=[1 / 16])
    with pytest.raises(ValueError):
        AuditConfig(sweep=[])
    with pytest.raises(ValueError):
        AuditConfig.from_dict({"bogus": 1})
    cfg = AuditConfig(tube_radius=0.5)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert AuditConfig.from_json(p) == cfg
    assert AuditConfig().radius == pytest.approx(1 / 6)


def test_c2_proxy_tracks_closed_form():
    g = Grid.box(3, 1.25, 1 / 16)
    for k in (1, 16):
        case = manufactured_case("f_oscillatory_family", {"k": k})
        v = c2_proxy(case._f, g, g.ball(1.0))["value"]
        assert v == pytest.approx(case.f_c2_bound * np.sin(1.0) if k == 1 else case.f_c2_bound, rel=0.02)


@pytest.fixture(scope="module")
def independence(tmp_path_factory):
    out = tmp_path_factory.mktemp("ind")
    cfg = AuditConfig(h_list=[1 / 8, 1 / 16], sweep=[1, 8, 64], out_dir=str(out))
    return cfg, run_independence_experiment(cfg)


def test_independence_report_and_artifacts(independence):
    cfg, rep = independence
    out = cfg.out_dir
    s = rep.summary
    assert s["complete"] and s["lip_ok"] and s["all_convex"] and s["spread_ok"]
    assert s["c2_ratio"] == pytest.approx(64 / np.sin(1.0), rel=0.05)
    with open(f"{out}/rows.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 6
    back = AuditReport.from_json(open(f"{out}/report.json").read())
    assert back.summary["passed"] == rep.passed
    assert back.rows == json.loads(rep.to_json())["rows"]
    man = json.load(open(f"{out}/manifest.json"))
    assert "report.json" in man["files"] and "members/k64_h16/u.fld" in man["files"]
    assert len(s["control"]["lap_u0"]) == 2


def test_independence_is_deterministic(independence):
    cfg, rep = independence
    again = run_independence_experiment(AuditConfig(**{**cfg.to_dict(), "out_dir": None}))
    assert strip(again.rows) == strip(rep.rows)


def test_out_of_hypothesis_members_are_routed(tmp_path):
    cfg = AuditConfig(family="paraboloid_perturbed", sweep=[{"eps": 0.1}, {"eps": 2.0}], h_list=[1 / 8, 1 / 16],
                      tube_radius=0.5, half_width=1.5, strict=False, out_dir=str(tmp_path))
    rep = run_full_pipeline(cfg)
    assert [r["param"] for r in rep.out_of_hypothesis] == [{"eps": 2.0}] * 2
    assert rep.out_of_hypothesis[0]["stage"] == "data"
    assert len(rep.rows) == 2
    assert all(r["w2p_valid"] and r["boundary_jacobi_pass"] for r in rep.rows)
    assert (tmp_path / "plot_rho.csv").exists()


def test_strict_pipeline_raises_on_unfit_box():
    cfg = AuditConfig(family="quadratic", sweep=[{}], h_list=[1 / 8, 1 / 16], tube_radius=0.5)
    with pytest.raises(PipelineError) as exc:
        run_full_pipeline(cfg)
    assert exc.value.stage
