import json

import numpy as np
import pytest

from vaultopt import cli_io
from vaultopt.cli_io import (ConfigError, RunConfig, export_mesh, main, mesh_equilibrium_residual,
                             read_mesh, run)
from vaultopt.geometry import MemberArray

BASE = {"domain": {"type": "rectangle", "a": 1.0}, "nodes_per_side": 9,
        "loads": {"area": [-1.0]}}


def cfg(**kw):
    return RunConfig.from_dict({**BASE, **kw})


def test_nodes_per_side_sets_h():
    assert cfg().h == pytest.approx(1 / 8)


@pytest.mark.parametrize("bad", [
    {"mode": "sideways"},
    {"design": {"type": "elastic", "V0": -1.0, "E0": 1.0}},
    {"design": {"type": "elastic", "V0": 1.0}},
    {"variant": {"type": "dome"}},
    {"variant": {"type": "slanted"}},
    {"colour": "red"},
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        cfg(**bad)


def test_plastic_run_and_report(tmp_path):
    c = cfg(outputs={"mesh": str(tmp_path / "a.obj"), "report": str(tmp_path / "a.json")})
    rep, gs, el = run(c)
    assert rep.status == "Optimal" and el is None
    assert rep.grid == "9x9" and rep.full_gs == 81 * 80 // 2
    assert rep.Z == gs.Z
    back = json.loads((tmp_path / "a.json").read_text())
    assert back["Z"] == rep.Z
    assert f"Z={rep.Z:.6g}" in rep.table_row()
    assert mesh_equilibrium_residual(tmp_path / "a.obj") <= 1e-6


def test_mesh_is_byte_deterministic(tmp_path):
    c = cfg(design={"type": "elastic", "V0": 1.0, "E0": 1.0})
    _, gs, el = run(c, export=False)
    f = np.full(gs.grid.n, -1 / 64)
    export_mesh(gs, tmp_path / "a.obj", f, el)
    _, gs2, el2 = run(c, export=False)
    export_mesh(gs2, tmp_path / "b.obj", f, el2)
    assert (tmp_path / "a.obj").read_bytes() == (tmp_path / "b.obj").read_bytes()
    assert (tmp_path / "a.obj.json").read_bytes() == (tmp_path / "b.obj.json").read_bytes()
    V, L, side = read_mesh(tmp_path / "a.obj")
    assert len(L) == len(gs.members) and len(V) == gs.grid.nbar
    assert len(side["displacement"]) == gs.grid.nbar and len(side["strain"]) == len(L)


def test_empty_mesh(tmp_path):
    _, gs, _ = run(cfg(), export=False)
    gs.members = MemberArray.empty()
    gs.s_hat = gs.area = gs.length3d = np.zeros(0)
    export_mesh(gs, tmp_path / "e.obj")
    V, L, _ = read_mesh(tmp_path / "e.obj")
    assert len(V) == gs.grid.nbar and len(L) == 0


def test_elastic_checks():
    rep, gs, el = run(cfg(design={"type": "elastic", "V0": 3.0, "E0": 2.0}, mode="tension"),
                      export=False)
    e = rep.elastic
    assert rep.status == "Optimal"
    assert e["volume"] == pytest.approx(3.0, rel=1e-9)
    assert e["compliance"] == pytest.approx(e["compliance_expected"], rel=1e-6)


def test_gamma_supports_variant():
    pts = [[0, 0], [1, 0], [1, 1], [0, 1], [0.5, 0], [1, 0.5], [0.5, 1], [0, 0.5]]
    rep, gs, _ = run(cfg(variant={"type": "gamma_supports", "points": pts}), export=False)
    assert rep.status == "Optimal" and rep.free_nodes == 81 - 8
    base, _, _ = run(cfg(), export=False)
    assert rep.Z > base.Z


def test_cli_exit_codes(tmp_path, monkeypatch, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(BASE))
    mesh = tmp_path / "m.obj"
    assert main(["--config", str(path), "--export-mesh", str(mesh), "--tol", "1e-8"]) == 0
    assert mesh.exists() and "Optimal" in capsys.readouterr().out
    path.write_text(json.dumps({**BASE, "mode": "bad"}))
    assert main(["--config", str(path)]) == 1
    path.write_text(json.dumps(BASE))
    monkeypatch.setattr(cli_io, "colinearity_check", lambda *a, **k: [(0, 0)])
    assert main(["--config", str(path)]) == 2


def test_thread_env_override(monkeypatch):
    monkeypatch.setenv("VAULTOPT_THREADS", "3")
    seen = {}
    real = cli_io.member_adding_solve

    def spy(grid, domain, f, metric, opts):
        seen["threads"] = opts.threads
        return real(grid, domain, f, metric, opts)

    monkeypatch.setattr(cli_io, "member_adding_solve", spy)
    run(cfg(threads=1), export=False)
    assert seen["threads"] == 3
