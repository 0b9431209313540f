import json
from argparse import Namespace

import numpy as np
import pytest

from morphflow.basis import enumerate_basis
from morphflow.cli import (RunConfig, basis_grid, check_field, cmd_morph, cmd_register,
                           field_text, main, read_config_file, read_field, resolve_config,
                           write_field)
from morphflow.domain import Mesh, PointCloud, load_shape, pca_align, fit_domain, write_shape
from morphflow.errors import ConfigError, FieldMismatch, ParseError
from morphflow.flow import mesh_volume
from shapes import lumpy_mesh, sphere_mesh

FAST = ["--basis-k", "20", "--steps", "5", "--downsample", "120", "--max-iters", "15",
        "--sigma2", "1e-3", "--descriptor-mode", "none"]


def _box_surface(n, sides=(1.0, 0.8, 0.6), seed=0):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-0.5, 0.5, (n, 3))
    axis = rng.integers(0, 3, n)
    pts[np.arange(n), axis] = np.sign(pts[np.arange(n), axis]) * 0.5
    return pts * np.array(sides)


@pytest.fixture
def lumpy_file(tmp_path):
    path = tmp_path / "lumpy.off"
    write_shape(path, lumpy_mesh(400))
    return path


class TestConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert (cfg.sigma2, cfg.steps, cfg.basis_k, cfg.downsample, cfg.huber_r0) == \
            (0.01, 20, 3000, 3000, 0.01)

    def test_precedence(self, tmp_path):
        conf = tmp_path / "run.conf"
        conf.write_text("# comment\nsigma2 = 0.5\nsteps=7  # inline\nbasis_exponent = none\n")
        args = Namespace(config=str(conf), sigma2=None, steps=3)
        cfg = resolve_config(args)
        assert cfg.sigma2 == 0.5 and cfg.steps == 3 and cfg.basis_exponent is None

    def test_unknown_key(self, tmp_path):
        conf = tmp_path / "run.conf"
        conf.write_text("sigma=1\n")
        with pytest.raises(ParseError, match="line 1"):
            read_config_file(conf)

    @pytest.mark.parametrize("bad", [{"sigma2": 0.0}, {"descriptor_mode": "fpfh"},
                                     {"margin": 0.5}, {"steps": 0}, {"dim": 4}])
    def test_validation(self, bad):
        with pytest.raises(ConfigError):
            RunConfig(**bad)


class TestFieldFile:
    def test_round_trip_is_byte_identical(self, tmp_path, rng):
        basis = enumerate_basis(3, 12)
        a = rng.standard_normal(12) * 1e-3
        write_field(tmp_path / "f.txt", basis, a)
        dim, modes, back = read_field(tmp_path / "f.txt")
        assert dim == 3 and modes == basis.modes and np.array_equal(back, a)
        assert field_text(basis, back) == (tmp_path / "f.txt").read_text()

    def test_header(self, tmp_path):
        write_field(tmp_path / "f.txt", enumerate_basis(2, 2), np.array([0.5, -0.25]))
        assert (tmp_path / "f.txt").read_text().splitlines() == \
            ["MORPHFLOW-FIELD v1 D=2 K=2", "1 1 1 0.5", "1 2 1 -0.25"]

    def test_mismatch(self, tmp_path):
        write_field(tmp_path / "f.txt", enumerate_basis(3, 12), np.zeros(12))
        dim, modes, _ = read_field(tmp_path / "f.txt")
        with pytest.raises(FieldMismatch):
            check_field(enumerate_basis(3, 10), dim, modes)
        with pytest.raises(FieldMismatch):
            check_field(enumerate_basis(2, 12), dim, modes)

    def test_count_disagrees_with_header(self, tmp_path):
        (tmp_path / "f.txt").write_text("MORPHFLOW-FIELD v1 D=2 K=3\n1 1 0 0.5\n")
        with pytest.raises(ParseError):
            read_field(tmp_path / "f.txt")


class TestRegister:
    def test_identity_box(self, tmp_path):
        path = tmp_path / "box.off"
        write_shape(path, PointCloud(_box_surface(300)))
        cfg = RunConfig(basis_k=20, steps=5, downsample=150, sigma2=1e-3, descriptor_mode="none")
        result = cmd_register(cfg, path, path, tmp_path / "out")
        assert np.linalg.norm(result.coefficients) < 1e-3
        assert np.array_equal(result.correspondences[:, 1], np.arange(300))
        _, _, a = read_field(result.outputs["field"])
        assert np.linalg.norm(a) < 1e-3

    def test_outputs_and_manifest(self, tmp_path, lumpy_file):
        out = tmp_path / "out"
        assert main(["register", str(lumpy_file), str(lumpy_file), "-o", str(out)] + FAST) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["basis_k"] == 20 and manifest["samples"]["source"] == 120
        energies = (out / "energy.csv").read_text().splitlines()
        assert energies[0] == "iteration,energy,halvings"
        assert len(energies) == manifest["em"]["iterations"] + 2
        matches = (out / "correspondences.csv").read_text().splitlines()
        assert matches[0] == "source_index,target_index" and len(matches) == 401
        assert load_shape(out / "registered.off").faces.shape[0] > 0

    def test_shot_descriptors_identity(self, tmp_path, lumpy_file):
        cfg = RunConfig(basis_k=20, steps=5, downsample=150, sigma2=1e-3, max_iters=10,
                        descriptor_radius=0.2)
        result = cmd_register(cfg, lumpy_file, lumpy_file, tmp_path / "out")
        assert np.linalg.norm(result.coefficients) < 1e-3

    def test_missing_input(self, tmp_path, capsys):
        missing = tmp_path / "nope.off"
        assert main(["register", str(missing), str(missing), "-o", str(tmp_path)]) == 2
        assert str(missing) in capsys.readouterr().err

    def test_shot_needs_3d(self, tmp_path):
        path = tmp_path / "tri.off"
        path.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 0.5 0\n3 0 1 2\n")
        assert main(["register", str(path), str(path), "-o", str(tmp_path / "o"), "--dim", "2"]) == 2

    def test_deterministic(self, tmp_path, lumpy_file):
        target = tmp_path / "target.off"
        mesh = lumpy_mesh(400)
        write_shape(target, Mesh(mesh.cloud.with_points(mesh.points * [1.05, 1.0, 0.97]),
                                 mesh.faces))
        for name in ("a", "b"):
            assert main(["register", str(lumpy_file), str(target), "-o",
                         str(tmp_path / name)] + FAST) == 0
        for fname in ("field.txt", "correspondences.csv", "energy.csv", "registered.off"):
            assert (tmp_path / "a" / fname).read_bytes() == (tmp_path / "b" / fname).read_bytes()


class TestMorph:
    def test_time_zero_is_normalized_input(self, tmp_path, lumpy_file):
        write_field(tmp_path / "f.txt", enumerate_basis(3, 20), np.full(20, 1e-3))
        cfg = RunConfig(basis_k=20, steps=5)
        (path,) = cmd_morph(cfg, lumpy_file, lumpy_file, tmp_path / "f.txt", [0.0], tmp_path)
        src = load_shape(lumpy_file)
        aligned, _ = pca_align(src.cloud, src.cloud)
        normalized = fit_domain(aligned, aligned, cfg.margin).apply(aligned).points
        assert np.allclose(load_shape(path).points, normalized, rtol=0, atol=1e-9)

    def test_time_one_matches_register(self, tmp_path, lumpy_file):
        target = tmp_path / "target.off"
        mesh = lumpy_mesh(400)
        write_shape(target, Mesh(mesh.cloud.with_points(mesh.points * [1.05, 1.0, 0.97]),
                                 mesh.faces))
        out = tmp_path / "reg"
        assert main(["register", str(lumpy_file), str(target), "-o", str(out)] + FAST) == 0
        assert main(["morph", str(lumpy_file), str(target), str(out / "field.txt"), "-t",
                     "0.25", "0.5", "0.75", "1.0", "-o", str(tmp_path / "m")] + FAST) == 0
        files = sorted(p.name for p in (tmp_path / "m").iterdir())
        assert files == ["morph_t0.25.off", "morph_t0.5.off", "morph_t0.75.off", "morph_t1.off"]
        assert (tmp_path / "m" / "morph_t1.off").read_bytes() == \
            (out / "registered.off").read_bytes()

    def test_extrapolation_preserves_volume(self, tmp_path):
        src = tmp_path / "ball.off"
        ball = sphere_mesh(2000, radius=0.3)
        write_shape(src, Mesh(ball.cloud.with_points(ball.points * [1.3, 1.0, 0.8]), ball.faces))
        basis = enumerate_basis(3, 6)
        a = np.zeros(6)
        a[0] = 0.05  # lowest mode: a swirl about the cube center
        write_field(tmp_path / "f.txt", basis, a)
        cfg = RunConfig(basis_k=6, steps=20)
        p0, p13 = cmd_morph(cfg, src, src, tmp_path / "f.txt", [0.0, 1.3], tmp_path / "m")
        m0, m13 = load_shape(p0), load_shape(p13)
        assert np.abs(m13.points - m0.points).max() > 0.05
        v0, v13 = mesh_volume(m0.points, m0.faces), mesh_volume(m13.points, m13.faces)
        assert abs(v13 / v0 - 1) < 0.01

    def test_out_of_range_time(self, tmp_path, lumpy_file):
        write_field(tmp_path / "f.txt", enumerate_basis(3, 20), np.zeros(20))
        rc = main(["morph", str(lumpy_file), str(lumpy_file), str(tmp_path / "f.txt"), "-t",
                   "2.5", "-o", str(tmp_path)] + FAST)
        assert rc == 2

    def test_field_mismatch_exit_code(self, tmp_path, lumpy_file):
        write_field(tmp_path / "f.txt", enumerate_basis(3, 10), np.zeros(10))
        rc = main(["morph", str(lumpy_file), str(lumpy_file), str(tmp_path / "f.txt"), "-t",
                   "1", "-o", str(tmp_path)] + FAST)
        assert rc == FieldMismatch.exit_code

    def test_numerical_failure_exit_code(self, tmp_path, lumpy_file):
        write_field(tmp_path / "f.txt", enumerate_basis(3, 20), np.full(20, 1e307))
        rc = main(["morph", str(lumpy_file), str(lumpy_file), str(tmp_path / "f.txt"), "-t",
                   "1", "-o", str(tmp_path)] + FAST)
        assert rc == 3


class TestEvaluate:
    @pytest.fixture
    def path_mesh(self, tmp_path):
        path = tmp_path / "path.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 2 0 0\nv 3 0 0\nf 1 2 3\nf 2 3 4\n")
        return path

    def test_fixture_report(self, tmp_path, capsys):
        pts = np.column_stack([np.arange(4.0), np.zeros(4)])
        write_shape(tmp_path / "line.off", Mesh(PointCloud(pts), [[0, 1], [1, 2], [2, 3]]))
        (tmp_path / "truth.csv").write_text("source_index,target_index\n0,0\n1,1\n2,2\n3,3\n")
        (tmp_path / "pred.csv").write_text("0,0\n1,2\n2,2\n3,3\n")
        rc = main(["evaluate", str(tmp_path / "pred.csv"), str(tmp_path / "truth.csv"),
                   str(tmp_path / "line.off"), "--dim", "2", "--max-threshold", "0.5",
                   "--threshold-step", "0.25"])
        assert rc == 0
        # the one wrong match is one edge of a diameter-3 path away
        assert capsys.readouterr().out == ("threshold,percent\n0,75\n0.25,75\n0.5,100\n"
                                           "mean_error=0.08333333333\n")

    def test_perfect(self, tmp_path, path_mesh):
        (tmp_path / "m.csv").write_text("0,0\n1,1\n2,2\n3,3\n")
        out = tmp_path / "report.csv"
        assert main(["evaluate", str(tmp_path / "m.csv"), str(tmp_path / "m.csv"),
                     str(path_mesh), "-o", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert all(line.endswith(",100") for line in lines[1:-1])
        assert lines[-1] == "mean_error=0"

    def test_empty_matches(self, tmp_path, path_mesh):
        (tmp_path / "m.csv").write_text("source_index,target_index\n")
        (tmp_path / "t.csv").write_text("0,0\n")
        assert main(["evaluate", str(tmp_path / "m.csv"), str(tmp_path / "t.csv"),
                     str(path_mesh)]) == 2

    def test_index_out_of_range(self, tmp_path, path_mesh):
        (tmp_path / "m.csv").write_text("0,9\n")
        assert main(["evaluate", str(tmp_path / "m.csv"), str(tmp_path / "m.csv"),
                     str(path_mesh)]) == 2


class TestBasisInfo:
    def test_three_rows(self, capsys):
        assert main(["basis-info", "-K", "3"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "k,j1,j2,j3,component,laplace_eigenvalue,kl_weight"
        assert len(lines) == 4
        for line in lines[1:]:
            lap = float(line.split(",")[5])
            assert lap == pytest.approx(-3 * np.pi ** 2, rel=1e-15)

    @pytest.mark.parametrize("dim,k", [(2, 7), (3, 25)])
    def test_row_count(self, tmp_path, dim, k):
        out = tmp_path / "t.csv"
        assert main(["basis-info", "--dim", str(dim), "-K", str(k), "-o", str(out)]) == 0
        assert len(out.read_text().splitlines()) == k + 1

    def test_grid_is_divergence_free(self, tmp_path):
        out, grid = tmp_path / "t.csv", tmp_path / "g.csv"
        assert main(["basis-info", "-K", "3", "-o", str(out), "--grid", str(grid),
                     "--grid-size", "5"]) == 0
        data = np.loadtxt(grid, delimiter=",", skiprows=1)
        assert data.shape == (25, 6) and np.all(data[:, 2] == 0.5)
        basis = enumerate_basis(3, 3)
        h = 1e-5
        for p in data[:, :3]:
            div = 0.0
            for d in range(3):
                e = np.zeros(3)
                e[d] = h
                plus, _ = basis.values((p + e)[None])
                minus, _ = basis.values((p - e)[None])
                div += (plus[0, 0, d] - minus[0, 0, d]) / (2 * h)
            assert abs(div) < 1e-6

    def test_grid_entry_range(self):
        with pytest.raises(ConfigError):
            basis_grid(enumerate_basis(3, 3), 4, 5, 0.5)
