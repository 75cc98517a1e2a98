import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from collabvpr import fileio
from collabvpr.cli import main
from collabvpr.simworld import fit_world_codebook

FIXTURES = Path(__file__).parent / "fixtures"
SAMPLE = FIXTURES / "sample"

NOISELESS = [
    "--set", "scene.num_places=40",
    "--set", "scene.latent_dim=16",
    "--set", "scene.descriptors_per_view=12",
    "--set", "scene.occlusion=0",
    "--set", "scene.viewpoint_noise=0",
    "--set", "scene.reference_noise=0",
    "--set", "scene.noise_per_meter=0",
    "--set", "scene.pose_jitter_m=0",
    "--set", "scene.max_distance_m=1",
    "--set", "num_clusters=4",
]


@pytest.fixture
def in_tmp(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def pipeline(capsys, extra=(), fusion="global", tag=""):
    """world -> fit -> build-db -> eval; returns the eval stdout."""
    w, cb, db = f"w{tag}", f"cb{tag}.cvpc", f"db{tag}.cvdb"
    steps = [
        ["world", *extra, "--out", w],
        ["fit", *extra, "--world", w, "--out", cb],
        ["build-db", *extra, "--world", w, "--codebook", cb, "--out", db],
    ]
    for argv in steps:
        code, _, err = run(capsys, *argv)
        assert code == 0, err
    code, out, err = run(capsys, "eval", *extra, "--world", w, "--codebook", cb, "--db", db, "--fusion", fusion, "--out", f"eval{tag}.csv")
    assert code == 0, err
    return out


class TestFit:
    def test_default_on_sample_data(self, in_tmp, capsys):
        code, out, _ = run(capsys, "fit", "--descriptors", str(SAMPLE), "--out", "cb.cvpc")
        assert code == 0
        assert out.startswith("K=32 d=16 ")
        cb = fileio.read_codebook("cb.cvpc")
        assert cb.centroids.shape == (32, 16) and cb.softness == 30.0
        meta = json.loads(Path("cb.cvpc.json").read_text())
        assert meta["config"]["num_clusters"] == 32

    def test_two_cluster_toy(self, in_tmp, capsys):
        fileio.write_descriptors("toy.cvpd", np.array([(0, 0), (0.1, 0), (5, 5), (5.1, 5)], dtype=float))
        code, out, _ = run(capsys, "fit", "--descriptors", "toy.cvpd", "-k", "2", "--out", "cb.cvpc")
        assert code == 0
        cents = sorted(map(tuple, fileio.read_codebook("cb.cvpc").centroids))
        np.testing.assert_allclose(cents, [(0.05, 0), (5.05, 5)], atol=1e-6)

    def test_missing_file(self, in_tmp, capsys):
        code, _, err = run(capsys, "fit", "--descriptors", "nope", "--out", "cb.cvpc")
        assert code == 2 and "not found" in err

    def test_insufficient_samples(self, in_tmp, capsys):
        fileio.write_descriptors("toy.cvpd", np.ones((3, 2)))
        code, _, err = run(capsys, "fit", "--descriptors", "toy.cvpd", "-k", "2", "--out", "cb.cvpc")
        assert code == 3 and "insufficient samples" in err


class TestBuildAndQuery:
    def test_build_db_from_descriptors_and_poses(self, in_tmp, capsys):
        run(capsys, "fit", "--descriptors", str(SAMPLE), "-k", "4", "--out", "cb.cvpc")
        code, out, _ = run(
            capsys, "build-db", "--descriptors", str(SAMPLE), "--poses", str(SAMPLE / "poses.csv"),
            "--codebook", "cb.cvpc", "--out", "db.cvdb",
        )
        assert code == 0 and out.startswith("database: 8 entries of length 64")
        db = fileio.read_database("db.cvdb")
        assert db.ids == tuple(range(8))

    def test_query_writes_rankings(self, in_tmp, capsys):
        pipeline(capsys, NOISELESS)
        code, _, _ = run(capsys, "query", *NOISELESS, "--world", "w", "--codebook", "cb.cvpc", "--db", "db.cvdb", "--k-top", "3", "--out", "q.csv")
        assert code == 0
        lines = Path("q.csv").read_text().splitlines()
        assert lines[0].startswith("# config: {") and lines[1] == "query,rank,place_id,score,x,y"
        assert len(lines) == 2 + 40 * 3

    def test_dimension_mismatch_exit_3(self, in_tmp, capsys):
        pipeline(capsys, NOISELESS)
        fileio.write_codebook("other.cvpc", fit_world_codebook(fileio.load_world("w"), num_clusters=5, seed=0))
        code, _, err = run(capsys, "eval", "--world", "w", "--codebook", "other.cvpc", "--db", "db.cvdb")
        assert code == 3 and "does not match" in err

    def test_corrupt_database_exit_2(self, in_tmp, capsys):
        pipeline(capsys, NOISELESS)
        Path("db.cvdb").write_bytes(b"CVDB\x01\x00")
        code, _, _ = run(capsys, "eval", "--world", "w", "--codebook", "cb.cvpc", "--db", "db.cvdb")
        assert code == 2

    def test_unknown_config_key_exit_3(self, in_tmp, capsys):
        code, _, err = run(capsys, "world", "--set", "scene.colour=1", "--out", "w")
        assert code == 3 and "unknown scene keys" in err

    def test_usage_error_exit_3(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["eval", "--no-such-flag"])
        assert exc.value.code == 3

    def test_missing_output_directory_exit_2(self, in_tmp, capsys):
        code, _, _ = run(capsys, "fit", "--descriptors", str(SAMPLE), "--out", "no/such/dir/cb.cvpc")
        assert code == 2


class TestEval:
    def test_noiseless_world_is_perfect(self, in_tmp, capsys):
        out = pipeline(capsys, NOISELESS)
        assert "R@1=1.000" in out
        lines = Path("eval.csv").read_text().splitlines()
        assert lines[0].startswith("# config: ") and lines[1] == "k,correct,recall,error"
        assert lines[2] == "1,40,1,0"

    def test_none_and_global_agree_without_collaborators(self, in_tmp, capsys):
        extra = [*NOISELESS, "--set", "scene.num_collaborators=0", "--set", "scene.viewpoint_noise=1.5"]
        a = pipeline(capsys, extra, fusion="none", tag="a")
        code, b, _ = run(capsys, "eval", *extra, "--world", "wa", "--codebook", "cba.cvpc", "--db", "dba.cvdb", "--fusion", "global")
        assert code == 0
        assert a.splitlines()[1:] == b.splitlines()[1:]

    def test_reordering_flag(self, in_tmp, capsys):
        pipeline(capsys, NOISELESS)
        code, out, _ = run(capsys, "eval", "--world", "w", "--codebook", "cb.cvpc", "--db", "db.cvdb", "--reordering")
        assert code == 0 and out.startswith("mode=reordering") and "R@1=1.000" in out

    def test_occlusion_fixture_bit_for_bit(self, in_tmp, capsys):
        from occlusion_benchmark import EVAL_STEPS

        for argv in EVAL_STEPS:
            assert run(capsys, *argv)[0] == 0
        assert Path("eval.csv").read_bytes() == (FIXTURES / "eval_occlusion_global.csv").read_bytes()


class TestSelfcheck:
    def test_passes(self, capsys):
        code, out, _ = run(capsys, "selfcheck")
        assert code == 0
        names = [line.split(":")[0] for line in out.splitlines() if line.startswith(("PASS", "FAIL"))]
        assert names == [
            "PASS consistency", "PASS permutation", "PASS clamp", "PASS redundancy",
            "PASS retrieval-oracle", "PASS soft-hard-limit", "PASS gradients",
        ]

    def test_negative_control(self, capsys):
        code, out, _ = run(capsys, "selfcheck", "--debug-skip-normalization")
        assert code == 1
        assert "FAIL consistency" in out and "failed properties: consistency" in out


class TestTrainAndSweep:
    def test_train_outputs(self, in_tmp, capsys):
        assert run(capsys, "world", "--preset", "toy-train", "--set", "scene.num_places=60", "--out", "w")[0] == 0
        code, out, _ = run(capsys, "train", "--preset", "toy-train", "--set", "train.epochs=2", "--world", "w", "--out", "t.cvpc")
        assert code == 0 and out.count("epoch ") == 2
        trace = Path("t.cvpc.trace.csv").read_text().splitlines()
        assert trace[0].startswith("# config: ") and trace[1] == "epoch,mean_loss,lr" and len(trace) == 4
        assert fileio.read_codebook("t.cvpc").centroids.shape == (4, 8)

    def test_compare_init(self, in_tmp, capsys):
        run(capsys, "world", "--preset", "toy-train", "--set", "scene.num_places=60", "--out", "w")
        code, out, _ = run(capsys, "train", "--preset", "toy-train", "--set", "train.epochs=1", "--world", "w", "--out", "t.cvpc", "--compare-init")
        assert code == 0 and "multi-agent fresh init" in out
        for tag in ("single", "from-single", "fresh"):
            assert Path(f"t.cvpc.{tag}.trace.csv").exists()

    def test_sweep(self, in_tmp, capsys):
        code, out, _ = run(
            capsys, "sweep", "--set", "scene.num_places=40", "--set", "scene.latent_dim=16", "-k", "4", "--out", "s.csv"
        )
        assert code == 0
        lines = Path("s.csv").read_text().splitlines()
        assert lines[1].startswith("distance_m,mode,recall@1") and len(lines) == 2 + 16


class TestDeterminism:
    def test_repeated_runs_identical(self, tmp_path, capsys, monkeypatch):
        def once(sub):
            d = tmp_path / sub
            d.mkdir()
            monkeypatch.chdir(d)
            outs = [pipeline(capsys, NOISELESS + ["--set", "scene.viewpoint_noise=1.5", "--set", "scene.occlusion=0.5"])]
            outs.append(run(capsys, "train", "--preset", "toy-train", "--set", "train.epochs=1", "--world", "w", "--out", "t.cvpc")[1])
            files = {p.name: p.read_bytes() for p in d.iterdir() if p.is_file()}
            return outs, files

        assert once("a") == once("b")

    def test_module_entry_point(self, tmp_path):
        res = subprocess.run([sys.executable, "-m", "collabvpr", "--help"], capture_output=True, text=True)
        assert res.returncode == 0 and "selfcheck" in res.stdout
        assert shutil.which("collabvpr") is not None
