import pytest

from app.cli import main
from app.services.analysis import model
from app.services.storage import correlogram_to_text, parse_key_values
from tests.services.test_analysis import synthetic_correlogram


def run(*args) -> int:
    return main([str(a) for a in args])


def read_rows(path):
    return [line.split() for line in path.read_text().splitlines() if line and not line.startswith("#")]


def read_report(path):
    return dict(line.split("=", 1) for line in path.read_text().splitlines() if line and not line.startswith("#"))


@pytest.fixture
def events_file(tmp_path):
    path = tmp_path / "events.txt"
    assert run("simulate", "--diameter", 240, "--angle", 60, "--duration", 0.01,
               "--intensity-period", 1e-7, "--seed", 3, "--out", path) == 0
    return path


class TestSimulate:
    def test_same_seed_same_bytes(self, tmp_path):
        for name in ("a.txt", "b.txt"):
            assert run("simulate", "--duration", 0.005, "--seed", 11, "--out", tmp_path / name) == 0
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
        assert (tmp_path / "a.truth").read_bytes() == (tmp_path / "b.truth").read_bytes()

    def test_other_seed_other_stream(self, tmp_path):
        run("simulate", "--duration", 0.005, "--seed", 1, "--out", tmp_path / "a.txt")
        run("simulate", "--duration", 0.005, "--seed", 2, "--out", tmp_path / "b.txt")
        assert (tmp_path / "a.txt").read_bytes() != (tmp_path / "b.txt").read_bytes()

    def test_header_and_sidecar(self, events_file):
        first = events_file.read_text().splitlines()[0]
        assert parse_key_values(first) == {"ticks": "1.25ns", "duration": str(8 * 10**6)}
        truth = read_report(events_file.with_suffix(".truth"))
        assert truth["generator"] == "numpy.PCG64"
        assert truth["seed"] == "3"
        assert float(truth["particle_diameter"]) == pytest.approx(240e-9)
        assert int(truth["events"]) == len(read_rows(events_file))

    def test_zero_duration(self, tmp_path):
        out = tmp_path / "empty.txt"
        assert run("simulate", "--duration", 0, "--out", out) == 0
        assert read_rows(out) == []
        assert out.read_text().startswith("# ticks=1.25ns duration=0\n")

    def test_binary_format(self, tmp_path):
        out = tmp_path / "events.bin"
        assert run("simulate", "--duration", 0.002, "--format", "binary", "--out", out) == 0
        assert out.read_bytes()[:4] == b"PHOT"

    @pytest.mark.parametrize(
        "flags",
        [("--beta", 0), ("--beta", 1.5), ("--diameter", -5), ("--temperature", 0), ("--duration", -1)],
    )
    def test_invalid_physics(self, tmp_path, flags):
        assert run("simulate", *flags, "--out", tmp_path / "x.txt") == 3


class TestCorrelate:
    def test_repeatable_output(self, tmp_path, events_file):
        assert run("correlate", "--in", events_file, "--out", tmp_path / "c1.txt") == 0
        assert run("correlate", "--in", events_file, "--out", tmp_path / "c2.txt") == 0
        assert (tmp_path / "c1.txt").read_bytes() == (tmp_path / "c2.txt").read_bytes()
        assert len(read_rows(tmp_path / "c1.txt")) == 288

    def test_binary_input_matches_text(self, tmp_path):
        for fmt, name in (("text", "e.txt"), ("binary", "e.bin")):
            run("simulate", "--duration", 0.003, "--seed", 5, "--format", fmt, "--out", tmp_path / name)
            assert run("correlate", "--in", tmp_path / name, "--out", tmp_path / f"{name}.corr") == 0
        assert read_rows(tmp_path / "e.txt.corr") == read_rows(tmp_path / "e.bin.corr")

    def test_empty_stream(self, tmp_path):
        empty = tmp_path / "empty.txt"
        empty.write_text("# ticks=1.25ns duration=0\n")
        out = tmp_path / "c.txt"
        assert run("correlate", "--in", empty, "--duration", 1e-5, "--out", out) == 0
        rows = read_rows(out)
        assert len(rows) == 288
        assert all(row[2] == "0" for row in rows)
        assert all(row[1] == "nan" for row in rows)

    def test_small_configuration(self, tmp_path, events_file):
        out = tmp_path / "c.txt"
        assert run("correlate", "--in", events_file, "--out", out, "--blocks", 4, "--channels", 4,
                   "--first-channels", 8) == 0
        assert len(read_rows(out)) == 8 + 3 * 4

    def test_snapshots(self, tmp_path, events_file, monkeypatch):
        monkeypatch.setenv("CORRELATOR_CHUNK_SAMPLES", "100000")
        out = tmp_path / "c.txt"
        snaps = tmp_path / "snaps"
        assert run("correlate", "--in", events_file, "--out", out, "--snapshot-interval", 0.004,
                   "--snapshot-dir", snaps) == 0
        written = sorted(p.name for p in snaps.iterdir())
        assert written == ["c.snapshot0001.txt", "c.snapshot0002.txt"]

    @pytest.mark.parametrize("interval", [0, -1])
    def test_non_positive_snapshot_interval(self, tmp_path, events_file, interval):
        assert run("correlate", "--in", events_file, "--out", tmp_path / "c.txt", "--snapshot-interval", interval) == 5

    def test_malformed_file(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("# ticks=1.25ns duration=100\n0\nx\n")
        assert run("correlate", "--in", bad, "--out", tmp_path / "c.txt") == 2

    def test_missing_file(self, tmp_path):
        assert run("correlate", "--in", tmp_path / "nope.txt", "--out", tmp_path / "c.txt") == 2

    def test_invalid_configuration(self, tmp_path, events_file):
        assert run("correlate", "--in", events_file, "--out", tmp_path / "c.txt", "--dilation", 3) == 5


def test_fit_and_size_pipeline(tmp_path):
    events = tmp_path / "events.txt"
    assert run("simulate", "--diameter", 240, "--angle", 60, "--viscosity", 0.89e-5, "--duration", 0.2,
               "--intensity-period", 1e-7, "--seed", 8, "--out", events) == 0
    assert run("correlate", "--in", events, "--out", tmp_path / "corr.txt") == 0
    assert run("fit", "--in", tmp_path / "corr.txt", "--out", tmp_path / "fit.txt") == 0
    fit = read_report(tmp_path / "fit.txt")
    assert fit["converged"] == "true"
    curve = read_rows(tmp_path / "fit.curve")
    assert len(curve) == 288

    assert run("size", "--fit", tmp_path / "fit.txt", "--params", events.with_suffix(".truth"),
               "--cert", 240, "--out", tmp_path / "size.txt") == 0
    size = read_report(tmp_path / "size.txt")
    assert float(size["d_exp"]) == pytest.approx(240e-9, rel=0.06)
    assert float(size["E_r"]) <= 6.0


def test_size_from_report_to_stdout(tmp_path, capsys):
    report = tmp_path / "fit.txt"
    report.write_text("B=1.0\nbeta=0.9\ngamma=122.8\nconverged=true\n")
    assert run("size", "--fit", report) == 0
    out = dict(line.split("=", 1) for line in capsys.readouterr().out.splitlines())
    assert float(out["d_exp"]) == pytest.approx(530e-9, rel=0.01)


def test_size_rejects_non_positive_rate(tmp_path):
    report = tmp_path / "fit.txt"
    report.write_text("B=1.0\nbeta=0.9\ngamma=-3\nconverged=true\n")
    assert run("size", "--fit", report) == 3


def test_size_reports_unconverged_fit(tmp_path):
    report = tmp_path / "fit.txt"
    report.write_text("B=1.0\nbeta=0.9\ngamma=122.8\nconverged=false\n")
    assert run("size", "--fit", report, "--out", tmp_path / "size.txt") == 4


def test_compare_block_zero_is_exact(tmp_path, events_file):
    out = tmp_path / "bias.txt"
    assert run("compare", "--in", events_file, "--max-block", 3, "--out", out) == 0
    rows = read_rows(out)
    block0 = [row for row in rows if row[0] == "0"]
    assert len(block0) == 16
    for row in block0:
        if row[4] != "nan":
            assert float(row[5]) == 0.0
    assert {row[0] for row in rows} == {"0", "1", "2", "3"}


def test_fit_budget_exhausted(tmp_path, rng):
    noise = iter(rng.normal(0, 0.02, 288))
    correlogram = synthetic_correlogram(lambda tau: model(tau, 1.0, 0.8, 100.0) + next(noise))
    source = tmp_path / "corr.txt"
    source.write_text(correlogram_to_text(correlogram))
    assert run("fit", "--in", source, "--out", tmp_path / "fit.txt", "--tau-max", 1.0, "--max-iter", 1) == 4
    assert read_report(tmp_path / "fit.txt")["converged"] == "false"
    assert (tmp_path / "fit.curve").exists()


def test_io_error_has_its_own_exit_code(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run("simulate", "--duration", 0.001, "--out", blocker / "events.txt") == 7
