import json

import numpy as np
import pytest

from mbnspeaker.cli import EXIT_FAILED, EXIT_INVALID, EXIT_OK, build_parser, main
from mbnspeaker.dataio import load_matrix

SMALL = {
    "corpus": {"num_speakers": 3, "utterances_per_speaker": 6, "frames_per_utterance_range": [40, 50],
               "feature_dim": 4},
    "ubm": {"num_mixtures": 2, "em_iterations": 2},
    "mbn": {"num_clusterings": 10},
    "cluster": {"restarts": 2},
}


def _config(tmp_path, **overrides):
    obj = json.loads(json.dumps(SMALL))
    obj.update(overrides)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(obj))
    return path


def test_every_config_key_has_a_flag():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    dests = {a.dest for a in sub.choices["pipeline"]._actions}
    for key in ("ubm.num_mixtures", "ubm.variance_floor_factor", "mbn.k_schedule", "mbn.standardize",
                "corpus.speaker_separation", "cluster.distance_threshold", "corpus_seed", "seed",
                "methods", "manifest", "output_dir", "workers"):
        assert key in dests, key


def test_step_by_step_commands(tmp_path, capsys):
    d = tmp_path
    assert main(["synth", "--out", str(d / "c"), "--corpus-num-speakers", "3",
                 "--corpus-utterances-per-speaker", "5", "--corpus-feature-dim", "3"]) == EXIT_OK
    man = str(d / "c" / "manifest.json")
    assert main(["ubm-train", "--manifest", man, "--out", str(d / "u.json"), "--ubm-num-mixtures", "2"]) == 0
    assert main(["svec", "--manifest", man, "--ubm", str(d / "u.json"), "--out", str(d / "sv.bin")]) == 0
    assert load_matrix(d / "sv.bin").shape == (15, 2 * 4)
    assert main(["mbn-fit", "--input", str(d / "sv.bin"), "--model", str(d / "m"), "--out", str(d / "e.bin"),
                 "--mbn-num-clusterings", "8", "--mbn-k-schedule", "12,6"]) == 0
    assert main(["pca-fit", "--input", str(d / "sv.bin"), "--dim", "2", "--out", str(d / "p.bin")]) == 0
    assert main(["cluster", "--input", str(d / "e.bin"), "--manifest", man, "--out", str(d / "a.csv"),
                 "--report", str(d / "r.json")]) == 0
    assert json.loads((d / "r.json").read_text())["num_clusters"] == 3
    capsys.readouterr()
    assert main(["evaluate", "--assignments", str(d / "a.csv"), "--manifest", man]) == 0
    assert 0.0 <= json.loads(capsys.readouterr().out)["nmi"] <= 1.0
    assert main(["plot", "--kind", "scatter", "--embedding", str(d / "e.bin"), "--manifest", man,
                 "--out", str(d / "plots")]) == 0
    assert (d / "plots" / "scatter.svg").exists()


def test_flags_override_file(tmp_path):
    cfg = _config(tmp_path)
    out = tmp_path / "run"
    assert main(["pipeline", "--config", str(cfg), "--output-dir", str(out), "--ubm-num-mixtures", "3",
                 "--methods", "pca,raw-kmeans", "--seed", "4"]) == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["effective"]["ubm"]["num_mixtures"] == 3
    assert report["effective"]["ubm"]["em_iterations"] == 2
    assert set(report["methods"]) == {"pca", "raw-kmeans"}
    assert report["config"]["seed"] == 4


def test_sweep_command(tmp_path):
    cfg = _config(tmp_path, sweep={"mixture_counts": [1, 2], "em_iteration_options": [0]})
    out = tmp_path / "sw"
    assert main(["sweep", "--config", str(cfg), "--output-dir", str(out), "--output-dims", "2,3"]) == 0
    lines = (out / "results.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * (1 + 2 + 2)
    assert main(["plot", "--kind", "sensitivity", "--results", str(out / "results.csv"),
                 "--out", str(tmp_path / "pl")]) == 0


@pytest.mark.parametrize("argv", [
    ["pipeline", "--no-such-flag"],
    ["pipeline", "--ubm-num-mixtures", "many"],
    ["ubm-train", "--manifest", "missing.json", "--out", "x.json"],
    ["pipeline", "--ubm-num-mixtures", "0"],
    ["pipeline", "--methods", "lda"],
])
def test_validation_errors_exit_1(tmp_path, monkeypatch, argv):
    monkeypatch.chdir(tmp_path)
    with pytest.raises(SystemExit) as info:
        raise SystemExit(main(argv))
    assert info.value.code == EXIT_INVALID


def test_bad_config_file_exits_1(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["pipeline", "--config", str(bad)]) == EXIT_INVALID
    assert main(["pipeline", "--config", str(_config(tmp_path, colour="red"))]) == EXIT_INVALID


def test_runtime_failure_exits_2(tmp_path):
    cfg = _config(tmp_path, mbn={"num_clusterings": 3, "k_schedule": [1000]})
    assert main(["pipeline", "--config", str(cfg), "--output-dir", str(tmp_path / "o"),
                 "--methods", "mbn"]) == EXIT_FAILED


def test_nan_input_exits_1(tmp_path):
    (tmp_path / "x.csv").write_text("1,2\n3,nan\n")
    (tmp_path / "m.json").write_text(json.dumps(
        {"feature_dim": 2, "entries": [{"id": "x", "path": "x.csv"}]}))
    assert main(["pipeline", "--manifest", str(tmp_path / "m.json"), "--output-dir",
                 str(tmp_path / "o"), "--cluster-n-clusters", "1"]) == EXIT_INVALID


def test_worker_count_does_not_change_bytes(tmp_path):
    cfg = _config(tmp_path)
    for w in ("1", "3"):
        assert main(["pipeline", "--config", str(cfg), "--output-dir", str(tmp_path / w),
                     "--workers", w]) == 0
    for name in ("supervectors.bin", "ubm.json", "mbn/embedding.bin", "report.json"):
        assert (tmp_path / "1" / name).read_bytes() == (tmp_path / "3" / name).read_bytes()
    np.testing.assert_array_equal(load_matrix(tmp_path / "1" / "pca" / "embedding.bin"),
                                  load_matrix(tmp_path / "3" / "pca" / "embedding.bin"))
