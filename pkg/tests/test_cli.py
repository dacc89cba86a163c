"""CLI behavior: argument validation, determinism, machine output, exit codes."""
import json
from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient

from irsis import cli
from irsis.dataset import build_synthetic_corpus
from irsis.mask import BinaryMask


def _tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def _run_args(out: Path, *extra: str) -> list[str]:
    return ["run", "--mock", "--seed", "7",
            "--query", "surgical instrument", "--out", str(out), *extra]


def test_run_mock_writes_expected_artifacts(tmp_path):
    out = tmp_path / "out"
    rc = cli.main(_run_args(out))
    assert rc == 0

    summary = json.loads((out / "summary.json").read_text())
    assert summary["state"] in ("converged_quality", "exhausted_iterations")
    assert summary["iterations"] >= 1
    assert summary["session_id"] == "run"

    final = BinaryMask.rle_decode((out / "final_mask.irle").read_bytes())
    assert isinstance(final, BinaryMask)
    assert final.area == summary["final_area"] > 0
    assert (out / "final_mask.png").stat().st_size > 0
    assert (out / "overlay.png").stat().st_size > 0
    assert (out / "reports" / "t000.json").is_file()
    rec0 = json.loads((out / "reports" / "t000.json").read_text())
    assert rec0["t"] == 0 and rec0["strategy"] is not None


def test_run_mock_reruns_are_byte_identical(tmp_path):
    noise = ["--p-drop", "0.4", "--salt-blobs", "1", "2", "--jitter-px", "1"]
    d1, d2 = tmp_path / "a", tmp_path / "b"
    assert cli.main(_run_args(d1, *noise)) == 0
    assert cli.main(_run_args(d2, *noise)) == 0
    t1, t2 = _tree_bytes(d1), _tree_bytes(d2)
    assert t1.keys() == t2.keys()
    assert t1 == t2


def test_run_json_mode_keeps_streams_separate(tmp_path, capsys):
    rc = cli.main(_run_args(tmp_path / "out", "--json"))
    assert rc == 0
    captured = capsys.readouterr()
    payload = json.loads(captured.out)
    assert payload["state"] in ("converged_quality", "exhausted_iterations")
    assert "state=" in captured.err


def test_run_mock_requires_seed(tmp_path):
    with pytest.raises(SystemExit) as ei:
        cli.main(["run", "--mock", "--query", "q", "--out", str(tmp_path / "o")])
    assert ei.value.code == 2


def test_run_mock_and_remote_urls_are_exclusive(tmp_path):
    with pytest.raises(SystemExit) as ei:
        cli.main(["run", "--mock", "--seed", "1", "--segmenter-url",
                  "http://localhost:9", "--query", "q", "--out", str(tmp_path / "o")])
    assert ei.value.code == 2


def test_run_remote_missing_image_names_the_path(tmp_path, capsys):
    missing = tmp_path / "missing.png"
    rc = cli.main(["run", "--segmenter-url", "http://127.0.0.1:1",
                   "--image", str(missing), "--query", "q",
                   "--out", str(tmp_path / "o")])
    assert rc == 1
    assert str(missing) in capsys.readouterr().out


def test_run_respects_iteration_budget(tmp_path):
    out = tmp_path / "out"
    rc = cli.main(_run_args(out, "--p-drop", "0.9", "--salt-blobs", "2", "4",
                            "--max-iters", "1"))
    assert rc == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["max_iterations"] == 1
    assert summary["rounds"] <= 1


def test_config_file_supplies_defaults_flags_win(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"tau_c": 0.7, "max_iters": 2}))

    out1 = tmp_path / "o1"
    assert cli.main(_run_args(out1, "--config", str(cfg))) == 0
    s1 = json.loads((out1 / "summary.json").read_text())
    assert s1["config"]["tau_c"] == 0.7
    assert s1["config"]["max_iterations"] == 2

    out2 = tmp_path / "o2"
    assert cli.main(_run_args(out2, "--config", str(cfg), "--tau-c", "0.6")) == 0
    s2 = json.loads((out2 / "summary.json").read_text())
    assert s2["config"]["tau_c"] == 0.6
    assert s2["config"]["max_iterations"] == 2


def test_config_file_rejects_unknown_keys(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bogus_knob": 1}))
    with pytest.raises(SystemExit) as ei:
        cli.main(_run_args(tmp_path / "o", "--config", str(cfg)))
    assert ei.value.code == 2


def test_eval_identical_dirs_scores_perfect(tmp_path, rng, capsys):
    pred, gt = tmp_path / "pred", tmp_path / "gt"
    pred.mkdir()
    gt.mkdir()
    for i in range(3):
        bits = rng.random((20, 30)) < 0.3
        data = BinaryMask.from_array(bits).rle_encode()
        (pred / f"m{i}.irle").write_bytes(data)
        (gt / f"m{i}.irle").write_bytes(data)

    rc = cli.main(["eval", "--pred", str(pred), "--gt", str(gt), "--json"])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert report["n_images"] == 3
    assert report["mean_iou"] == 1.0
    assert report["mean_dice"] == 1.0


def test_eval_writes_report_file_matching_stdout(tmp_path, rng, capsys):
    pred, gt = tmp_path / "pred", tmp_path / "gt"
    pred.mkdir()
    gt.mkdir()
    data = BinaryMask.from_array(rng.random((8, 8)) < 0.5).rle_encode()
    (pred / "a.irle").write_bytes(data)
    (gt / "a.irle").write_bytes(data)
    out_file = tmp_path / "report.json"
    rc = cli.main(["eval", "--pred", str(pred), "--gt", str(gt),
                   "--out", str(out_file)])
    assert rc == 0
    assert out_file.read_text() == capsys.readouterr().out


def test_expand_prompts_triples_annotations(tmp_path, capsys):
    corpus = build_synthetic_corpus(tmp_path / "corpus", n_images=10, seed=3,
                                    n_instruments=1)
    out = tmp_path / "expanded.jsonl"
    rc = cli.main(["expand-prompts", "--corpus", str(corpus),
                   "--out", str(out), "--json"])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["annotations"] == 10
    assert payload["samples"] == 30
    assert len(out.read_text().splitlines()) == 30


def test_validate_corpus_exit_codes(tmp_path):
    corpus = build_synthetic_corpus(tmp_path / "c", n_images=3, seed=5,
                                    n_instruments=2)
    assert cli.main(["validate-corpus", "--corpus", str(corpus),
                     "--check-masks"]) == 0

    victim = next((tmp_path / "c" / "masks").glob("*.irle"))
    victim.unlink()
    assert cli.main(["validate-corpus", "--corpus", str(corpus),
                     "--check-masks"]) == 1


def test_emit_train_config_default_and_tenth(tmp_path, capsys):
    rc = cli.main(["emit-train-config", "--json"])
    assert rc == 0
    config = json.loads(capsys.readouterr().out)
    assert config["loss_weights"] == {"w_mask": 50.0, "w_dice": 10.0,
                                      "w_ce": 20.0, "w_presence": 20.0}
    assert config["lr_schedule"]["decoder_lr"] == 8e-5
    assert config["lr_schedule"]["backbone_lr"] == 2.5e-5

    rc = cli.main(["emit-train-config", "--preset", "tenth", "--json"])
    assert rc == 0
    tenth = json.loads(capsys.readouterr().out)
    assert tenth["loss_weights"] == {"w_mask": 5.0, "w_dice": 1.0,
                                     "w_ce": 2.0, "w_presence": 2.0}


def test_emit_train_config_schedule_table(tmp_path):
    table = tmp_path / "schedule.tsv"
    rc = cli.main(["emit-train-config", "--schedule-out", str(table),
                   "--backbone-depth", "12"])
    assert rc == 0
    lines = table.read_text().splitlines()
    assert lines[0] == "epoch\tgroup\tlr"
    # 90 epochs x (decoder + 12 backbone blocks + text encoder)
    assert len(lines) == 1 + 90 * 14
    first = lines[1].split("\t")
    assert first[0] == "1" and first[1] == "decoder"


def test_batch_mock_report_and_determinism(tmp_path):
    args = ["batch", "--seed", "11", "--images", "3", "--p-drop", "0.5"]
    d1, d2 = tmp_path / "b1", tmp_path / "b2"
    assert cli.main(args + ["--out", str(d1)]) == 0
    assert cli.main(args + ["--out", str(d2)]) == 0

    report = json.loads((d1 / "report.json").read_text())
    assert report["n_images"] == 3
    assert report["eval"]["n_images"] == 3
    assert 0.0 <= report["mean_iou_final"] <= 1.0
    assert len(report["scenes"]) == 3
    assert len(list((d1 / "pred").glob("*.irle"))) == 3
    assert _tree_bytes(d1) == _tree_bytes(d2)


def test_timeout_env_override(monkeypatch):
    parser, _ = cli._build_parser()
    monkeypatch.delenv(cli.TIMEOUT_ENV, raising=False)
    assert cli._client_timeout(parser) == 30.0
    monkeypatch.setenv(cli.TIMEOUT_ENV, "5.5")
    assert cli._client_timeout(parser) == 5.5
    monkeypatch.setenv(cli.TIMEOUT_ENV, "banana")
    with pytest.raises(SystemExit):
        cli._client_timeout(parser)
    monkeypatch.setenv(cli.TIMEOUT_ENV, "-1")
    with pytest.raises(SystemExit):
        cli._client_timeout(parser)


def test_serve_app_builder_smoke(tmp_path):
    parser, _ = cli._build_parser()
    args = parser.parse_args(["serve", "--store", str(tmp_path / "store"),
                              "--mock", "--seed", "3"])
    app = cli._build_service_app(args, parser)
    with TestClient(app) as client:
        body = client.get("/healthz").json()
    assert body["status"] == "ok"
    assert body["backend_kind"] == "mock:3"


def test_mock_backend_app_builder_smoke():
    parser, _ = cli._build_parser()
    args = parser.parse_args(["mock-backend", "--seed", "4"])
    app = cli._build_mock_backend_app(args)
    with TestClient(app) as client:
        response = client.get("/healthz")
    assert response.status_code == 200
