import json

import numpy as np
import pytest

from phonestyle.cli import EXIT_MISSING_STAGE, EXIT_OK, EXIT_VALIDATION, main
from phonestyle.evalmetrics import read_embeddings_tsv
from phonestyle.formats import load_mel

TINY = [
    "plcsd.d_c=4", "plcsd.d_s=4", "plcsd.encoder_width=8", "plcsd.decoder_width=8", "plcsd.classifier_hidden=4",
    "plcsd.discriminator_width=4", "plcsd.max_epochs=1",
    "acoustic.d_t=4", "acoustic.d_s=4", "acoustic.phone_embedding=8", "acoustic.prenet_width=8",
    "acoustic.attention_rnn_width=16", "acoustic.decoder_rnn_width=16", "acoustic.attention_dim=8",
    "acoustic.location_filters=2", "acoustic.location_kernel=3", "acoustic.epochs=1",
    "acoustic.max_decode_frames=20",
    "predictor.d_t=4", "predictor.d_s=4", "predictor.model_dim=8", "predictor.n_blocks=1",
    "predictor.conv_hidden=8", "predictor.epochs=1",
]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["make-synthetic", "--out", str(root), "--n-utterances", "20", "--n-mels", "6"]) == EXIT_OK
    (root / "ph.txt").write_text("AA AE AH\n")
    return root


def run(workdir, *args):
    sets = [x for s in TINY for x in ("--set", s)]
    return main([args[0], "--config", str(workdir / "config.json"), *sets, *args[1:]])


def test_make_synthetic_layout(workdir):
    manifest = json.loads((workdir / "manifest.json").read_text())
    assert len(manifest) == 20
    assert all((workdir / r["mel_path"]).exists() and (workdir / r["alignment_path"]).exists() for r in manifest)
    hidden = json.loads((workdir / "hidden_styles.json").read_text())
    assert set(hidden) == {r["id"] for r in manifest}


def test_stage_order_enforced(workdir):
    assert run(workdir, "train-plcsd") == EXIT_MISSING_STAGE


def test_full_pipeline(workdir, caplog):
    assert run(workdir, "prepare") == EXIT_OK
    with caplog.at_level("INFO", logger="phonestyle"):
        assert run(workdir, "prepare") == EXIT_OK
    assert "cache hit" in caplog.text
    prep = workdir / "run" / "prepare"
    splits = json.loads((prep / "splits.json").read_text())
    assert (len(splits["train"]), len(splits["test"])) == (18, 2)

    assert run(workdir, "train-utterance") == EXIT_MISSING_STAGE
    assert run(workdir, "train-plcsd") == EXIT_OK
    log = [json.loads(line) for line in (workdir / "run" / "plcsd" / "train_log.jsonl").read_text().splitlines()]
    assert log and all(len(r["losses"]) == 7 for r in log)
    assert run(workdir, "train-utterance") == EXIT_OK
    assert run(workdir, "train-predictor") == EXIT_OK

    utt = splits["test"][0]
    assert run(workdir, "reconstruct", "--utt", utt, "--name", "a") == EXIT_OK
    assert run(workdir, "reconstruct", "--utt", utt, "--name", "b") == EXIT_OK
    gen = workdir / "run" / "generate"
    assert (gen / "reconstruct_a.mel").read_bytes() == (gen / "reconstruct_b.mel").read_bytes()
    side = json.loads((gen / "reconstruct_a.json").read_text())
    assert side["mode"] == "reconstruct" and side["reference_id"] == utt
    assert set(side["checkpoint_hashes"]) == {"plcsd", "acoustic"}

    phones = str(workdir / "ph.txt")
    assert run(workdir, "transfer", "--text-phones", phones) == EXIT_VALIDATION
    assert run(workdir, "transfer", "--text-phones", phones, "--ref", "nope") == EXIT_VALIDATION
    assert run(workdir, "transfer", "--text-phones", phones, "--ref", utt) == EXIT_OK
    assert run(workdir, "tts", "--text-phones", phones) == EXIT_OK
    tts = json.loads((gen / "tts_ph.json").read_text())
    assert tts["source_phones"] == ["AA", "AE", "AH"] and "predictor" in tts["checkpoint_hashes"]

    mel = gen / "reconstruct_a.mel"
    assert run(workdir, "evaluate", "--ref", str(mel), "--syn", str(mel)) == EXIT_OK
    report = json.loads((workdir / "run" / "eval" / "report.json").read_text())
    assert report["summary"]["mcd"] == 0.0 and report["summary"]["vde"] is None
    assert run(workdir, "evaluate") == EXIT_VALIDATION

    out = workdir / "emb.tsv"
    assert run(workdir, "export-embeddings", "--split", "all", "--out", str(out)) == EXIT_OK
    rows = read_embeddings_tsv(out)
    n_segments = sum(len(json.loads((workdir / r["alignment_path"]).read_text())["entries"])
                     for r in json.loads((workdir / "manifest.json").read_text()))
    assert len(rows) == 2 * n_segments
    assert {r[3] for r in rows} == {"content", "style"}
    assert np.all(np.isfinite(load_mel(mel).frames))


def test_bad_config_and_override(workdir, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{\n  oops")
    assert main(["prepare", "--config", str(bad)]) == EXIT_VALIDATION
    assert main(["prepare", "--config", str(workdir / "config.json"), "--set", "novalue"]) == EXIT_VALIDATION
    assert main(["prepare", "--config", str(workdir / "config.json"), "--set", "plcsd.d_c=-1"]) == EXIT_VALIDATION
