import numpy as np
import pytest

from fusionlm import cli
from fusionlm import trainer as tr

SMALL_FLAGS = ["--word-emb-dim", "6", "--visual-emb-dim", "6", "--lstm-units", "8",
               "--projection-dim", "4", "--batch-size", "16", "--max-epochs", "2", "--threads", "1"]


@pytest.fixture
def corpus(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(["datagen", "--objects", "4", "--segments", "80", "--seed", "7",
                     "--dev-fraction", "0.2", "--feature-dim", "8", "--out", "corpus"]) == 0
    assert cli.main(["vocab-train", "--manifest", "corpus/manifest.tsv", "--size", "200",
                     "--out", "vocab"]) == 0
    return tmp_path


def _train(fusion, out, *extra):
    return cli.main(["train", "--manifest", "corpus/train.tsv", "--dev-manifest", "corpus/dev.tsv",
                     "--vocab", "vocab/vocab.txt", "--fusion", fusion, "--out", out,
                     *SMALL_FLAGS, *extra])


def test_datagen_outputs(corpus):
    c = corpus / "corpus"
    for name in ("manifest.tsv", "labels.tsv", "spec.cfg", "train.tsv", "dev.tsv"):
        assert (c / name).is_file()
    assert len((c / "dev.tsv").read_text().splitlines()) == 1 + 16
    assert any((c / "features").iterdir())


def test_full_pipeline(corpus, capsys):
    assert _train("text-only", "ck_text") == 0
    (corpus / "desk.cfg").write_text("fusion = text-only\nseed = 0\n")
    assert cli.main(["train", "--config", "desk.cfg", "--fusion", "middle", "--manifest",
                     "corpus/train.tsv", "--dev-manifest", "corpus/dev.tsv", "--vocab",
                     "vocab/vocab.txt", "--out", "ck_mid", *SMALL_FLAGS]) == 0
    resolved = (corpus / "ck_mid" / "config.resolved").read_text()
    assert "fusion=middle" in resolved
    assert (corpus / "ck_mid" / "epochs.tsv").read_text().startswith("epoch\ttrain_nll")
    capsys.readouterr()
    assert cli.main(["eval", "--ckpt", "ck_mid/best", "--manifest", "corpus/dev.tsv",
                     "--out", "rep"]) == 0
    ppl = float(capsys.readouterr().out.split("\t")[1])
    assert (corpus / "rep" / "eval.tsv").is_file() and ppl > 1.0
    assert cli.main(["blind-eval", "--ckpt", "ck_mid/best", "--manifest", "corpus/dev.tsv",
                     "--out", "rep"]) == 0
    assert (corpus / "rep" / "blind_eval.tsv").is_file()
    assert cli.main(["blind-eval", "--ckpt", "ck_text/best", "--manifest", "corpus/dev.tsv",
                     "--out", "rep"]) == 1
    assert cli.main(["compare", "--ckpt-a", "ck_text/best", "--ckpt-b", "ck_mid/best",
                     "--manifest", "corpus/dev.tsv", "--labels", "corpus/labels.tsv",
                     "--sample-n", "10", "--out", "rep"]) == 0
    assert (corpus / "rep" / "compare.tsv").is_file()
    written = {p.name for p in corpus.iterdir()}
    assert written == {"corpus", "vocab", "ck_text", "ck_mid", "rep", "desk.cfg"}


def test_oracle(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(["datagen", "--segments", "5", "--missing-rate", "0", "--out", "c"]) == 0
    capsys.readouterr()
    assert cli.main(["oracle", "--spec", "c/spec.cfg", "--condition", "multimodal"]) == 0
    assert capsys.readouterr().out.strip() == "1.0"
    assert cli.main(["oracle", "--spec", "c/spec.cfg", "--condition", "text-only",
                     "--out", "o"]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(8 ** 0.25)
    assert (tmp_path / "o" / "oracle.tsv").is_file()


def test_exit_codes(corpus, capsys, monkeypatch):
    assert cli.main(["sing"]) == 1
    assert "usage" in capsys.readouterr().err
    assert cli.main([]) == 1
    assert cli.main(["eval", "--ckpt", "nope", "--manifest", "corpus/dev.tsv"]) == 2
    assert cli.main(["vocab-train", "--manifest", "missing.tsv", "--out", "v"]) == 2
    (corpus / "bad.cfg").write_text("dropout=0.5\n")
    assert cli.main(["train", "--config", "bad.cfg"]) == 1
    monkeypatch.setattr(tr, "batch_loss_and_grads",
                        lambda p, *a: (float("nan"), {k: np.zeros_like(v) for k, v in p.items()}))
    assert _train("middle", "ck_nan") == 3
    assert "epoch 1, batch 0" in capsys.readouterr().err


def test_threads_env(monkeypatch):
    monkeypatch.setenv("FUSIONLM_THREADS", "3")
    assert cli._threads(None) == 3 and cli._threads(2) == 2
    monkeypatch.setenv("FUSIONLM_THREADS", "x")
    with pytest.raises(cli.ConfigError):
        cli._threads(None)
