"""CLI pipeline tests: synth -> train -> eval -> retrieve -> gradcheck,
including exit codes, byte determinism, and checkpoint round-trips."""

import numpy as np
import pytest

from factgrid.checkpoint import load_checkpoint, save_checkpoint
from factgrid.cli import main
from factgrid.data import read_feature_file
from factgrid.evaluation import read_report
from factgrid.heads import build_model


SMALL = """
adj_count = 4
noun_count = 5
feature_dim = 8
examples_per_pair = 12
holdout_fraction = 0.1
label_noise_rate = 0.05
noise_scale = 0.3
trunk = 12,10
fork_hidden = 8
latent_dim = 2
epochs = 2
batch_size = 32
"""


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(SMALL)
    return str(path)


def run(*argv):
    return main(list(argv))


def synth(tmp_path, small_config, seed=0, name="data"):
    out = tmp_path / name
    code = run("synth", "--config", small_config, "--seed", str(seed),
               "--out", str(out))
    assert code == 0
    return out / "synthetic.fg"


def train(tmp_path, small_config, dataset, model="fact", seed=0, name="run",
          extra=()):
    out = tmp_path / name
    code = run("train", "--config", small_config, "--dataset", str(dataset),
               "--model", model, "--seed", str(seed), "--out", str(out),
               "--no-plots", *extra)
    assert code == 0
    return out


class TestSynth:
    def test_writes_parseable_file(self, tmp_path, small_config, capsys):
        path = synth(tmp_path, small_config)
        vocab, examples = read_feature_file(path)
        assert vocab.adj_count == 4 and vocab.noun_count == 5
        assert len(examples) == 4 * 5 * 12
        census = capsys.readouterr().out
        assert "held-out cells" in census

    def test_zero_holdout_reports_zero_unseen(self, tmp_path, small_config, capsys):
        out = tmp_path / "nohold"
        code = run("synth", "--config", small_config, "--holdout-fraction", "0",
                   "--out", str(out))
        assert code == 0
        assert "0 held-out cells" in capsys.readouterr().out

    def test_byte_identical_reruns(self, tmp_path, small_config):
        a = synth(tmp_path, small_config, seed=3, name="a")
        b = synth(tmp_path, small_config, seed=3, name="b")
        assert a.read_bytes() == b.read_bytes()

    def test_seed_changes_output(self, tmp_path, small_config):
        a = synth(tmp_path, small_config, seed=1, name="a")
        b = synth(tmp_path, small_config, seed=2, name="b")
        assert a.read_bytes() != b.read_bytes()


class TestTrain:
    def test_zero_epochs_checkpoint_is_initialization(self, tmp_path, small_config):
        dataset = synth(tmp_path, small_config)
        out = train(tmp_path, small_config, dataset, seed=5, extra=("--epochs", "0"))
        model, _ = load_checkpoint(out / "checkpoint.txt")
        vocab, _ = read_feature_file(dataset)
        fresh = build_model("fact", vocab, 8, trunk_widths=(12, 10),
                            fork_hidden=8, latent_dim=2, seed=5)
        for a, b in zip(model.parameters(), fresh.parameters()):
            np.testing.assert_array_equal(a.value, b.value)

    def test_same_seed_identical_checkpoints(self, tmp_path, small_config):
        dataset = synth(tmp_path, small_config)
        out_a = train(tmp_path, small_config, dataset, seed=7, name="a")
        out_b = train(tmp_path, small_config, dataset, seed=7, name="b")
        assert (out_a / "checkpoint.txt").read_bytes() == (out_b / "checkpoint.txt").read_bytes()
        assert (out_a / "train_log.csv").read_bytes() == (out_b / "train_log.csv").read_bytes()

    def test_loss_improves_over_epochs(self, tmp_path, small_config):
        dataset = synth(tmp_path, small_config)
        out = train(tmp_path, small_config, dataset, extra=("--epochs", "3"))
        rows = [
            line.split(",")
            for line in (out / "train_log.csv").read_text().splitlines()
            if not line.startswith("#")
        ]
        by_epoch = {}
        for _, epoch, _, loss in rows:
            by_epoch.setdefault(int(epoch), []).append(float(loss))
        means = [np.mean(by_epoch[e]) for e in sorted(by_epoch)]
        assert means[-1] < means[0]

    def test_log_format(self, tmp_path, small_config):
        dataset = synth(tmp_path, small_config)
        out = train(tmp_path, small_config, dataset, name="logrun")
        lines = (out / "train_log.csv").read_text().splitlines()
        assert lines[0].startswith("0,0,")
        assert lines[-1].startswith("#final train_top1=")
        iters = [int(l.split(",")[0]) for l in lines if not l.startswith("#")]
        assert iters == list(range(len(iters)))

    def test_missing_dataset_is_usage_error(self, small_config, capsys):
        assert run("train", "--config", small_config) == 1
        assert "dataset" in capsys.readouterr().err

    def test_plots_rendered_by_default(self, tmp_path, small_config):
        dataset = synth(tmp_path, small_config)
        out = tmp_path / "figrun"
        code = run("train", "--config", small_config, "--dataset", str(dataset),
                   "--out", str(out))
        assert code == 0
        assert (out / "fig_train_loss.png").exists()


class TestEval:
    def test_reports_and_summary(self, tmp_path, small_config, capsys):
        dataset = synth(tmp_path, small_config)
        out = train(tmp_path, small_config, dataset)
        evaldir = tmp_path / "eval"
        code = run("eval", "--checkpoint", str(out / "checkpoint.txt"),
                   "--dataset", str(dataset), "--out", str(evaldir), "--no-plots")
        assert code == 0
        seen = read_report(evaldir / "eval_seen.csv")
        unseen = read_report(evaldir / "eval_unseen.csv")
        assert seen.policy == "seen"
        assert unseen.policy == "union"
        assert set(seen.summary) == {1, 5, 10}
        stdout = capsys.readouterr().out
        assert "top-1" in stdout and "top-10" in stdout

    def test_train_split_reproduces_trainer_accuracy(self, tmp_path, small_config):
        dataset = synth(tmp_path, small_config)
        out = train(tmp_path, small_config, dataset, name="reprorun")
        logged = None
        for line in (out / "train_log.csv").read_text().splitlines():
            if line.startswith("#final train_top1="):
                logged = float(line.split("=", 1)[1])
        assert logged is not None
        evaldir = tmp_path / "eval_train"
        code = run("eval", "--checkpoint", str(out / "checkpoint.txt"),
                   "--dataset", str(dataset), "--out", str(evaldir),
                   "--split", "train", "--no-unseen", "--no-plots")
        assert code == 0
        report = read_report(evaldir / "eval_seen_train.csv")
        assert abs(report.summary[1] - logged) < 1e-12

    def test_flat_model_with_unseen_flag_fails_loudly(self, tmp_path, small_config, capsys):
        dataset = synth(tmp_path, small_config)
        out = train(tmp_path, small_config, dataset, model="flat", name="flatrun")
        code = run("eval", "--checkpoint", str(out / "checkpoint.txt"),
                   "--dataset", str(dataset), "--out", str(tmp_path / "e2"),
                   "--unseen", "--no-plots")
        assert code == 2
        assert "unseen" in capsys.readouterr().err

    def test_flat_model_default_skips_unseen(self, tmp_path, small_config, capsys):
        dataset = synth(tmp_path, small_config)
        out = train(tmp_path, small_config, dataset, model="flat", name="flatskip")
        evaldir = tmp_path / "e3"
        code = run("eval", "--checkpoint", str(out / "checkpoint.txt"),
                   "--dataset", str(dataset), "--out", str(evaldir), "--no-plots")
        assert code == 0
        assert (evaldir / "eval_seen.csv").exists()
        assert not (evaldir / "eval_unseen.csv").exists()
        assert "skipping" in capsys.readouterr().out

    def test_gap_report_between_models(self, tmp_path, small_config):
        dataset = synth(tmp_path, small_config)
        fact = train(tmp_path, small_config, dataset, model="fact", name="gfact")
        fork = train(tmp_path, small_config, dataset, model="fork", name="gfork")
        eval_fork = tmp_path / "efork"
        assert run("eval", "--checkpoint", str(fork / "checkpoint.txt"),
                   "--dataset", str(dataset), "--out", str(eval_fork),
                   "--no-plots") == 0
        eval_fact = tmp_path / "efact"
        code = run("eval", "--checkpoint", str(fact / "checkpoint.txt"),
                   "--dataset", str(dataset), "--out", str(eval_fact),
                   "--gap-against", str(eval_fork / "eval_seen.csv"),
                   "--gap-k", "10", "--no-plots")
        assert code == 0
        gap_lines = (eval_fact / "gap_top10.csv").read_text().splitlines()
        assert gap_lines[0] == "pair,adjective,noun,seen,acc_a,acc_b,gap"
        gaps = [float(l.split(",")[-1]) for l in gap_lines[1:] if not l.startswith("#")]
        assert gaps == sorted(gaps, reverse=True)

    def test_vocab_hash_mismatch_rejected(self, tmp_path, small_config, capsys):
        dataset_a = synth(tmp_path, small_config, seed=1, name="da")
        dataset_b = synth(tmp_path, small_config, seed=2, name="db")
        out = train(tmp_path, small_config, dataset_a, name="hashrun", seed=1)
        code = run("eval", "--checkpoint", str(out / "checkpoint.txt"),
                   "--dataset", str(dataset_b), "--out", str(tmp_path / "e4"),
                   "--no-plots")
        assert code == 2
        assert "hash" in capsys.readouterr().err

    def test_figures_rendered(self, tmp_path, small_config):
        dataset = synth(tmp_path, small_config)
        out = train(tmp_path, small_config, dataset, name="figs")
        evaldir = tmp_path / "efig"
        code = run("eval", "--checkpoint", str(out / "checkpoint.txt"),
                   "--dataset", str(dataset), "--out", str(evaldir))
        assert code == 0
        assert (evaldir / "fig_topk.png").exists()


class TestRetrieve:
    def test_top_n_zero_empty_exit_zero(self, tmp_path, small_config, capsys):
        dataset = synth(tmp_path, small_config)
        out = train(tmp_path, small_config, dataset, name="r0")
        code = run("retrieve", "--checkpoint", str(out / "checkpoint.txt"),
                   "--dataset", str(dataset), "--adjective", "adj00",
                   "--noun", "noun00", "--top-n", "0",
                   "--out", str(tmp_path / "ret0"))
        assert code == 0
        lines = (tmp_path / "ret0" / "retrieval_adj00_noun00.csv").read_text().splitlines()
        assert lines == ["rank,example,score"]

    def test_unseen_cell_with_fact_model(self, tmp_path, small_config, capsys):
        dataset = synth(tmp_path, small_config)
        out = train(tmp_path, small_config, dataset, name="rnovel")
        vocab, _ = read_feature_file(dataset)
        i, j = sorted(vocab.unseen_pairs)[0]
        code = run("retrieve", "--checkpoint", str(out / "checkpoint.txt"),
                   "--dataset", str(dataset),
                   "--adjective", vocab.adjectives[i], "--noun", vocab.nouns[j],
                   "--top-n", "5", "--out", str(tmp_path / "retn"))
        assert code == 0
        body = capsys.readouterr().out
        assert len([l for l in body.splitlines() if l[:1].isdigit()]) == 5

    def test_unknown_word_suggests_nearest(self, tmp_path, small_config, capsys):
        dataset = synth(tmp_path, small_config)
        out = train(tmp_path, small_config, dataset, name="rbad")
        code = run("retrieve", "--checkpoint", str(out / "checkpoint.txt"),
                   "--dataset", str(dataset), "--adjective", "adj0",
                   "--noun", "noun00", "--out", str(tmp_path / "retb"))
        assert code == 2
        err = capsys.readouterr().err
        assert "closest" in err and "adj0" in err


class TestGradcheckCommand:
    def test_default_passes(self, tmp_path, capsys):
        code = run("gradcheck", "--feature-dim", "10", "--trunk", "12,10",
                   "--fork-hidden", "8", "--out", str(tmp_path))
        assert code == 0
        out = capsys.readouterr().out
        assert "failures=0" in out

    def test_minimal_latent_dim_passes(self, tmp_path):
        assert run("gradcheck", "--feature-dim", "6", "--trunk", "8",
                   "--latent-dim", "1", "--out", str(tmp_path)) == 0

    def test_corrupted_backward_detected(self, tmp_path, capsys):
        code = run("gradcheck", "--feature-dim", "10", "--trunk", "12,10",
                   "--corrupt-backward", "--out", str(tmp_path))
        assert code == 3
        assert "FAIL" in capsys.readouterr().out


class TestCheckpointRoundTrip:
    def test_load_save_reproduces_eval_outputs(self, tmp_path, small_config):
        dataset = synth(tmp_path, small_config)
        out = train(tmp_path, small_config, dataset, name="ckrt")
        model, echo = load_checkpoint(out / "checkpoint.txt")
        assert echo["model"] == "fact"
        resaved = tmp_path / "resaved.txt"
        save_checkpoint(resaved, model, echo)
        assert (out / "checkpoint.txt").read_bytes() == resaved.read_bytes()
        eval_a = tmp_path / "ck_a"
        eval_b = tmp_path / "ck_b"
        for ck, dest in ((out / "checkpoint.txt", eval_a), (resaved, eval_b)):
            assert run("eval", "--checkpoint", str(ck), "--dataset", str(dataset),
                       "--out", str(dest), "--no-plots") == 0
        assert (eval_a / "eval_seen.csv").read_bytes() == (eval_b / "eval_seen.csv").read_bytes()
        assert (eval_a / "eval_unseen.csv").read_bytes() == (eval_b / "eval_unseen.csv").read_bytes()


class TestConfigHandling:
    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("learning_rate = 0.1\n")
        assert run("synth", "--config", str(cfg), "--out", str(tmp_path)) == 1
        assert "unknown config key" in capsys.readouterr().err

    def test_flags_override_file(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("adj_count = 3\nnoun_count = 3\nexamples_per_pair = 2\n"
                       "holdout_fraction = 0\nfeature_dim = 4\n")
        out = tmp_path / "o"
        assert run("synth", "--config", str(cfg), "--adj-count", "4",
                   "--out", str(out)) == 0
        vocab, _ = read_feature_file(out / "synthetic.fg")
        assert vocab.adj_count == 4

    def test_bad_value_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "v.cfg"
        cfg.write_text("epochs = soon\n")
        assert run("train", "--config", str(cfg)) == 1
        assert "bad value" in capsys.readouterr().err

    def test_missing_dataset_file_is_data_error(self, tmp_path, capsys):
        code = run("eval", "--checkpoint", str(tmp_path / "none.txt"),
                   "--dataset", str(tmp_path / "none.fg"),
                   "--out", str(tmp_path), "--no-plots")
        assert code == 2 or code == 1
