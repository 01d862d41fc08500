import json

import pytest

from formularank.cli import main
from formularank.config import PROFILES, load_config
from formularank.encoder import load_checkpoint
from formularank.retrieval import read_run
from formularank.semantic import read_vectors
from formularank.store import read_store


class TestConfig:
    def test_desk_defaults(self):
        cfg = load_config()
        assert cfg.run.profile == "desk"
        assert (cfg.model.dim, cfg.train.batch_size) == (32, 64)
        assert (cfg.search.stage1_k, cfg.search.final_n) == (2000, 100)

    def test_full_profile_pins_training_values(self):
        cfg = load_config(profile="full")
        t, a, s = cfg.train_config(), cfg.augment_config(), cfg.search_config()
        assert (t.dim, t.n_layers, t.batch_size, t.learning_rate, t.epochs) == (400, 2, 2560, 1e-4, 25)
        assert t.min_frequency == 11
        assert (a.p1, a.p2, a.p3, a.mask_rate) == (0.3, 0.005, 0.002, 0.01)
        assert (s.lam, s.stage1_k, s.final_n) == (0.5, 500_000, 1000)

    def test_file_then_overrides(self):
        text = "[run]\nprofile = full\nseed = 3\n\n[train]\nepochs = 2\n"
        cfg = load_config(text, ["train.epochs=5", "augment.masking=false"])
        assert cfg.run.profile == "full" and cfg.run.seed == 3
        assert cfg.train.epochs == 5 and cfg.augment.masking is False
        assert cfg.model.dim == 400

    def test_cli_profile_beats_file(self):
        assert load_config("[run]\nprofile = full\n", profile="desk").model.dim == 32

    @pytest.mark.parametrize("text, overrides", [
        ("[model]\nwidth = 3\n", []),
        ("[nonsense]\nx = 1\n", []),
        (None, ["train.epochs"]),
        (None, ["epochs=3"]),
        (None, ["train.epochs=many"]),
        (None, ["search.lam=2"]),
        (None, ["semantic.unit=lines"]),
        ("[run]\nprofile = huge\n", []),
    ])
    def test_rejected(self, text, overrides):
        with pytest.raises(ValueError):
            load_config(text, overrides)

    def test_ini_round_trip(self):
        for name, cfg in PROFILES.items():
            assert load_config(cfg.to_ini()) == load_config(profile=name)


def write_corpus(path, rows):
    path.write_text("".join("\t".join(r) + "\n" for r in rows), encoding="utf-8")


class TestCliExitCodes:
    def test_ingest_three_rows(self, tmp_path, capsys):
        corpus = tmp_path / "c.tsv"
        write_corpus(corpus, [("f1", "p1", "(+ a b)", "ctx one"), ("f2", "p2", "(+ a a)", ""),
                              ("f3", "p3", "(= x (sqrt y))", "ctx\\tthree")])
        assert main(["ingest", str(corpus), str(tmp_path / "s.jsonl")]) == 0
        entries = read_store(tmp_path / "s.jsonl")
        assert [e.record.formula_id for e in entries] == ["f1", "f2", "f3"]
        # two-node graphs stay retrievable but are not trained on
        assert [e.train for e in entries] == [True, False, True]
        assert entries[2].record.context == "ctx three"
        assert json.loads(capsys.readouterr().out)["trainable"] == 2

    def test_empty_corpus(self, tmp_path):
        (tmp_path / "c.tsv").write_text("")
        assert main(["ingest", str(tmp_path / "c.tsv"), str(tmp_path / "s.jsonl")]) == 1

    def test_too_many_parse_failures(self, tmp_path):
        corpus = tmp_path / "c.tsv"
        write_corpus(corpus, [("f1", "p1", "(+ a b", ""), ("f2", "p2", "(+ a b)", "")])
        assert main(["ingest", str(corpus), str(tmp_path / "s.jsonl")]) == 1

    def test_missing_input(self, tmp_path):
        assert main(["evaluate", str(tmp_path / "nope.tsv"), str(tmp_path / "q.tsv")]) == 1

    def test_bad_override(self, tmp_path):
        assert main(["config", "--set", "train.bogus=1"]) == 2

    def test_bad_config_file(self, tmp_path):
        (tmp_path / "x.ini").write_text("[train]\nepochs = ten\n")
        assert main(["config", "--config", str(tmp_path / "x.ini")]) == 2

    @pytest.mark.parametrize("argv", [[], ["frobnicate"], ["fuse", "only_one.tsv", "--out", "x"],
                                      ["search", "--store", "s"]])
    def test_usage_errors(self, argv):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2

    def test_full_profile_dry_run(self, capsys):
        assert main(["train", "--profile", "full", "--dry-run"]) == 0
        plan = json.loads(capsys.readouterr().out)
        assert plan["train"]["batch_size"] == 2560 and plan["search"]["stage1_k"] == 500_000

    def test_config_command_prints_ini(self, capsys):
        assert main(["config", "--profile", "full", "--set", "search.lam=0.25"]) == 0
        out = capsys.readouterr().out
        assert "[search]" in out and "lam = 0.25" in out
        assert load_config(out).search.lam == 0.25

    def test_train_without_store(self):
        assert main(["train"]) == 1


class TestPipelineArtifacts:
    def test_outputs_are_well_formed(self, desk_pipeline, desk_dir):
        p = desk_pipeline
        params = load_checkpoint(p["model.ckpt"])
        assert params.dim == 32 and params.n_layers == 2
        ids, S = read_vectors(p["struct.vec"])
        assert len(ids) == 1560 and S.shape == (1560, 32)
        sem_ids, T = read_vectors(p["sem.vec"])
        assert sem_ids == ids and T.shape == (1560, 256)
        run = read_run(p["run.tsv"])
        assert len({r.topic_id for r in run}) == 20 and len(run) == 20 * 100
        log_lines = p["train.jsonl"].read_text().splitlines()
        assert len(log_lines) == 10
        assert set(json.loads(log_lines[0])) >= {"epoch", "mean_loss", "pos_cos", "neg_cos", "wallclock_s"}

    def test_evaluate_table_output(self, desk_pipeline, desk_dir, capsys):
        assert main(["evaluate", str(desk_pipeline["run.tsv"]), str(desk_dir / "qrels.tsv"),
                     str(desk_dir / "visual_ids.tsv")]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0].split() == ["topic", "nDCG'@10", "P'@5", "P'@10"]
        assert out[-2].startswith("all")

    def test_search_with_imported_topic_vectors(self, desk_pipeline, desk_dir, tmp_path):
        p = desk_pipeline
        # topics without imported vectors fall back to structure only, so the run still has every topic
        out = tmp_path / "run.tsv"
        assert main(["search", "--store", str(p["store.jsonl"]), "--checkpoint", str(p["model.ckpt"]),
                     "--struct", str(p["struct.vec"]), "--sem", str(p["sem.vec"]),
                     "--topics", str(desk_dir / "topics.tsv"), "--topic-vectors", str(p["sem.vec"]),
                     "--out", str(out)]) == 0
        assert len({r.topic_id for r in read_run(out)}) == 20
