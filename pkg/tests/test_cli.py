import json
import os

import numpy as np
import pytest

from omba.cli import main
from omba.model import EmbeddingStore, UnitId

CJ_ROWS = """household_key,BASKET_ID,DAY,PRODUCT_ID,QUANTITY,SALES_VALUE
1,900,1,10,1,2.50
1,900,1,11,2,1.00
1,900,1,12,1,4.00
2,901,1,10,1,2.50
2,901,1,13,1,0.99
2,901,1,14,3,3.00
1,902,2,11,1,0.50
1,902,2,12,1,4.00
1,902,2,13,1,0.99
1,902,2,15,1,7.25
"""

FIVE = """basket_id,timestamp,user_id,product_id,price
b0,0,u0,A,1.0
b0,0,u0,B,2.0
b1,86400,u1,A,1.0
b1,86400,u1,B,2.0
b2,172800,u0,A,1.0
b2,172800,u0,C,3.0
b3,259200,u1,B,2.0
b3,259200,u1,C,3.0
b4,345600,u0,C,3.0
b4,345600,u0,D,4.0
"""


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "cj.csv").write_text(CJ_ROWS)
    (tmp_path / "tx.csv").write_text(FIVE)
    (tmp_path / "run.cfg").write_text("dataset = tx.csv\nd = 8\nepochs = 5\nM = 2\nquery_windows = 4\n"
                                      "top_k = 3\noutput_dir = out\nnum_tables = 11\n")
    return tmp_path


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


class TestIngest:
    def test_cj_summary(self, workdir, capsys):
        assert main(["ingest", "cj.csv", "--format", "cj", "--out", "ing"]) == 0
        summary = json.loads((workdir / "ing" / "summary.json").read_text())
        assert summary["baskets"] == 3 and summary["users"] == 2
        assert "Baskets" in capsys.readouterr().out

    def test_missing_file(self, workdir, capsys):
        assert main(["ingest", "nope.csv", "--out", "ing"]) == 2
        assert "nope.csv" in capsys.readouterr().err

    def test_idempotent(self, workdir):
        main(["ingest", "cj.csv", "--format", "cj", "--out", "a"])
        first = read(workdir / "a" / "transactions.csv")
        main(["ingest", "cj.csv", "--format", "cj", "--out", "a"])
        assert read(workdir / "a" / "transactions.csv") == first
        assert read(workdir / "a" / "manifest_ingest.json")

    def test_unknown_format(self, workdir):
        assert main(["ingest", "cj.csv", "--format", "xml", "--out", "a"]) == 2


class TestPipeline:
    def test_all_artifacts(self, workdir):
        for cmd in (["train"], ["mine", "--buckets"], ["eval", "--ranks"]):
            assert main(cmd + ["--config", "run.cfg"]) == 0, cmd
        assert main(["analyze", "tx.csv", "--k", "20", "--out", "out"]) == 0
        names = set(os.listdir(workdir / "out"))
        for f in ("embeddings.omba", "train_log.jsonl", "rules.jsonl", "buckets.json", "report.json", "ranks.csv",
                  "repetition.json", "manifest_train.json", "manifest_mine.json", "manifest_eval.json",
                  "manifest_analyze.json"):
            assert f in names
        report = json.loads((workdir / "out" / "report.json").read_text())
        assert set(report) == {"Embedding", "Pop", "Sup", "Lift"}
        assert set(report["Embedding"]) == {"mrr", "recall", "dcg", "queries"}
        manifest = json.loads((workdir / "out" / "manifest_train.json").read_text())
        assert manifest["config_hash"] and set(manifest["sub_seeds"]) == {"init", "negatives", "ensemble", "eval"}
        rules = [json.loads(l) for l in (workdir / "out" / "rules.jsonl").read_text().splitlines()]
        assert rules and all(r["lift"] is not None for r in rules if {r["product_a"], r["product_b"]} == {"A", "B"})

    def test_deterministic_rules(self, workdir):
        outs = []
        for run in ("r1", "r2"):
            assert main(["train", "--config", "run.cfg", "--set", f"output_dir={run}"]) == 0
            assert main(["mine", "--config", "run.cfg", "--set", f"output_dir={run}"]) == 0
            outs.append((read(workdir / run / "embeddings.omba"), read(workdir / run / "rules.jsonl")))
        assert outs[0] == outs[1]

    def test_flags_beat_config(self, workdir):
        assert main(["train", "--config", "run.cfg", "--set", "d=6", "--d", "5"]) == 0
        assert EmbeddingStore.load(workdir / "out" / "embeddings.omba").d == 5

    def test_mine_clustered_snapshot(self, workdir):
        rng = np.random.default_rng(21)
        center = rng.standard_normal(32)
        s = EmbeddingStore(32)
        for i in range(3):
            s.vector_buffer[s.add(UnitId.product(f"c{i}"), rng=rng)] = center + 0.02 * rng.standard_normal(32)
        for i in range(50):
            s.vector_buffer[s.add(UnitId.product(f"r{i:02d}"), rng=rng)] = rng.standard_normal(32)
        s.save(workdir / "clustered.omba")
        assert main(["mine", "--snapshot", "clustered.omba", "--top-k", "3", "--output-dir", "m"]) == 0
        lines = (workdir / "m" / "rules.jsonl").read_text().splitlines()
        assert len(lines) == 3
        assert {tuple(sorted((json.loads(l)["product_a"], json.loads(l)["product_b"]))) for l in lines} == \
               {("c0", "c1"), ("c0", "c2"), ("c1", "c2")}


class TestErrors:
    def test_config_lists_every_problem(self, workdir, capsys):
        (workdir / "bad.cfg").write_text("d = 0\nfoo = 1\nmode = turbo\n")
        assert main(["train", "--config", "bad.cfg"]) == 2
        err = capsys.readouterr().err
        assert "d:" in err and "foo" in err and "mode" in err

    def test_unknown_flag(self, workdir):
        assert main(["train", "--no-such-flag"]) == 2

    def test_missing_dataset(self, workdir):
        assert main(["train", "--dataset", "absent.csv"]) == 2

    def test_runtime_failure(self, workdir, capsys):
        # window 1 holds too few unseen products to supply 3 negatives
        assert main(["eval", "--config", "run.cfg", "--set", "M=3", "--set", "query_windows=1"]) == 1
        assert "catalog too small" in capsys.readouterr().err

    def test_missing_snapshot(self, workdir):
        assert main(["mine", "--snapshot", "missing.omba"]) == 2
