import csv
import io
import json
import shutil

import numpy as np
import pytest

from nmrl import cli
from nmrl.checkpoint import load_networks, read_manifest, save_checkpoint
from nmrl.nn import Linear, Mlp
from nmrl.sparsity import NmPattern, realized_sparsity

TINY_TD3 = """\
[td3]
pattern = {pattern}
hidden = 16, 16
batch_size = 32
learning_starts = 64
mask_period = 100
seed = {seed}
"""


def write_config(tmp_path, pattern="2:4", seed=0, budget=400, name="run.ini"):
    text = (
        "[run]\nenv = pendulum\n"
        f"budget = {budget}\neval_interval = 200\neval_episodes = 1\nlog_interval = 100\n"
        f"output_dir = {tmp_path / 'out'}\n\n" + TINY_TD3.format(pattern=pattern, seed=seed)
    )
    path = tmp_path / name
    path.write_text(text)
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    cfg = write_config(root)
    assert cli.main(["train", str(cfg)]) == 0
    return root / "out"


class TestTrain:
    def test_summary_sparsity_matches_analytic(self, trained):
        summary = json.loads((trained / "summary.json").read_text())
        p = NmPattern(2, 4)
        expected = {
            "actor": realized_sparsity([(3, 16, True), (16, 16, True), (16, 1, False)], p),
            "critic1": realized_sparsity([(4, 16, True), (16, 16, True), (16, 1, False)], p),
        }
        for name, value in expected.items():
            report = summary["sparsity"][name]
            assert report["analytic_realized"] == value
        # divisible widths: counted zeros match the analytic figure
        critic = summary["sparsity"]["critic1"]
        assert critic["counted_realized"] == pytest.approx(critic["analytic_realized"], abs=1e-3)
        assert summary["env_steps"] == 400

    def test_artifacts_exist_and_parse(self, trained):
        summary = json.loads((trained / "summary.json").read_text())
        for rel in summary["artifacts"].values():
            assert (trained / rel).exists(), rel
        evals = list(csv.DictReader(open(trained / "eval.csv")))
        assert len(evals) == 400 // 200
        assert [int(r["step"]) for r in evals] == [200, 400]
        sads = list(csv.DictReader(open(trained / "sad.csv")))
        assert list(sads[0]) == ["step", "network", "layer", "sad", "reset_flag"]
        # updates at 100, 200, 300, 400; two sparse layers; three networks
        assert len(sads) == 4 * 2 * 3
        assert all(int(r["sad"]) % 2 == 0 for r in sads)
        records = [json.loads(line) for line in open(trained / "metrics.jsonl")]
        assert sum(r["kind"] == "steps" for r in records) == 4
        assert sum(r["kind"] == "mask_update" for r in records) == 12
        load_networks(trained / "checkpoint")

    def test_missing_env_exits_2(self, tmp_path, capsys):
        path = tmp_path / "bad.ini"
        path.write_text("[run]\nbudget = 10\n")
        assert cli.main(["train", str(path)]) == 2
        assert "env" in capsys.readouterr().err

    def test_unknown_key_exits_2(self, tmp_path, capsys):
        path = write_config(tmp_path)
        path.write_text(path.read_text() + "warp = 9\n")
        assert cli.main(["train", str(path)]) == 2
        assert "warp" in capsys.readouterr().err

    def test_abort_exits_3(self, tmp_path, monkeypatch, capsys):
        from nmrl.agent import Td3Agent

        def explode(self):
            raise FloatingPointError("non-finite critic loss")

        monkeypatch.setattr(Td3Agent, "train_step", explode)
        path = write_config(tmp_path, budget=100)
        assert cli.main(["train", str(path)]) == 3
        assert "aborted" in capsys.readouterr().err
        assert (tmp_path / "out" / "checkpoint_abort" / "manifest.json").exists()


class TestEval:
    def run_eval(self, capsys, *args):
        code = cli.main(["eval", *map(str, args)])
        out = capsys.readouterr()
        return code, out

    def test_reproducible(self, trained, capsys):
        code, first = self.run_eval(capsys, trained / "checkpoint", "--episodes", 1, "--seed", 5)
        assert code == 0
        _, second = self.run_eval(capsys, trained / "checkpoint", "--episodes", 1, "--seed", 5)
        assert json.loads(first.out) == json.loads(second.out)
        assert len(json.loads(first.out)["returns"]) == 1

    def test_kernel_path_agrees(self, trained, capsys):
        _, dense = self.run_eval(capsys, trained / "checkpoint", "--episodes", 2)
        code, packed = self.run_eval(capsys, trained / "checkpoint", "--episodes", 2, "--kernel")
        assert code == 0
        assert json.loads(packed.out)["mean_return"] == pytest.approx(json.loads(dense.out)["mean_return"], rel=1e-3)

    def test_trajectory(self, trained, tmp_path, capsys):
        traj = tmp_path / "traj.csv"
        self.run_eval(capsys, trained / "checkpoint", "--episodes", 1, "--trajectory", traj)
        rows = list(csv.reader(open(traj)))
        assert rows[0] == ["t", "s0", "s1", "s2", "a0", "reward"]
        assert len(rows) == 201

    def test_corrupted_mask_refused(self, trained, tmp_path, capsys):
        ck = tmp_path / "ck"
        shutil.copytree(trained / "checkpoint", ck)
        manifest = read_manifest(ck)
        entry = next(t for t in manifest["tensors"] if t["name"] == "actor/1/E")
        raw = bytearray((ck / "tensors.bin").read_bytes())
        raw[entry["offset"]:entry["offset"] + 16] = np.ones(4, dtype="<f4").tobytes()
        (ck / "tensors.bin").write_bytes(bytes(raw))
        code, out = self.run_eval(capsys, ck)
        assert code == 2
        assert "actor layer 1" in out.err

    def test_dense_pattern_matches_plain(self, tmp_path, capsys):
        cfg = write_config(tmp_path, pattern="4:4", budget=200)
        assert cli.main(["train", str(cfg)]) == 0
        capsys.readouterr()
        nets, manifest = load_networks(tmp_path / "out" / "checkpoint", names={"actor"})
        actor = nets["actor"]
        plain = Mlp([Linear(layer.weight.copy(), layer.bias.copy()) for layer in actor.layers],
                    output=actor.output, scale=actor.scale)
        save_checkpoint(tmp_path / "plain", {"actor": plain}, extra={"env": "pendulum"})
        _, sparse_out = self.run_eval(capsys, tmp_path / "out" / "checkpoint", "--episodes", 3)
        _, plain_out = self.run_eval(capsys, tmp_path / "plain", "--episodes", 3)
        assert json.loads(sparse_out.out)["returns"] == json.loads(plain_out.out)["returns"]


class TestBench:
    def test_csv(self, capsys):
        code = cli.main(["bench", "--shapes", "8x16x3,5x10", "--patterns", "2:4,1:8", "--repetitions", "1"])
        assert code == 0
        rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
        assert len(rows) == 2 * 2 * 2
        for row in rows:
            if row["kind"] == "dense":
                assert float(row["mac_ratio"]) == 1.0
            elif int(row["cols"]) % int(row["m"]) == 0:
                assert float(row["mac_ratio"]) == int(row["n"]) / int(row["m"])
        assert int(rows[0]["macs"]) == 8 * 4 * 2 * 3

    def test_bad_shape(self, capsys):
        assert cli.main(["bench", "--shapes", "8by16"]) == 2


class TestSweep:
    PLAN = """\
[sweep]
mask_periods = 50, 100
patterns = 1:4
seeds = 0, 1
workers = 1

[run]
env = pendulum
budget = 200
eval_interval = 200
eval_episodes = 1
output_dir = {out}

""" + TINY_TD3.format(pattern="1:4", seed=0)

    def test_table(self, tmp_path, capsys):
        plan = tmp_path / "plan.ini"
        plan.write_text(self.PLAN.format(out=tmp_path / "sweep"))
        assert cli.main(["sweep", str(plan)]) == 0
        rows = list(csv.DictReader(open(tmp_path / "sweep" / "sweep.csv")))
        assert len(rows) == 2 * 1 * 2
        assert list(rows[0]) == cli.SWEEP_FIELDS
        agg = list(csv.DictReader(open(tmp_path / "sweep" / "sweep_by_k.csv")))
        assert [int(r["K"]) for r in agg] == [50, 100]
        assert all(int(r["cells"]) == 2 for r in agg)

    def test_failed_cell_recorded(self, tmp_path, monkeypatch, capsys):
        real = cli.run_training

        def flaky(run, *args):
            if run.td3.seed == 1:
                raise RuntimeError("boom")
            return real(run, *args)

        monkeypatch.setattr(cli, "run_training", flaky)
        plan = tmp_path / "plan.ini"
        plan.write_text(self.PLAN.format(out=tmp_path / "sweep"))
        assert cli.main(["sweep", str(plan)]) == 0
        failures = [json.loads(line) for line in open(tmp_path / "sweep" / "failures.jsonl")]
        assert len(failures) == 2
        assert all(f["seed"] == 1 and "boom" in f["error"] for f in failures)
        rows = list(csv.DictReader(open(tmp_path / "sweep" / "sweep.csv")))
        assert len(rows) == 4

    def test_parallel_matches_serial(self, tmp_path, capsys):
        results = {}
        for workers in (1, 2):
            plan = tmp_path / f"plan{workers}.ini"
            plan.write_text(self.PLAN.format(out=tmp_path / f"sweep{workers}"))
            assert cli.main(["sweep", str(plan), "--workers", str(workers)]) == 0
            results[workers] = (tmp_path / f"sweep{workers}" / "sweep.csv").read_text()
        assert results[1] == results[2]
