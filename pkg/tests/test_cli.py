import csv
import json
import shutil
import subprocess

import pytest

from prunix.checkpoint import load_arrays, load_model
from prunix.cli import main

SMALL = """\
train:
  epochs_initial: 2
  epochs_regularized: 2
  epochs_finetune: 1
faults:
  repetitions: 2
"""

CHAIN = [
    ["train"],
    ["prune", "--lambda-p", "0.5", "--mu", "0.7", "--sigma", "0.05", "--gamma", "0.5"],
    ["quantize"],
    ["inject", "--stuck-off", "0.1", "--drift", "0.5", "--drift-fraction", "0.3",
     "--aging-fraction", "0.1", "--aging-levels", "4"],
    ["eval"],
    ["sweep", "--axis", "stuck_fraction", "--grid", "0", "0.1"],
    ["report"],
]

ARTIFACTS = ["metrics.jsonl", "metrics.csv", "sparsity.json", "sparsity.csv", "hist_initial.csv",
             "hist_regularized.csv", "hist_finetune.csv", "sweep_stuck_fraction.csv",
             "report.json"]


def cli(out, *args, config=None, seed=0):
    argv = list(args) + ["--out", str(out), "--seed", str(seed)]
    if config is not None:
        argv += ["--config", str(config)]
    return main(argv)


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    d = tmp_path_factory.mktemp("cfg")
    # share one copy of the bundled corpus instead of regenerating it per run
    data = d / "digits8x8.csv"
    from prunix.data import write_digits_corpus
    write_digits_corpus(data)
    path = d / "small.yaml"
    path.write_text(SMALL + f"data:\n  path: {data}\n")
    return path


@pytest.fixture(scope="module")
def chain(tmp_path_factory, config_file):
    out = tmp_path_factory.mktemp("run")
    codes = [cli(out, *cmd, config=config_file) for cmd in CHAIN]
    return out, codes


def records(out):
    return [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]


class TestChain:
    def test_all_commands_succeed(self, chain):
        _, codes = chain
        assert codes == [0] * len(CHAIN)

    def test_artifacts(self, chain):
        out, _ = chain
        for name in ARTIFACTS:
            assert (out / name).stat().st_size > 0, name
        for name in ["initial.ckpt", "regularized.ckpt", "pruned.ckpt", "quantized.ckpt",
                     "shadow.ckpt", "faults.ckpt"]:
            load_arrays(out / name)

    def test_metric_log(self, chain):
        out, _ = chain
        rows = records(out)
        stages = [r["stage"] for r in rows]
        assert stages == (["initial"] * 2 + ["regularized"] * 2 + ["prune_quantize", "finetune",
                          "inject", "eval", "eval"] + ["sweep:stuck_fraction"] * 4)
        with open(out / "metrics.csv", newline="") as fh:
            table = list(csv.DictReader(fh))
        assert [t["stage"] for t in table] == stages
        assert set(table[0]) == {"stage", "epoch", "train_loss", "val_accuracy",
                                 "test_accuracy", "sparsity", "lambda_s", "faults"}

    def test_eval_replays_injected_faults(self, chain):
        out, _ = chain
        rows = records(out)
        inject = next(r for r in rows if r["stage"] == "inject")
        faulty = next(r for r in rows if r["stage"] == "eval" and r["epoch"] == 1)
        assert faulty["test_accuracy"] == inject["test_accuracy"]
        assert faulty["faults"]["stuck_off"] == 0.1 and faulty["faults"]["aging_levels"] == 4

    def test_prune_flags_persist(self, chain):
        out, _ = chain
        stored = json.loads((out / "overrides.json").read_text())
        assert stored["prune"]["prune.sigma"] == 0.05
        _, meta, _ = load_model(out / "pruned.ckpt")
        assert all(s["accuracy_loss"] <= 0.05 for s in meta["prune_steps"] if s["accepted"])

    def test_sparsity_outputs(self, chain):
        out, _ = chain
        doc = json.loads((out / "sparsity.json").read_text())
        assert {"overall", "sparse_filters", "element", "filter", "prune_steps"} <= set(doc)
        rows = list(csv.reader((out / "sparsity.csv").read_text().splitlines()))
        assert rows[0] == ["layer", "element_sparsity", "filter_sparsity"] and len(rows) == 4

    def test_report(self, chain, capsys):
        out, _ = chain
        assert cli(out, "report") == 0
        printed = capsys.readouterr().out
        assert "finetune" in printed and "sweep:stuck_fraction" in printed

    def test_sweep_stuck_zero_is_clean(self, chain):
        out, _ = chain
        rows = list(csv.DictReader((out / "sweep_stuck_fraction.csv").read_text().splitlines()))
        clean = next(r for r in records(out) if r["stage"] == "eval" and r["epoch"] == 0)
        assert float(rows[0]["mean"]) == clean["test_accuracy"] and float(rows[0]["std"]) == 0


class TestDeterminism:
    def test_same_seed_same_bytes(self, chain, tmp_path, config_file):
        out, _ = chain
        other = tmp_path / "again"
        assert [cli(other, *cmd, config=config_file) for cmd in CHAIN] == [0] * len(CHAIN)
        for name in ARTIFACTS:
            assert (other / name).read_bytes() == (out / name).read_bytes(), name

    def test_rerun_in_place_is_idempotent(self, chain, tmp_path, config_file):
        out, _ = chain
        copy = tmp_path / "copy"
        shutil.copytree(out, copy)
        assert cli(copy, "train", config=config_file) == 0
        assert cli(copy, "quantize", config=config_file) == 0
        assert (copy / "metrics.jsonl").read_bytes() == (out / "metrics.jsonl").read_bytes()

    def test_stale_products_rebuilt(self, chain, tmp_path, config_file):
        out, _ = chain
        copy = tmp_path / "stale"
        shutil.copytree(out, copy)
        assert main(["quantize", "--out", str(copy), "--config", str(config_file),
                     "--set", "train.epochs_initial=1"]) == 0
        assert [r["stage"] for r in records(copy)].count("initial") == 1


class TestExitCodes:
    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.yaml").write_text("bogus: 1\n")
        assert cli(tmp_path / "o", "train", config=tmp_path / "c.yaml") == 1

    def test_missing_config(self, tmp_path):
        assert cli(tmp_path / "o", "train", config=tmp_path / "nope.yaml") == 1

    def test_invalid_flag_value(self, tmp_path, config_file):
        assert cli(tmp_path / "o", "prune", "--mu", "2", config=config_file) == 1
        assert cli(tmp_path / "o2", "inject", "--stuck-off", "-0.5", config=config_file) == 1

    def test_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["train"])  # --out missing
        assert exc.value.code == 1
        with pytest.raises(SystemExit) as exc:
            main(["sweep", "--out", str(tmp_path), "--axis", "colour"])
        assert exc.value.code == 1

    def test_aging_grid_out_of_range(self, chain, tmp_path, config_file):
        out, _ = chain
        copy = tmp_path / "aging"
        shutil.copytree(out, copy)
        assert cli(copy, "sweep", "--axis", "aging", "--grid", "0", "16", config=config_file) == 1

    def test_missing_dataset(self, tmp_path):
        (tmp_path / "c.yaml").write_text(f"data:\n  path: {tmp_path / 'none.csv'}\n")
        assert cli(tmp_path / "o", "train", config=tmp_path / "c.yaml") == 2

    def test_malformed_dataset(self, tmp_path):
        (tmp_path / "d.csv").write_text("0,1,2,3,4\n1,2\n")
        (tmp_path / "c.yaml").write_text(f"data:\n  path: {tmp_path / 'd.csv'}\n")
        assert cli(tmp_path / "o", "train", config=tmp_path / "c.yaml") == 2

    def test_report_without_metrics(self, tmp_path):
        assert cli(tmp_path / "o", "report") == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numerical_failure(self, tmp_path, config_file):
        assert main(["train", "--out", str(tmp_path / "o"), "--config", str(config_file),
                     "--set", "train.learning_rate=1e30"]) == 3


def test_console_script(tmp_path):
    res = subprocess.run(["prunix", "report", "--out", str(tmp_path)], capture_output=True,
                         text=True)
    assert res.returncode == 2
    assert "no metrics" in res.stderr
    res = subprocess.run(["prunix", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("train", "prune", "quantize", "inject", "eval", "sweep", "report"):
        assert cmd in res.stdout
