import json
import warnings

import numpy as np
import pytest

from pfbr import models as mdl
from pfbr.cli import DEFAULTS, DataWarning, load_config, load_csv_dataset, main
from pfbr.errors import BadLabelError, ConfigError, ParseError
from pfbr.flownet import FlowDims, FlowParams
from pfbr.particle_flow import initial_ensemble
from pfbr.rng import Rng
from pfbr.tasks import GaussianPrior, InferenceTask
from pfbr.train import AdamState, Checkpoint, save_checkpoint

SMALL = {
    "seed": 3,
    "family": {"family": "gaussian", "n_tasks": 5, "M": 10, "L": 1, "d": 1},
    "flow": {"e_x": 3, "e_o": 3, "hidden": 6, "phi_hidden": 5, "g_hidden": 4},
    "train": {"iterations": 3, "vali_every": 1, "n_particles": 8,
              "integrator": {"method": "rk4", "steps": 4}},
    "validation": {"count": 2},
    "infer": {"n_particles": 16},
    "eval": {"reference_samples": 200},
    "smc": {"n_particles": 64},
    "sgld": {"step": 0.01, "steps": 20, "n_chains": 16},
}


def write_config(path, cfg=SMALL):
    path.write_text(json.dumps(cfg))
    return str(path)


def data_lines(path):
    return [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]


@pytest.fixture
def workdir(tmp_path):
    cfg = write_config(tmp_path / "run.json")
    tasks = tmp_path / "tasks.json"
    assert main(["generate-tasks", "--config", cfg, "--held-out", "--out", str(tasks)]) == 0
    return tmp_path, cfg, tasks


class TestConfig:
    def test_dump_defaults(self, capsys):
        assert main(["config", "--dump-defaults"]) == 0
        assert json.loads(capsys.readouterr().out) == json.loads(json.dumps(DEFAULTS))

    def test_unknown_key_names_path(self, tmp_path):
        with pytest.raises(ConfigError, match="train.*'speed'"):
            load_config(write_config(tmp_path / "c.json", {"train": {"speed": 1}}))

    def test_exit_codes(self, tmp_path):
        bad_family = write_config(tmp_path / "a.json", {"family": {"family": "poisson"}})
        assert main(["generate-tasks", "--config", bad_family, "--out", str(tmp_path / "t")]) == 2
        bad_step = write_config(tmp_path / "b.json", {"sgld": {"step": 0.0}})
        assert main(["generate-tasks", "--config", bad_step, "--out", str(tmp_path / "t")]) == 2
        assert main(["train", "--tasks", str(tmp_path / "missing.json"),
                     "--out", str(tmp_path / "m.ckpt")]) == 3

    def test_invalid_family_names_key(self, tmp_path):
        with pytest.raises(ConfigError, match="family"):
            load_config(write_config(tmp_path / "a.json", {"family": {"family": "poisson"}}))


class TestGenerate:
    def test_counts_and_header(self, workdir):
        _, _, tasks = workdir
        doc = json.loads(tasks.read_text())
        assert len(doc["tasks"]) == 5
        assert all(len(t["observations"]) == 10 for t in doc["tasks"])
        assert all(len(b) == 1 for t in doc["tasks"] for b in t["observations"])
        assert doc["header"]["seed"] == 3 and len(doc["header"]["fingerprint"]) == 16

    def test_byte_identical_regeneration(self, workdir):
        tmp, cfg, tasks = workdir
        again = tmp / "again.json"
        main(["generate-tasks", "--config", cfg, "--held-out", "--out", str(again)])
        assert again.read_bytes() == tasks.read_bytes()

    def test_seed_flag_changes_output(self, workdir):
        tmp, cfg, tasks = workdir
        other = tmp / "other.json"
        main(["generate-tasks", "--config", cfg, "--held-out", "--seed", "4", "--out", str(other)])
        assert other.read_bytes() != tasks.read_bytes()


class TestTrainInferEval:
    def test_pipeline(self, workdir):
        tmp, cfg, tasks = workdir
        ckpt = tmp / "model.ckpt"
        assert main(["train", "--config", cfg, "--tasks", str(tasks), "--out", str(ckpt)]) == 0
        hist = tmp / "history.csv"
        assert hist.read_text().startswith("# pfbr config=")
        rows = data_lines(hist)
        assert rows[0] == "iteration,train_loss,vali_loss"
        assert len(rows) == 4 and all(r.split(",")[2] != "" for r in rows[1:])

        first = (hist.read_bytes(), ckpt.read_bytes())
        main(["train", "--config", cfg, "--tasks", str(tasks), "--out", str(ckpt)])
        assert (hist.read_bytes(), ckpt.read_bytes()) == first

        ens = tmp / "ens.json"
        before = ckpt.read_bytes()
        assert main(["infer", "--config", cfg, "--checkpoint", str(ckpt), "--tasks", str(tasks),
                     "--out", str(ens)]) == 0
        assert ckpt.read_bytes() == before
        doc = json.loads(ens.read_text())
        assert all(len(e["positions"]) == 16 for t in doc["tasks"] for e in t["ensembles"])

        metrics = tmp / "metrics.csv"
        assert main(["eval", "--config", cfg, "--ensembles", str(ens), "--tasks", str(tasks),
                     "--out", str(metrics)]) == 0
        rows = data_lines(metrics)
        assert rows[0] == "stage,metric,kernel,value"
        # five metric rows per stage: mmd2, cross entropy and three integrals
        assert len(rows) - 1 == 10 * 5
        assert {r.split(",")[0] for r in rows[1:]} == {str(m) for m in range(1, 11)}

    def test_zero_checkpoint_returns_prior_samples(self, workdir):
        tmp, cfg, tasks = workdir
        dims = FlowDims(d=1, obs_dim=1, **SMALL["flow"])
        params = FlowParams.zeros(dims)
        ckpt = tmp / "zero.ckpt"
        save_checkpoint(Checkpoint(params, AdamState.zeros(params.size)), ckpt)
        ens = tmp / "ens.json"
        main(["infer", "--config", cfg, "--checkpoint", str(ckpt), "--tasks", str(tasks),
              "--out", str(ens)])
        doc = json.loads(ens.read_text())
        task0 = InferenceTask.from_dict(json.loads(tasks.read_text())["tasks"][0])
        prior = initial_ensemble(task0.prior, Rng(3).spawn(0), 16).positions
        for stage in doc["tasks"][0]["ensembles"]:
            np.testing.assert_array_equal(np.array(stage["positions"]), prior)

    def test_dims_mismatch(self, workdir):
        tmp, cfg, tasks = workdir
        params = FlowParams.zeros(FlowDims(d=2, obs_dim=2, **SMALL["flow"]))
        ckpt = tmp / "wrong.ckpt"
        save_checkpoint(Checkpoint(params, AdamState.zeros(params.size)), ckpt)
        assert main(["infer", "--config", cfg, "--checkpoint", str(ckpt), "--tasks", str(tasks),
                     "--out", str(tmp / "e.json")]) == 3

    def test_exact_samples_score_entropy(self, tmp_path):
        model = mdl.mvn_model(1, 3.0)
        task = InferenceTask(GaussianPrior.standard(1), model, [[[0.4]]])
        post = task.oracle()[0]
        tasks = tmp_path / "t.json"
        tasks.write_text(json.dumps({"tasks": [task.to_dict()]}))
        x = post.sample(Rng(1), 5000)
        ens = tmp_path / "e.json"
        ens.write_text(json.dumps({"tasks": [{"task": 0, "ensembles": [
            {"stage": 1, "positions": x.tolist(), "logdens": [0.0] * 5000}]}]}))
        cfg = write_config(tmp_path / "c.json", {"eval": {"metrics": ["cross_entropy"],
                                                          "reference_samples": 5000}})
        out = tmp_path / "m.csv"
        assert main(["eval", "--config", cfg, "--ensembles", str(ens), "--tasks", str(tasks),
                     "--out", str(out)]) == 0
        value = float(data_lines(out)[1].split(",")[3])
        assert abs(value - post.entropy()) < 0.1

    def test_identical_reference_gives_zero_mmd(self, tmp_path):
        task = InferenceTask(GaussianPrior.standard(2), mdl.gmm_model(), [[[0.4]]])
        tasks = tmp_path / "t.json"
        tasks.write_text(json.dumps({"tasks": [task.to_dict()]}))
        x = Rng(0).normal((50, 2)).tolist()
        ens = tmp_path / "e.json"
        ens.write_text(json.dumps({"tasks": [{"task": 0, "ensembles": [
            {"stage": 1, "positions": x, "logdens": [0.0] * 50}]}]}))
        cfg = write_config(tmp_path / "c.json", {"eval": {"metrics": ["mmd2"]}})
        out = tmp_path / "m.csv"
        assert main(["eval", "--config", cfg, "--ensembles", str(ens), "--tasks", str(tasks),
                     "--reference", str(ens), "--out", str(out)]) == 0
        assert data_lines(out)[1] == "1,mmd2,rbf,0"

        kalman = write_config(tmp_path / "k.json", {"eval": {"oracle": "kalman"}})
        assert main(["eval", "--config", kalman, "--ensembles", str(ens), "--tasks", str(tasks),
                     "--out", str(out)]) == 3
        assert main(["eval", "--ensembles", str(ens), "--tasks", str(tasks),
                     "--out", str(out)]) == 3


class TestBaselines:
    @pytest.mark.parametrize("algo", ["smc", "sgld"])
    def test_row_count(self, workdir, algo):
        tmp, cfg, tasks = workdir
        out, ens = tmp / f"{algo}.csv", tmp / f"{algo}.json"
        assert main(["baselines", "--config", cfg, "--tasks", str(tasks), "--algo", algo,
                     "--out", str(out), "--ensembles-out", str(ens)]) == 0
        assert len(data_lines(out)) - 1 == 10 * 5
        doc = json.loads(ens.read_text())
        assert doc["algorithm"] == algo and len(doc["tasks"]) == 5

    def test_zero_step_rejected(self, workdir):
        tmp, _, tasks = workdir
        cfg = dict(SMALL, sgld={"step": 0.0})
        path = write_config(tmp / "z.json", cfg)
        assert main(["baselines", "--config", path, "--tasks", str(tasks), "--algo", "sgld",
                     "--out", str(tmp / "o.csv")]) == 2


    def test_no_oracle_keeps_ensembles(self, tmp_path):
        task = InferenceTask(GaussianPrior.standard(2), mdl.gmm_model(), [[[0.4]], [[1.1]]])
        tasks = tmp_path / "t.json"
        tasks.write_text(json.dumps({"tasks": [task.to_dict()]}))
        cfg = write_config(tmp_path / "c.json", {"smc": {"n_particles": 32}})
        out, ens = tmp_path / "m.csv", tmp_path / "e.json"
        assert main(["baselines", "--config", cfg, "--tasks", str(tasks), "--algo", "smc",
                     "--out", str(out)]) == 3
        with pytest.warns(DataWarning, match="metrics skipped"):
            code = main(["baselines", "--config", cfg, "--tasks", str(tasks), "--algo", "smc",
                         "--out", str(out), "--ensembles-out", str(ens)])
        assert code == 0
        assert data_lines(out) == ["stage,metric,kernel,value"]
        assert len(json.loads(ens.read_text())["tasks"][0]["ensembles"]) == 2

class TestDataset:
    def test_toy(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("f1,f2,label\n1.0,2.0,1\n-1.0,0.5,-1\n0.0,0.0,1\n")
        ds = load_csv_dataset(p)
        assert ds.features.shape == (3, 2)
        np.testing.assert_array_equal(ds.labels, [1.0, -1.0, 1.0])

    def test_zero_one_labels(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("1,2,0\n3,4,1\n")
        with warnings.catch_warnings(record=True) as rec:
            warnings.simplefilter("always")
            ds = load_csv_dataset(p)
        assert any(issubclass(w.category, DataWarning) for w in rec)
        np.testing.assert_array_equal(ds.labels, [-1.0, 1.0])

    def test_ragged_row(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("1,2,1\n# note\n3,4,5,1\n")
        with pytest.raises(ParseError) as err:
            load_csv_dataset(p)
        assert err.value.line == 3

    def test_bad_labels(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("1,2,3\n3,4,1\n")
        with pytest.raises(BadLabelError):
            load_csv_dataset(p)

    def test_dataset_tasks(self, tmp_path):
        rng = Rng(0)
        data, _ = mdl.synthetic_logistic_dataset(rng, 60, 4)
        p = tmp_path / "d.csv"
        np.savetxt(p, data.observations(), delimiter=",")
        cfg = write_config(tmp_path / "c.json", {
            "family": {"family": "blr", "d": 2, "n_tasks": 3, "M": 5, "L": 4},
            "dataset": {"path": str(p), "pca": 2}})
        out = tmp_path / "t.json"
        assert main(["generate-tasks", "--config", cfg, "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert len(doc["tasks"]) == 3
        assert np.array(doc["tasks"][0]["observations"]).shape == (5, 4, 3)

