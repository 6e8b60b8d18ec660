import json

import numpy as np
import pytest

from nora import cli
from nora import config as cfgmod
from nora.checkpoint import load_into, read_checkpoint, save_checkpoint
from nora.data import Dataset, read_dataset, write_dataset
from nora.errors import ConfigError, ContractError
from nora.experiment import OUTPUT_ENV, compare, output_dir
from nora.models import AdaptationPlan, ModelConfig, apply_plan, build, default_base_coeffs, swap_activations
from nora.tensor import Tensor

SMALL = """
model: {arch: mlp, depth: 2, hidden: 16, groups: 4}
data: {n_train: 64, n_test: 128}
pretrain: {epochs: 2}
train: {epochs: 2}
"""

ABLATION = SMALL + """
stages: [pretrain, adapt]
adaptation:
  matrix: {adaptation.plan.nora.mode: [both, numerator-only, denominator-only, const-only]}
"""


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def run_cli(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_defaults_round_trip():
    cfg = cfgmod.ExperimentConfig()
    text = cfgmod.dump(cfg)
    again = cfgmod.parse(text)
    assert again == cfg and cfgmod.dump(again) == text


def test_file_round_trip():
    cfg = cfgmod.parse(ABLATION)
    assert cfgmod.parse(cfgmod.dump(cfg)) == cfg
    assert cfg.model.hidden == 16 and cfg.adaptation.matrix == {"adaptation.plan.nora.mode": ["both", "numerator-only", "denominator-only", "const-only"]}


@pytest.mark.parametrize(
    "text,field",
    [
        ("model: {hiden: 3}", "model.hiden"),
        ("speed: 1", "speed"),
        ("adaptation: {plan: {nora: {rnak: 2}}}", "adaptation.plan.nora.rnak"),
        ("model: {depth: two}", "model.depth"),
        ("train: {lr: -1.0}", "train.lr"),
        ("model: {arch: mlp, hidden: 30}", "model.groups"),
        ("stages: [fit, deploy]", "stages"),
        ("adaptation: {matrix: {model.nothing: [1]}}", "adaptation.matrix.model.nothing"),
    ],
)
def test_config_errors_carry_field(text, field):
    with pytest.raises(ConfigError) as exc:
        cfgmod.parse(text)
    assert exc.value.field == field


def test_matrix_and_variants_expand():
    cfg = cfgmod.parse(
        SMALL
        + """
adaptation:
  matrix: {seed: [0, 1]}
  variants:
    - {name: head, adaptation.plan.mode: head-only}
    - {name: const, adaptation.plan.nora.mode: const-only}
"""
    )
    cells = cfgmod.expand(cfg)
    assert [cid for cid, _ in cells] == ["head/seed=0", "head/seed=1", "const/seed=0", "const/seed=1"]
    assert cells[0][1].adaptation.plan.mode == "head-only" and cells[3][1].seed == 1
    assert cells[2][1].adaptation.plan.nora.mode == "const-only"


def test_duplicate_variant_names():
    with pytest.raises(ConfigError):
        cfgmod.parse("adaptation: {variants: [{name: a}, {name: a}]}")


def test_hash_changes_with_config():
    a = cfgmod.parse(SMALL)
    b = cfgmod.parse(SMALL + "seed: 3\n")
    assert a.hash() != b.hash() and a.hash() == cfgmod.parse(SMALL).hash()


def test_output_dir_env(monkeypatch, tmp_path):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path))
    cfg = cfgmod.parse(SMALL)
    assert output_dir(cfg) == tmp_path / f"experiment-{cfg.hash()}"


def test_fit_only_run(tmp_path, capsys):
    path = write(tmp_path, "fit.yaml", "stages: [fit]\n")
    code, out, _ = run_cli(["run", path, "--out", str(tmp_path / "o")], capsys)
    assert code == 0
    rep = json.loads((tmp_path / "o" / "fit_report.json").read_text())
    assert rep["sup_error"] < 1e-2 and rep["spec"]["degrees"] == [5, 4]
    assert json.loads(out)["fit"]["sup_error"] == rep["sup_error"]


def test_ablation_four_runs_and_determinism(tmp_path, capsys):
    path = write(tmp_path, "abl.yaml", ABLATION)
    outs = []
    for k in range(2):
        code, out, _ = run_cli(["run", path, "--out", str(tmp_path / f"r{k}")], capsys)
        assert code == 0
        outs.append((tmp_path / f"r{k}" / "metrics.csv").read_bytes())
    assert outs[0] == outs[1]
    rep = json.loads((tmp_path / "r0" / "report.json").read_text())
    assert [r["run_id"] for r in rep["runs"]] == ["mode=both", "mode=numerator-only", "mode=denominator-only", "mode=const-only"]
    header = outs[0].decode().splitlines()[0]
    assert header == "run_id,stage,epoch,split,loss,acc,trainable_params,seconds"
    rows = [l.split(",") for l in outs[0].decode().splitlines()[1:]]
    finals = [r for r in rows if r[1] == "adapt" and r[2] == "2" and r[3] == "eval"]
    assert len(finals) == 4
    assert all(rep["config_hash"] in (tmp_path / "r0" / f).read_text() for f in ("report.json",))

    code, out, _ = run_cli(["compare", str(tmp_path / "r0"), str(tmp_path / "r0")], capsys)
    assert code == 0
    lines = out.strip().splitlines()[1:]
    assert len(lines) == 8
    assert all(float(x) == 0.0 for l in lines for x in l.split(",")[5:])
    # a rerun matches in accuracy and budget; wall time is free to differ
    code, out, _ = run_cli(["compare", str(tmp_path / "r0"), str(tmp_path / "r1")], capsys)
    assert code == 0
    assert all(float(x) == 0.0 for l in out.strip().splitlines()[1:] for x in l.split(",")[5:7])


def test_compare_refuses_different_datasets(tmp_path, capsys):
    a = write(tmp_path, "a.yaml", SMALL + "stages: [adapt]\n")
    b = write(tmp_path, "b.yaml", SMALL + "stages: [adapt]\ndata: {n_train: 64, n_test: 128, shift: 3.0}\n")
    assert run_cli(["run", a, "--out", str(tmp_path / "a")], capsys)[0] == 0
    assert run_cli(["run", b, "--out", str(tmp_path / "b")], capsys)[0] == 0
    code, _, err = run_cli(["compare", str(tmp_path / "a"), str(tmp_path / "b")], capsys)
    assert code == 4 and "different target datasets" in json.loads(err)["message"]
    with pytest.raises(ContractError):
        compare([tmp_path / "a"])


def test_exit_code_config(tmp_path, capsys):
    path = write(tmp_path, "bad.yaml", "model: {hiden: 3}\n")
    code, _, err = run_cli(["run", path], capsys)
    assert code == 2 and json.loads(err)["field"] == "model.hiden"
    code, _, err = run_cli(["run", str(tmp_path / "missing.yaml")], capsys)
    assert code == 2


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_exit_code_numeric_saves_last_good(tmp_path, capsys):
    text = """
stages: [adapt]
model: {arch: mlp, depth: 2, hidden: 8, groups: 1, m: 8, n: 0, activation: grouped-rational}
data: {n_train: 64, n_test: 64}
train: {epochs: 2, lr: 1.0e+30, batch_size: 8, schedule: constant, weight_decay: 0.0}
adaptation: {plan: {mode: full}}
"""
    path = write(tmp_path, "div.yaml", text)
    code, _, err = run_cli(["run", path, "--out", str(tmp_path / "o")], capsys)
    payload = json.loads(err)
    assert code == 3 and payload["error"] == "numeric"
    assert payload["info"]["step"] >= 1 and "grad_norm" in payload["info"]
    header, arrays = read_checkpoint(payload["info"]["checkpoint"])
    assert all(np.all(np.isfinite(a)) for a in arrays.values())


def test_fit_subcommand(tmp_path, capsys):
    code, out, _ = run_cli(["fit", "--target", "tanh", "--degrees", "3", "2", "--out", str(tmp_path / "f.json")], capsys)
    assert code == 0 and json.loads(out) == json.loads((tmp_path / "f.json").read_text())
    code, _, err = run_cli(["fit", "--target", "sinc"], capsys)
    assert code == 2


def test_rate_study_subcommand(tmp_path, capsys):
    code, out, _ = run_cli(["rate-study", "--target", "tanh", "--degrees", "2", "3", "4", "5", "--csv", str(tmp_path / "r.csv")], capsys)
    assert code == 0 and len(json.loads(out)["rows"]) == 4
    assert (tmp_path / "r.csv").read_text().startswith("N,m,n,sup_error,l2_error")
    assert run_cli(["rate-study", "--degrees", "2", "3"], capsys)[0] == 4


def test_count_params_subcommand(tmp_path, capsys):
    path = write(tmp_path, "abl.yaml", ABLATION)
    code, out, _ = run_cli(["count-params", path], capsys)
    rows = json.loads(out)
    assert code == 0 and [r["trainable_without_head"] for r in rows] == [2 * 4 * p for p in (26, 14, 12, 2)]
    assert all(r["trainable"] == r["trainable_without_head"] + r["head"] for r in rows)


def test_checkpoint_subcommands(tmp_path, capsys):
    path = write(tmp_path, "mlp.yaml", SMALL + "stages: [pretrain, adapt]\n")
    assert run_cli(["run", path, "--out", str(tmp_path / "o")], capsys)[0] == 0
    ck = tmp_path / "o" / "checkpoints"
    adapted = str(ck / "nora-both.ckpt")
    code, out, _ = run_cli(["adaptability", "--before", adapted, "--after", adapted, "--probes", "32"], capsys)
    assert code == 0 and all(v == 0.0 for v in json.loads(out)["scores"].values())
    code, out, _ = run_cli(["deviation", "--base", adapted, "--adapted", adapted, "--probes", "32"], capsys)
    assert code == 0 and json.loads(out)["violations"] == 0
    code, out, _ = run_cli(["lipschitz", "--checkpoint", adapted, "--probes", "32"], capsys)
    assert code == 0 and json.loads(out)["bound"] > 0
    # the fixed-GELU backbone exposes the same sites, so it is a valid "before"
    code, out, _ = run_cli(["adaptability", "--before", str(ck / "pretrain-seed0.ckpt"), "--after", adapted, "--probes", "8"], capsys)
    assert code == 0 and all(0.0 < v < 1.0 for v in json.loads(out)["scores"].values())


def test_checkpoint_round_trip(tmp_path, rng):
    model = apply_plan(swap_activations(build(ModelConfig()), default_base_coeffs()), AdaptationPlan(mode="nora++"))
    for _, p in model.named_parameters():
        p.data[...] = rng.normal(size=p.shape)
    save_checkpoint(tmp_path / "m.ckpt", model, meta={"k": 1})
    fresh = apply_plan(swap_activations(build(ModelConfig()), default_base_coeffs()), AdaptationPlan(mode="nora++"))
    header = load_into(fresh, tmp_path / "m.ckpt")
    assert header["meta"] == {"k": 1}
    x = rng.normal(size=(3, 16))
    assert np.array_equal(fresh(Tensor(x)).data, model(Tensor(x)).data)
    assert [p.trainable for p in fresh.parameters()] == [p.trainable for p in model.parameters()]
    with pytest.raises(ContractError):
        load_into(build(ModelConfig(depth=3)), tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-8])
    with pytest.raises(ContractError):
        read_checkpoint(tmp_path / "t.ckpt")


def test_dataset_file_round_trip_and_corruption(tmp_path, rng):
    ds = Dataset(rng.normal(size=(7, 3)), rng.integers(0, 4, 7), 4)
    write_dataset(tmp_path / "d.nra", ds)
    raw = (tmp_path / "d.nra").read_bytes()
    assert raw[:4] == b"NRA1" and len(raw) == 16 + 7 * 3 * 8 + 7 * 4
    back = read_dataset(tmp_path / "d.nra")
    assert np.array_equal(back.x, ds.x) and np.array_equal(back.y, ds.y) and back.classes == 4
    (tmp_path / "short.nra").write_bytes(raw[:-1])
    (tmp_path / "magic.nra").write_bytes(b"XXXX" + raw[4:])
    bad_label = bytearray(raw)
    bad_label[-4:] = (9).to_bytes(4, "little")
    (tmp_path / "label.nra").write_bytes(bytes(bad_label))
    for name in ("short.nra", "magic.nra", "label.nra"):
        with pytest.raises(ContractError):
            read_dataset(tmp_path / name)


def test_file_task_runs(tmp_path, capsys, rng):
    ds = Dataset(rng.normal(size=(80, 16)), rng.integers(0, 2, 80), 2)
    write_dataset(tmp_path / "d.nra", ds)
    path = write(tmp_path, "f.yaml", SMALL + f"stages: [adapt]\ndata: {{task: file, path: {tmp_path / 'd.nra'}, n_train: 60, n_test: 20}}\n")
    assert run_cli(["run", path, "--out", str(tmp_path / "o")], capsys)[0] == 0
