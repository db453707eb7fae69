import csv
import math

import numpy as np
import pytest

from pam import cli
from pam.accounting import parse_records

TINY = """\
[data]
n_identities = 4
n_per_identity = 8
eval_identities = 4
eval_per_identity = 4

[train]
epochs = 2
batch_size = 16
lr_decay_epochs = 1

[output]
dir = {out}
"""


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


class TestParams:
    def test_check_flag(self, capsys):
        code, out, _ = run(capsys, "params", "PAM12", "PAM34", "PAM1234", "PAM123", "PAM124", "--check-paper")
        assert code == 0
        assert out.count(" ok") == 8

    def test_check_flag_mismatch_exits_one(self, capsys, monkeypatch):
        from pam import accounting
        monkeypatch.setitem(accounting.PUBLISHED_DELTAS, "PAM12", 6_977)
        assert run(capsys, "params", "--check-paper")[0] == 1

    def test_baseline_delta_zero(self, capsys):
        code, out, _ = run(capsys, "params", "baseline", "--format", "records")
        assert code == 0
        assert parse_records(out)[0]["delta_params"] == 0

    def test_dense(self, capsys):
        code, out, _ = run(capsys, "params", "PAM12", "--conv", "dense", "--format", "records")
        rec = parse_records(out)[-1]
        assert code == 0 and rec["name"] == "PAM12-C" and rec["delta_params"] == 372_160

    def test_bad_plan(self, capsys):
        code, _, err = run(capsys, "params", "PAM9")
        assert code == 2 and "PAM9" in err

    def test_compare_ratio(self, capsys):
        code, out, _ = run(capsys, "compare", "PAM12", "DREAM")
        assert code == 0
        ratio = float(out.strip().splitlines()[-1].split("=")[-1])
        assert ratio == pytest.approx(525_312 / 6_976, abs=1e-10)


class TestGateCurve:
    def test_values(self, capsys, tmp_path):
        path = tmp_path / "g.csv"
        assert run(capsys, "gate-curve", "--step", "0.5", "--out", str(path))[0] == 0
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        table = {float(r["yaw"]): float(r["coefficient"]) for r in rows}
        assert len(rows) == 361
        assert table[45.0] == 0.5
        assert abs(table[90.0] - 1 / (1 + math.exp(-10))) < 1e-12
        for y, v in table.items():
            assert table[-y] == v
            assert abs(v - 1 / (1 + math.exp(-10 * (abs(y) / 45 - 1)))) < 1e-11

    def test_unwritable(self, capsys, tmp_path):
        code, _, err = run(capsys, "gate-curve", "--out", str(tmp_path / "missing" / "g.csv"))
        assert code == 1 and "cannot write" in err

    def test_bad_step(self, capsys):
        assert run(capsys, "gate-curve", "--step", "0")[0] == 2


class TestGradcheck:
    def test_block_report(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "pam", "--seed", "7")
        assert code == 0
        assert "pam drm.dconv1.weight" in out and "pam cam.mlp_w1" in out

    def test_unknown(self, capsys):
        assert run(capsys, "gradcheck", "everything")[0] == 2


class TestTrainEval:
    def test_emit_default_is_loadable(self, capsys, tmp_path):
        path = tmp_path / "default.ini"
        assert run(capsys, "train", str(path), "--emit-default")[0] == 0
        from pam.config import RunConfig, read_config
        assert read_config(path) == RunConfig()

    def test_invalid_config_exit_two(self, capsys, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[train]\nlr = x\nbatch = 3\n")
        code, _, err = run(capsys, "train", str(path))
        assert code == 2 and "lr" in err and "batch" in err

    def test_missing_config_exit_two(self, capsys, tmp_path):
        assert run(capsys, "train", str(tmp_path / "none.ini"))[0] == 2

    def test_train_then_eval_reproduces(self, capsys, tmp_path):
        out = tmp_path / "run"
        cfg = tmp_path / "tiny.ini"
        cfg.write_text(TINY.format(out=out))
        code, train_out, _ = run(capsys, "train", str(cfg))
        assert code == 0
        for name in ("checkpoint.npz", "metrics.csv", "config.ini"):
            assert (out / name).exists()
        header = (out / "metrics.csv").read_text().splitlines()[0]
        assert header == "epoch,loss,acc,acc_y0_30,acc_y30_60,acc_y60_90"

        code, eval_out, _ = run(capsys, "eval", str(out / "checkpoint.npz"))
        assert code == 0
        trained = dict(l.split("=") for l in train_out.splitlines() if l.startswith("acc"))
        evaluated = dict(l.split("=") for l in eval_out.splitlines() if l.startswith("acc"))
        assert trained == evaluated

        again = tmp_path / "again"
        code, _, _ = run(capsys, "train", str(cfg), "--out", str(again))
        assert code == 0
        assert (again / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()

    def test_eval_version_mismatch(self, capsys, tmp_path):
        import json
        from pam.backbone import BackboneConfig, PlacementPlan, build_model, save_checkpoint
        from pam.config import RunConfig, dump_config
        path = tmp_path / "checkpoint.npz"
        save_checkpoint(build_model(BackboneConfig.toy(), PlacementPlan()), path)
        (tmp_path / "config.ini").write_text(dump_config(RunConfig()))
        with np.load(path) as z:
            arrays = {k: z[k] for k in z.files}
        meta = json.loads(bytes(arrays["__meta__"]))
        meta["format_version"] = 2
        arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        np.savez(path, **arrays)
        code, _, err = run(capsys, "eval", str(path))
        assert code == 1 and "version" in err
