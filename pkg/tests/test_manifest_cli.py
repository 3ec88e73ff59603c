import csv
import os

import pytest

from peftlab import checks, cli
from peftlab.cacnn import CONTEXT_VECTOR, CacnnConfig
from peftlab.manifest import ManifestError, parse_manifest
from peftlab.span import load_dataset

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def write_manifest(tmp_path, text, name="m.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


class TestParseManifest:
    def test_defaults(self, tmp_path):
        path = write_manifest(tmp_path, "[base]\n")
        spec, = parse_manifest(path)
        assert spec.label == "base"
        assert spec.encoder_config.hidden_size == 32  # desk preset
        assert spec.policy.top_layers_trainable == 2
        assert spec.policy.embeddings_trainable  # full fine-tune default
        assert spec.head == "affine_span"
        assert spec.train_config.batch_size == 8
        assert spec.train_config.epochs == 3
        assert spec.dataset_count == 2000

    def test_embeddings_follow_layers_trainable(self, tmp_path):
        path = write_manifest(tmp_path, "[a]\nlayers_trainable = 0\n"
                                        "[b]\nlayers_trainable = 2\n")
        a, b = parse_manifest(path)
        assert not a.policy.embeddings_trainable
        assert b.policy.embeddings_trainable

    def test_explicit_embedding_override(self, tmp_path):
        path = write_manifest(
            tmp_path, "[a]\nlayers_trainable = 2\nembeddings_trainable = no\n")
        spec, = parse_manifest(path)
        assert not spec.policy.embeddings_trainable

    def test_bert_base_preset_with_adapter(self, tmp_path):
        path = write_manifest(
            tmp_path,
            "[L0-A64]\npreset = bert-base\nlayers_trainable = 0\n"
            "adapter_size = 64\n")
        spec, = parse_manifest(path)
        cfg = spec.encoder_config
        assert (cfg.vocab_size, cfg.hidden_size, cfg.num_layers) == \
            (30522, 768, 12)
        assert cfg.adapter.adapter_size == 64

    def test_cacnn_head_keys(self, tmp_path):
        path = write_manifest(
            tmp_path,
            "[c]\nhead = cacnn\nn_f = 8\nw1 = 3\nw_c = 3\nm = 4\nK = 4\n"
            "w2 = 3\n")
        spec, = parse_manifest(path)
        assert isinstance(spec.head, CacnnConfig)
        assert spec.head.variant == CONTEXT_VECTOR
        assert spec.head.initial_filters == 8
        assert spec.head.sample_filters == 4
        assert spec.head.context_width == 3

    def test_unknown_key_suggestion(self, tmp_path):
        path = write_manifest(tmp_path, "[a]\nadaptor_size = 64\n")
        with pytest.raises(ManifestError, match='did you mean "adapter_size"'):
            parse_manifest(path)

    def test_bad_label(self, tmp_path):
        path = write_manifest(tmp_path, "[has space]\n")
        with pytest.raises(ManifestError, match="invalid"):
            parse_manifest(path)

    def test_layers_trainable_out_of_range(self, tmp_path):
        path = write_manifest(tmp_path, "[a]\nlayers_trainable = 13\n")
        with pytest.raises(ManifestError, match="out of range"):
            parse_manifest(path)

    def test_bad_preset(self, tmp_path):
        path = write_manifest(tmp_path, "[a]\npreset = bert-huge\n")
        with pytest.raises(ManifestError, match="available"):
            parse_manifest(path)

    def test_non_integer_value(self, tmp_path):
        path = write_manifest(tmp_path, "[a]\nepochs = three\n")
        with pytest.raises(ManifestError, match="expected an integer"):
            parse_manifest(path)

    def test_bad_head(self, tmp_path):
        path = write_manifest(tmp_path, "[a]\nhead = mlp\n")
        with pytest.raises(ManifestError, match="affine_span"):
            parse_manifest(path)

    def test_shipped_manifests_parse(self):
        for name in ("table1.cfg", "table2.cfg", "desk.cfg"):
            specs = parse_manifest(os.path.join(REPO, "manifests", name))
            assert specs


class TestCount:
    def test_sweep_table_values(self, tmp_path, capsys):
        out = str(tmp_path / "out")
        code = cli.main(["count",
                         "--config", os.path.join(REPO, "manifests",
                                                  "table1.cfg"),
                         "--out", out])
        assert code == 0
        text = capsys.readouterr().out
        for expected in ("39,938", "7,124,738", "21,294,338", "42,548,738",
                         "108,893,186", "108,311,810"):
            assert expected in text
        with open(os.path.join(out, "counts.csv"), newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [int(r["trainable_params"]) for r in rows] == \
            [39_938, 7_124_738, 21_294_338, 42_548_738, 108_893_186]

    def test_missing_manifest(self, tmp_path, capsys):
        code = cli.main(["count", "--config", str(tmp_path / "absent.cfg"),
                         "--out", str(tmp_path)])
        assert code == 1
        assert "error:" in capsys.readouterr().err


SMALL_RUN = """\
[tiny-full]
dataset_count = 16
dataset_len = 24
epochs = 1

[tiny-frozen]
layers_trainable = 0
dataset_count = 16
dataset_len = 24
epochs = 1
"""


class TestRun:
    def test_run_and_resume(self, tmp_path, capsys):
        manifest = write_manifest(tmp_path, SMALL_RUN)
        out = str(tmp_path / "out")
        assert cli.main(["run", "--manifest", manifest, "--out", out]) == 0
        report = os.path.join(out, "report.csv")
        with open(report, "rb") as fh:
            first = fh.read()
        with open(report, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["label"] for r in rows] == ["tiny-full", "tiny-frozen"]
        for row in rows:
            assert int(row["trainable_params"]) > 0
            assert 0.0 <= float(row["f1"]) <= 100.0
            assert float(row["train_seconds"]) >= 0.0
        assert os.path.exists(os.path.join(out, "loss_tiny-full.csv"))

        capsys.readouterr()
        assert cli.main(["run", "--manifest", manifest, "--out", out]) == 0
        assert "already in" in capsys.readouterr().out
        with open(report, "rb") as fh:
            assert fh.read() == first  # untouched on resume

    def test_partial_resume_keeps_old_rows(self, tmp_path):
        manifest = write_manifest(tmp_path, SMALL_RUN)
        out = str(tmp_path / "out")
        assert cli.main(["run", "--manifest", manifest, "--out", out]) == 0
        report = os.path.join(out, "report.csv")
        with open(report, newline="") as fh:
            rows = list(csv.DictReader(fh))
        kept = rows[0]

        # drop the second row; rerun must restore it and keep the first as-is
        with open(report, "w", newline="") as fh:
            writer = csv.DictWriter(fh, cli.REPORT_COLUMNS,
                                    lineterminator="\n")
            writer.writeheader()
            writer.writerow(kept)
        assert cli.main(["run", "--manifest", manifest, "--out", out]) == 0
        with open(report, newline="") as fh:
            again = list(csv.DictReader(fh))
        assert [r["label"] for r in again] == ["tiny-full", "tiny-frozen"]
        assert again[0] == kept

    def test_bad_manifest_exit_code(self, tmp_path, capsys):
        manifest = write_manifest(tmp_path, "[a]\nbogus_key = 1\n")
        code = cli.main(["run", "--manifest", manifest,
                         "--out", str(tmp_path / "out")])
        assert code == 1
        assert "bogus_key" in capsys.readouterr().err


class TestPlotdata:
    def write_report(self, tmp_path, name, labels):
        path = tmp_path / name
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(cli.REPORT_COLUMNS)
            for i, label in enumerate(labels):
                writer.writerow([label, 1, "", 1000 * (len(labels) - i), 50.0,
                                 60.0 + i, 1.0, 0.5, 1.0])
        return str(path)

    def test_writes_three_csvs_sorted_by_params(self, tmp_path):
        r1 = self.write_report(tmp_path, "a.csv", ["x", "y"])
        r2 = self.write_report(tmp_path, "b.csv", ["z"])
        out = str(tmp_path / "plots")
        assert cli.main(["plotdata", r1, r2, "--out", out]) == 0
        for name in ("train_time_vs_f1.csv", "inference_time_vs_f1.csv",
                     "params_vs_f1.csv"):
            assert os.path.exists(os.path.join(out, name))
        with open(os.path.join(out, "params_vs_f1.csv"), newline="") as fh:
            rows = list(csv.DictReader(fh))
        params = [int(r["trainable_params"]) for r in rows]
        assert params == sorted(params)

    def test_duplicate_labels_rejected(self, tmp_path, capsys):
        r1 = self.write_report(tmp_path, "a.csv", ["x"])
        r2 = self.write_report(tmp_path, "b.csv", ["x"])
        code = cli.main(["plotdata", r1, r2, "--out", str(tmp_path / "p")])
        assert code == 1
        assert "duplicate labels: x" in capsys.readouterr().err

    def test_missing_column_rejected(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("label,f1\nx,70\n")
        code = cli.main(["plotdata", str(bad), "--out", str(tmp_path / "p")])
        assert code == 1
        assert "missing columns" in capsys.readouterr().err


class TestGenerateData:
    def test_deterministic_output(self, tmp_path):
        a, b = str(tmp_path / "a.txt"), str(tmp_path / "b.txt")
        args = ["generate-data", "--seed", "3", "--count", "12",
                "--length", "24", "--vocab-size", "64"]
        assert cli.main(args + ["--out", a]) == 0
        assert cli.main(args + ["--out", b]) == 0
        with open(a) as fa, open(b) as fb:
            assert fa.read() == fb.read()
        assert len(load_dataset(a)) == 12

    def test_infeasible_request_exit_code(self, tmp_path, capsys):
        code = cli.main(["generate-data", "--length", "3",
                         "--out", str(tmp_path / "x.txt")])
        assert code == 1
        assert "error:" in capsys.readouterr().err


class TestGradcheckCommand:
    def test_all_pass_exit_zero(self, capsys):
        assert cli.main(["gradcheck", "--ops-only"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out

    def test_detects_injected_wrong_backward(self, capsys, monkeypatch):
        from peftlab import autograd as ag

        real_gelu = ag.gelu

        def broken_gelu(x):
            out = real_gelu(x)
            inner = out._backward

            def wrong(g):
                inner(g)
                if x.requires_grad and x.grad is not None:
                    x.grad *= 1.01  # corrupt the gradient slightly
            out._backward = wrong
            return out

        monkeypatch.setattr(checks.ag, "gelu", broken_gelu)
        assert cli.main(["gradcheck", "--ops-only"]) == 2
        out = capsys.readouterr().out
        assert any(line.startswith("FAIL") and "gelu" in line
                   for line in out.splitlines())
