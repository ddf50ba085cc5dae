"""CLI subcommands: exit codes, file schemas, and cross-module consistency."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest

from cdglab.cli import main

BASE_CONFIG = {
    "encoder": {"seq_len": 16, "seed": 10},
    "model": {"n_components": 4, "d_x": 8, "d_c": 8, "seed": 0},
    "schedule": {"steps": 12, "sigma_max": 10.0, "sigma_min": 0.01},
    "guidance": {"mode": "cdg", "guidance_scale": 3.0, "r_deg": 1.0},
    "prompts": ["a man is cooking", "a cat sits on the mat"],
    "seed": 0,
}


@pytest.fixture
def config_file(tmp_path) -> Path:
    path = tmp_path / "config.json"
    path.write_text(json.dumps(BASE_CONFIG))
    return path


def _read_csv(path: Path) -> list[dict]:
    with path.open() as fh:
        return list(csv.DictReader(fh))


class TestErrors:
    def test_missing_config_file(self, tmp_path, capsys):
        code = main(["rank-tokens", "--config", str(tmp_path / "nope.json"),
                     "--prompt", "hi", "--out", str(tmp_path / "o")])
        assert code == 2
        assert "error:" in capsys.readouterr().err

    def test_invalid_json(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        code = main(["sample", "--config", str(bad), "--out", str(tmp_path / "o")])
        assert code == 2

    def test_unknown_config_key(self, tmp_path):
        doc = dict(BASE_CONFIG, bogus=1)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(doc))
        assert main(["sample", "--config", str(path)]) == 2

    def test_refuses_overwrite_without_force(self, config_file, tmp_path):
        out = str(tmp_path / "out")
        args = ["rank-tokens", "--config", str(config_file), "--prompt", "hi",
                "--out", out]
        assert main(args) == 0
        assert main(args) == 2
        assert main(args + ["--force"]) == 0

    def test_invalid_r_deg(self, config_file, tmp_path):
        code = main(["build-mask", "--config", str(config_file), "--prompt", "hi",
                     "--r-deg", "3.0", "--out", str(tmp_path / "out")])
        assert code == 1

    def test_bad_grid(self, config_file, tmp_path):
        code = main(["sweep", "--config", str(config_file), "--grid", "a,b",
                     "--out", str(tmp_path / "out")])
        assert code == 2


class TestRankTokens:
    def test_empty_prompt(self, config_file, tmp_path):
        out = tmp_path / "out"
        assert main(["rank-tokens", "--config", str(config_file), "--prompt", "",
                     "--out", str(out)]) == 0
        doc = json.loads((out / "rankings.json").read_text())
        assert all(t["type"] == "ctx_agg" for t in doc["tokens"])
        assert sorted(t["rank"] for t in doc["tokens"]) == list(range(1, 17))

    def test_content_tokens_outrank_padding(self, config_file, tmp_path):
        out = tmp_path / "out"
        assert main(["rank-tokens", "--config", str(config_file),
                     "--prompt", "a man is cooking minecraft style",
                     "--out", str(out)]) == 0
        doc = json.loads((out / "rankings.json").read_text())
        top = sorted(doc["tokens"], key=lambda t: t["rank"])[:3]
        assert any(t["type"] == "content" for t in top)
        rows = _read_csv(out / "rankings.csv")
        assert len(rows) == 16 and set(rows[0]) == {"position", "score", "type"}


class TestBuildMask:
    def test_boundary_zeros_content_positions(self, config_file, tmp_path):
        out = tmp_path / "out"
        assert main(["build-mask", "--config", str(config_file),
                     "--prompt", "a man is cooking", "--r-deg", "1.0",
                     "--out", str(out)]) == 0
        doc = json.loads((out / "mask.json").read_text())
        for pos in doc["positions"]:
            assert pos["bit"] == (0 if pos["type"] == "content" else 1)

    def test_zero_ratio_all_ones(self, config_file, tmp_path):
        out = tmp_path / "out"
        assert main(["build-mask", "--config", str(config_file),
                     "--prompt", "a man is cooking", "--r-deg", "0.0",
                     "--out", str(out)]) == 0
        doc = json.loads((out / "mask.json").read_text())
        assert all(pos["bit"] == 1 for pos in doc["positions"])
        assert doc["replaced_indices"] == []

    def test_matches_degradation_module_example(self, tmp_path):
        doc = dict(BASE_CONFIG, encoder={"seq_len": 8, "seed": 10})
        path = tmp_path / "config.json"
        path.write_text(json.dumps(doc))
        out = tmp_path / "out"
        assert main(["build-mask", "--config", str(path),
                     "--prompt", "a man is cooking", "--r-deg", "1.25",
                     "--out", str(out)]) == 0
        mask = json.loads((out / "mask.json").read_text())
        assert mask["k_content"] == 4 and mask["k_ctxagg"] == 1
        assert len(mask["replaced_indices"]) == 5


class TestSample:
    def test_outputs_and_call_counts(self, config_file, tmp_path):
        out = tmp_path / "out"
        assert main(["sample", "--config", str(config_file), "--out", str(out)]) == 0
        meta = json.loads((out / "metadata.json").read_text())
        assert len(meta["runs"]) == 2
        # r_deg=1.0 boundary: no importance computation in any run
        assert all(r["wpr_call_count"] == 0 for r in meta["runs"])
        rows = _read_csv(out / "trajectory_000.csv")
        assert len(rows) == BASE_CONFIG["schedule"]["steps"] + 1

    def test_cdg_full_ratio_equals_cfg(self, tmp_path):
        finals = {}
        for name, guidance in (
            ("cfg", {"mode": "cfg", "guidance_scale": 3.0}),
            ("cdg", {"mode": "cdg", "guidance_scale": 3.0, "r_deg": 2.0}),
        ):
            doc = dict(BASE_CONFIG, guidance=guidance)
            path = tmp_path / f"{name}.json"
            path.write_text(json.dumps(doc))
            out = tmp_path / name
            assert main(["sample", "--config", str(path), "--out", str(out)]) == 0
            meta = json.loads((out / "metadata.json").read_text())
            finals[name] = [r["final"] for r in meta["runs"]]
        assert finals["cfg"] == finals["cdg"]

    def test_unit_scale_matches_mode_none(self, tmp_path):
        finals = {}
        for name, guidance in (
            ("none", {"mode": "none", "guidance_scale": 1.0}),
            ("cfg1", {"mode": "cfg", "guidance_scale": 1.0}),
        ):
            doc = dict(BASE_CONFIG, guidance=guidance)
            path = tmp_path / f"{name}.json"
            path.write_text(json.dumps(doc))
            out = tmp_path / name
            assert main(["sample", "--config", str(path), "--out", str(out)]) == 0
            meta = json.loads((out / "metadata.json").read_text())
            finals[name] = [r["final"] for r in meta["runs"]]
        assert finals["none"] == finals["cfg1"]


class TestSweep:
    def test_small_grid(self, config_file, tmp_path):
        out = tmp_path / "out"
        assert main(["sweep", "--config", str(config_file), "--grid", "0,1,2",
                     "--out", str(out)]) == 0
        rows = _read_csv(out / "sweep.csv")
        assert len(rows) == 3 * len(BASE_CONFIG["prompts"])
        by_prompt: dict[str, list[dict]] = {}
        for row in rows:
            by_prompt.setdefault(row["prompt_index"], []).append(row)
        for series in by_prompt.values():
            counts = [int(r["replaced_count"]) for r in series]
            assert counts == sorted(counts)  # nestedness
            zero_row = next(r for r in series if float(r["r_deg"]) == 0.0)
            assert float(zero_row["final_distance_to_conditional"]) == 0.0

    def test_row_count_on_default_grid(self, tmp_path):
        doc = dict(
            BASE_CONFIG,
            prompts=[f"prompt number {i}" for i in range(8)],
            schedule={"steps": 4, "sigma_max": 10.0, "sigma_min": 0.01},
        )
        path = tmp_path / "config.json"
        path.write_text(json.dumps(doc))
        out = tmp_path / "out"
        assert main(["sweep", "--config", str(path), "--out", str(out)]) == 0
        rows = _read_csv(out / "sweep.csv")
        assert len(rows) == 21 * 8  # default grid 0.0..2.0 step 0.1


class TestDiagnose:
    def test_schema_and_ranges(self, config_file, tmp_path):
        out = tmp_path / "out"
        assert main(["diagnose", "--config", str(config_file), "--out", str(out)]) == 0
        rows = _read_csv(out / "geometry.csv")
        assert len(rows) == 2 * BASE_CONFIG["schedule"]["steps"]
        for row in rows:
            assert row["method"] in ("cfg", "cdg")
            for key in ("decoupling_mean", "interference_mean"):
                if row[key] not in ("", "None"):
                    assert 0.0 <= float(row[key]) <= 1.0
        detail = json.loads((out / "geometry.json").read_text())
        assert detail["detail"]
