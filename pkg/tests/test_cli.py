import json

import pytest

from claimcheck.agent import EpisodeConfig, EpisodeRunner, write_trajectories
from claimcheck.cli import main
from claimcheck.kg import FixtureKgBackend
from claimcheck.llm import ScriptedBackend
from claimcheck.policy import default_policy

from conftest import OracleResponder, build_corpus


@pytest.fixture
def workspace(tmp_path):
    """Fixture graph + a sequence-scripted LLM for one depth-1 episode."""
    graph, claims = build_corpus(2, depth=1)
    kg_path = tmp_path / "graph.json"
    kg_path.write_text(json.dumps(graph))
    return tmp_path, str(kg_path), claims


def episode_script(label, citations=()):
    """Scripted replies for one episode over the depth-1 corpus, in call order:
    per-entity prune, hop prune, sufficiency, action selection, verdict."""
    return [
        json.dumps({"scores": [1.0]}),
        json.dumps({"scores": [1.0]}),
        json.dumps({"assessment": "sufficient"}),
        json.dumps({"action": "verdict"}),
        json.dumps({"label": label, "justification": "scripted", "citations": list(citations)}),
    ]


def write_script(tmp_path, sequence, name="script.json"):
    path = tmp_path / name
    path.write_text(json.dumps({"sequence": sequence}))
    return str(path)


class TestCheck:
    def test_supported_exits_0(self, workspace, capsys):
        tmp_path, kg_path, claims = workspace
        script = write_script(tmp_path, episode_script("Supported"))
        code = main(["check", claims[0]["claim"], "--kg", kg_path, "--llm-script", script])
        assert code == 0
        out = capsys.readouterr().out
        assert "Verdict: Supported" in out
        assert "Counters:" in out

    def test_refuted_exits_1(self, workspace):
        tmp_path, kg_path, claims = workspace
        script = write_script(tmp_path, episode_script("Refuted"))
        assert main(["check", claims[1]["claim"], "--kg", kg_path, "--llm-script", script]) == 1

    def test_missing_kg_exits_2(self, workspace, capsys):
        tmp_path, kg_path, claims = workspace
        script = write_script(tmp_path, episode_script("Supported"))
        code = main(["check", claims[0]["claim"], "--kg", "/nonexistent.json",
                     "--llm-script", script])
        assert code == 2
        assert "error:" in capsys.readouterr().err

    def test_scripted_backend_requires_script(self, workspace, capsys):
        _, kg_path, claims = workspace
        assert main(["check", claims[0]["claim"], "--kg", kg_path]) == 2

    def test_out_writes_trajectory(self, workspace):
        tmp_path, kg_path, claims = workspace
        script = write_script(tmp_path, episode_script("Supported"))
        out = tmp_path / "traj.jsonl"
        main(["check", claims[0]["claim"], "--kg", kg_path, "--llm-script", script,
              "--out", str(out)])
        row = json.loads(out.read_text().splitlines()[0])
        assert row["claim"] == claims[0]["claim"]
        assert row["verdict"]["label"] == "Supported"


class TestEval:
    def test_eval_two_claims(self, workspace, capsys):
        tmp_path, kg_path, claims = workspace
        dataset = tmp_path / "data.jsonl"
        dataset.write_text(
            "\n".join(
                json.dumps({"id": c["id"], "claim": c["claim"], "label": c["gold_label"]})
                for c in claims
            )
        )
        # records run in sorted-id order, so scripts concatenate per claim
        script = write_script(
            tmp_path, episode_script("Supported") + episode_script("Refuted")
        )
        report_path = tmp_path / "report.json"
        code = main(["eval", str(dataset), "--kg", kg_path, "--llm-script", script,
                     "--out", str(report_path)])
        assert code == 0
        out = capsys.readouterr().out
        assert "balanced_accuracy: 1.0000" in out
        assert "error taxonomy:" in out
        report = json.loads(report_path.read_text())
        assert report["n"] == 2 and report["balanced_accuracy"] == 1.0

    def test_eval_missing_dataset_exits_2(self, workspace):
        tmp_path, kg_path, _ = workspace
        script = write_script(tmp_path, episode_script("Supported"))
        code = main(["eval", str(tmp_path / "missing.jsonl"), "--kg", kg_path,
                     "--llm-script", script])
        assert code == 2


class TestOptimize:
    def test_epochs_flag_bounds_history(self, tmp_path, capsys):
        graph, claims = build_corpus(8, depth=1)
        kg_path = tmp_path / "graph.json"
        kg_path.write_text(json.dumps(graph))
        dataset = tmp_path / "claims.jsonl"
        dataset.write_text(
            "\n".join(
                json.dumps({"id": c["id"], "claim": c["claim"], "label": c["gold_label"]})
                for c in claims
            )
        )
        # too few claims for the default 100/50 split: clean error, exit 2
        script = write_script(tmp_path, [])
        code = main(["optimize", str(dataset), "--kg", str(kg_path),
                     "--llm-script", script, "--epochs", "2"])
        assert code == 2
        assert "error:" in capsys.readouterr().err


class TestReplay:
    def write_valid(self, tmp_path):
        graph, claims = build_corpus(2, depth=1)
        runner = EpisodeRunner(
            default_policy(), EpisodeConfig(),
            ScriptedBackend(responder=OracleResponder(specs=claims)),
            FixtureKgBackend(data=graph),
        )
        trajectories = [runner.run(c["claim"])[1] for c in claims]
        path = tmp_path / "trajs.jsonl"
        write_trajectories(str(path), trajectories)
        return str(path)

    def test_valid_trajectories_exit_0(self, tmp_path, capsys):
        path = self.write_valid(tmp_path)
        assert main(["replay", path]) == 0
        out = capsys.readouterr().out
        assert "episode 0:" in out and "episode 1:" in out
        assert "INVARIANT VIOLATION" not in out

    def test_violation_exits_1(self, tmp_path, capsys):
        row = {
            "claim": "c",
            "steps": [
                {"action": {"kind": "expandKG", "payload": None},
                 "observation": {"kind": "subgraph_delta"}},
            ],
            "verdict": None,
            "counters": {},
            "warnings": [],
            "forced_reason": "",
        }
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(row) + "\n")
        assert main(["replay", str(path)]) == 1
        assert "INVARIANT VIOLATION" in capsys.readouterr().out

    def test_unreadable_file_exits_2(self, tmp_path):
        assert main(["replay", str(tmp_path / "nope.jsonl")]) == 2

    def test_empty_file_exits_2(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert main(["replay", str(path)]) == 2


class TestConfigPrecedence:
    def test_flag_overrides_file(self, workspace, capsys):
        tmp_path, kg_path, claims = workspace
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"kg": "/nonexistent-from-file.json"}))
        script = write_script(tmp_path, episode_script("Supported"))
        code = main(["check", claims[0]["claim"], "--config", str(config),
                     "--kg", kg_path, "--llm-script", script])
        assert code == 0

    def test_unknown_config_key_rejected(self, workspace, capsys):
        tmp_path, kg_path, claims = workspace
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"warp_drive": True}))
        script = write_script(tmp_path, episode_script("Supported"))
        code = main(["check", claims[0]["claim"], "--config", str(config),
                     "--kg", kg_path, "--llm-script", script])
        assert code == 2
