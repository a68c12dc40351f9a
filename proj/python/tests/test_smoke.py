import json

import numpy as np
import pytest

import idmkit


def test_discretization_round_trip():
    assert idmkit.discretize_coord(640.0, 1280.0) == 500
    assert idmkit.undiscretize_coord(1000, 96.0) == 96.0
    with pytest.raises(ValueError):
        idmkit.discretize_coord(2.0, 1.0)


def test_episode_frames_and_actions():
    frames, actions = idmkit.episode(seed=3, index=0)
    assert len(frames) == len(actions) + 1
    assert frames[0].shape == (96, 128, 3)
    assert frames[0].dtype == np.uint8
    assert all(isinstance(idmkit.format_action(a), str) for a in actions)
    assert np.array_equal(idmkit.render_screen(5), idmkit.render_screen(5))


def test_generate_and_cli(tmp_path):
    digest = idmkit.generate_corpus(12, 1, tmp_path / "c")
    assert len(digest) == 64
    assert idmkit.corpus_size(tmp_path / "c") == 12
    code, out, _ = idmkit.run_cli(["eval", "--corpus", str(tmp_path / "c"), "--oracle-stub"])
    assert code == 0
    assert json.loads(out)["report"]["action_accuracy"] == 1.0
    code, _, err = idmkit.run_cli(["eval", "--corpus", str(tmp_path / "missing"), "--oracle-stub"])
    assert code == 1 and err


def test_model_predicts_an_action(tmp_path):
    config = {
        "model": {
            "input_resolution": [24, 32], "trunk_layers": 1, "trunk_width": 16,
            "attention_heads": 2, "fine_channels": 4, "encoder_channels": [8, 8, 16],
            "text_reader_channels": [8, 8], "text_embed": 8, "max_text_len": 8,
        },
        "train": {"epochs": 1, "batch_size": 8},
        "split": [0.5, 0.25, 0.25],
    }
    (tmp_path / "cfg.json").write_text(json.dumps(config))
    assert idmkit.generate_corpus(16, 2, tmp_path / "c")
    code, _, err = idmkit.run_cli(["train", "--corpus", str(tmp_path / "c"), "-o", str(tmp_path / "run"),
                                   "--config", str(tmp_path / "cfg.json")])
    assert code == 0, err
    model = idmkit.Model(tmp_path / "run" / "final.ckpt")
    assert model.config["input_resolution"] == [24, 32]
    frames, _ = idmkit.episode(seed=2, index=0)
    action = model.predict(frames[0], frames[1])
    assert action["kind"] in {"click", "scroll", "type", "wait", "move"}
    with pytest.raises(ValueError):
        model.predict(np.zeros((4, 4), np.uint8), np.zeros((4, 4), np.uint8))


def test_make_query():
    assert idmkit.make_query("How do I increase the volume?", "VLC") == "vlc increase volume"
