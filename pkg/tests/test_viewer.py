import hashlib
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from fovray.noise import gen_stbn
from fovray.renderer import RenderSettings, Scene, render_full
from fovray.sample_maps import FAST_PRESET
from fovray.viewer import (
    MODES,
    create_app,
    default_session,
    handle_control,
    parse_frame_message,
)
from fovray.volume import Light, TransferFunction, make_procedural_volume


@pytest.fixture(scope="module")
def scene():
    vol = make_procedural_volume("sphere_shells", (16, 16, 16))
    return Scene(volume=vol, tf=TransferFunction.default(),
                 light=Light(direction=(-1, -1, -0.5)))


@pytest.fixture(scope="module")
def noise():
    return gen_stbn(32, 32, 4, seed=5)


@pytest.fixture(scope="module")
def client(scene, noise):
    app = create_app(scene, film=(96, 54), noise=noise, frontend_dir="/nonexistent")
    with TestClient(app) as c:
        yield c


class TestHttpEndpoints:
    def test_healthz(self, client):
        assert client.get("/healthz").json() == {"status": "ok"}

    def test_scene_metadata(self, client):
        info = client.get("/scene").json()
        assert info["volume"]["dims"] == [16, 16, 16]
        assert info["film"] == [96, 54]
        assert "sparse_raw" in info["modes"]
        assert "reconstructed" not in info["modes"]  # no checkpoint loaded
        assert info["ranges"]["p_b"] == [0.001, 1.0]
        assert info["presets"]["fast"]["base_density"] == 0.03


class TestHandleControl:
    def test_focus_clamped_with_warning(self):
        state = default_session((96, 54))
        out = handle_control(state, {"focus": [500, -3]}, (96, 54), False)
        assert out.fovea.focus == (95.0, 0.0)
        assert "clamped" in out.warning

    def test_unknown_field_ignored_with_warning(self):
        state = default_session((96, 54))
        out = handle_control(state, {"exposure": 2.0}, (96, 54), False)
        assert "exposure" in out.warning
        assert out.fovea.focus == state.fovea.focus

    def test_preset_values_applied(self):
        state = default_session((96, 54))
        out = handle_control(state, {"p_b": 0.03, "sigma": 0.02}, (96, 54), False)
        assert float(np.asarray(out.fovea.base_density)) == FAST_PRESET["base_density"]
        assert out.fovea.sigma == FAST_PRESET["sigma"]
        assert out.warning == ""

    def test_last_writer_wins_in_order(self):
        state = default_session((96, 54))
        state = handle_control(state, {"p_b": 0.01}, (96, 54), False)
        state = handle_control(state, {"p_b": 0.10}, (96, 54), False)
        assert float(np.asarray(state.fovea.base_density)) == 0.10

    def test_reconstructed_requires_checkpoint(self):
        state = default_session((96, 54))
        out = handle_control(state, {"mode": "reconstructed"}, (96, 54), False)
        assert out.mode == "sparse_raw"
        assert "checkpoint" in out.warning

    def test_unknown_mode_warns(self):
        state = default_session((96, 54))
        out = handle_control(state, {"mode": "xray"}, (96, 54), False)
        assert out.mode == "sparse_raw"
        assert "unknown mode" in out.warning


def _recv_until(ws, predicate, limit=20):
    for _ in range(limit):
        frame = parse_frame_message(ws.receive_bytes())
        if predicate(frame):
            return frame
    raise AssertionError("condition not met within frame budget")


class TestWebSocketSession:
    def test_frames_echo_applied_config(self, client):
        with client.websocket_connect("/ws") as ws:
            first = parse_frame_message(ws.receive_bytes())
            assert first["mode"] == "sparse_raw"
            assert first["width"] == 96 and first["height"] == 54
            ws.send_text(json.dumps({"type": "control", "focus": [5, 7],
                                     "p_b": 0.07, "sigma": 0.06}))
            frame = _recv_until(ws, lambda f: f["focus"] == (5.0, 7.0))
            assert frame["p_b"] == pytest.approx(0.07)
            assert frame["sigma"] == pytest.approx(0.06)

    def test_ground_truth_mode_matches_render_full(self, client, scene):
        with client.websocket_connect("/ws") as ws:
            ws.send_text(json.dumps({"type": "control", "mode": "ground_truth"}))
            frame = _recv_until(ws, lambda f: f["mode"] == "ground_truth")
            service = client.app.state.service
            reference = render_full(scene, service.camera, service.settings)
            from fovray import pngio

            ref_png = pngio.encode_rgb_png(reference.rgba[..., :3])
            assert hashlib.sha256(frame["png"]).hexdigest() == \
                hashlib.sha256(ref_png).hexdigest()

    def test_density_increase_raises_render_time(self, client):
        with client.websocket_connect("/ws") as ws:
            ws.send_text(json.dumps({"type": "control", "p_b": 0.01, "sigma": 0.0}))
            lo = _recv_until(ws, lambda f: f["p_b"] == pytest.approx(0.01))
            lo_ms = np.median([lo["timings"]["render_ms"]] + [
                parse_frame_message(ws.receive_bytes())["timings"]["render_ms"]
                for _ in range(4)])
            ws.send_text(json.dumps({"type": "control", "p_b": 0.85}))
            hi = _recv_until(ws, lambda f: f["p_b"] == pytest.approx(0.85))
            hi_ms = np.median([hi["timings"]["render_ms"]] + [
                parse_frame_message(ws.receive_bytes())["timings"]["render_ms"]
                for _ in range(4)])
            assert hi_ms > lo_ms

    def test_malformed_message_keeps_session_alive(self, client):
        with client.websocket_connect("/ws") as ws:
            parse_frame_message(ws.receive_bytes())
            ws.send_text("this is not json")
            saw_error = False
            for _ in range(10):
                msg = ws.receive()
                if "text" in msg:
                    payload = json.loads(msg["text"])
                    assert payload["type"] == "error"
                    saw_error = True
                    break
            assert saw_error
            assert parse_frame_message(_next_bytes(ws))["frame_id"] >= 0

    def test_warning_echoed_in_frame(self, client):
        with client.websocket_connect("/ws") as ws:
            parse_frame_message(ws.receive_bytes())
            ws.send_text(json.dumps({"type": "control", "nonsense": 1}))
            frame = _recv_until(ws, lambda f: f["warning"] != "")
            assert "nonsense" in frame["warning"]


def _next_bytes(ws):
    for _ in range(10):
        msg = ws.receive()
        if "bytes" in msg and msg["bytes"] is not None:
            return msg["bytes"]
    raise AssertionError("no frame received")
