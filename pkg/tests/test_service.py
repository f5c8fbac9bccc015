import json
import threading

import numpy as np
import pytest
from fastapi.testclient import TestClient

from isrf.io import load_scene, save_scene
from isrf.service import create_app


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory, tiny_synth):
    out = tmp_path_factory.mktemp("svc_scene") / "scene"
    save_scene(out, tiny_synth.field, tiny_synth.decoder, masks=dict(tiny_synth.object_masks))
    return out


@pytest.fixture()
def client(scene_dir):
    return TestClient(create_app())


def open_scene(client, scene_dir):
    r = client.post("/scenes", json={"path": str(scene_dir)})
    assert r.status_code == 200, r.text
    return r.json()["scene_id"]


def open_session(client, scene_id):
    r = client.post("/sessions", json={"scene_id": scene_id})
    assert r.status_code == 200
    return r.json()["session_id"]


def front_cam_json(w=48, h=48):
    from isrf.io import look_at

    f = 0.5 * w / np.tan(np.radians(50.0) / 2)
    return {
        "fx": f, "fy": f, "cx": w / 2, "cy": h / 2, "width": w, "height": h,
        "camera_to_world": look_at((0, 0, -2.6)).tolist(),
    }


def stroke_body(tiny_synth, center, polarity="positive"):
    cam = front_cam_json()
    c2w = np.asarray(cam["camera_to_world"])
    p = np.linalg.inv(c2w) @ np.append(np.asarray(center, dtype=np.float64), 1.0)
    u = cam["fx"] * p[0] / p[2] + cam["cx"] - 0.5
    v = cam["fy"] * p[1] / p[2] + cam["cy"] - 0.5
    return {
        "camera": cam,
        "polyline": [[u - 2, v], [u + 2, v]],
        "radius": 2,
        "polarity": polarity,
        "params": {"kmeans_seed": 0},
    }


class TestLifecycle:
    def test_healthz(self, client):
        r = client.get("/healthz")
        assert r.status_code == 200
        assert r.json() == {"status": "ok"}

    def test_scene_and_session(self, client, scene_dir):
        sid = open_scene(client, scene_dir)
        assert client.post("/sessions", json={"scene_id": "nope"}).status_code == 404
        session = open_session(client, sid)
        assert session.startswith("session-")

    def test_unknown_ids_404(self, client):
        assert client.get("/sessions/zzz/mask").status_code == 404
        assert client.post("/sessions/zzz/undo").status_code == 404
        cam = json.dumps(front_cam_json())
        assert client.get("/scenes/zzz/frame", params={"cam": cam}).status_code == 404


class TestFrames:
    def test_rgb_frame_png(self, client, scene_dir):
        sid = open_scene(client, scene_dir)
        r = client.get(f"/scenes/{sid}/frame",
                       params={"cam": json.dumps(front_cam_json()), "mode": "rgb"})
        assert r.status_code == 200
        assert r.headers["content-type"] == "image/png"
        assert r.content[:8] == b"\x89PNG\r\n\x1a\n"

    def test_empty_overlay_equals_rgb(self, client, scene_dir):
        sid = open_scene(client, scene_dir)
        session = open_session(client, sid)
        cam = json.dumps(front_cam_json())
        rgb = client.get(f"/scenes/{sid}/frame", params={"cam": cam, "mode": "rgb"})
        overlay = client.get(
            f"/scenes/{sid}/frame",
            params={"cam": cam, "mode": "mask_overlay", "session": session},
        )
        assert overlay.content == rgb.content

    def test_frame_deterministic(self, client, scene_dir):
        sid = open_scene(client, scene_dir)
        cam = json.dumps(front_cam_json())
        a = client.get(f"/scenes/{sid}/frame", params={"cam": cam, "mode": "rgb"})
        b = client.get(f"/scenes/{sid}/frame", params={"cam": cam, "mode": "rgb"})
        assert a.content == b.content

    def test_resized_frame(self, client, scene_dir):
        sid = open_scene(client, scene_dir)
        cam = json.dumps(front_cam_json())
        r = client.get(f"/scenes/{sid}/frame",
                       params={"cam": cam, "mode": "rgb", "width": 24, "height": 24})
        from PIL import Image
        import io as stdio

        img = Image.open(stdio.BytesIO(r.content))
        assert img.size == (24, 24)


class TestStrokes:
    def test_stroke_grow_undo_mask(self, client, scene_dir, tiny_synth):
        sid = open_scene(client, scene_dir)
        session = open_session(client, sid)
        body = stroke_body(tiny_synth, (-0.45, 0.05, 0.0))
        r = client.post(f"/sessions/{session}/stroke", json=body)
        assert r.status_code == 200, r.text
        stats = r.json()
        assert stats["voxels_added_or_removed"] > 0
        assert stats["mask_stats"]["popcount"] > 0

        r = client.post(f"/sessions/{session}/grow", json={"extra_iters": 2})
        assert r.status_code == 200

        r = client.get(f"/sessions/{session}/mask")
        assert r.status_code == 200
        n_bytes = (tiny_synth.field.geometry.node_count + 7) // 8
        assert len(r.content) == n_bytes

        r = client.post(f"/sessions/{session}/undo")
        assert r.status_code == 200
        r = client.post(f"/sessions/{session}/undo")
        assert r.status_code == 200
        assert r.json()["mask_stats"]["popcount"] == 0
        # history empty now
        r = client.post(f"/sessions/{session}/undo")
        assert r.status_code == 422
        assert r.json()["kind"] == "empty_history"

    def test_empty_selection_422(self, client, scene_dir, tiny_synth):
        sid = open_scene(client, scene_dir)
        session = open_session(client, sid)
        body = stroke_body(tiny_synth, (-0.45, 0.05, 0.0))
        body["polyline"] = [[0, 0], [2, 0]]
        r = client.post(f"/sessions/{session}/stroke", json=body)
        assert r.status_code == 422
        assert r.json()["kind"] == "empty_selection"

    def test_concurrent_mutation_409(self, scene_dir, tiny_synth):
        # hold the session's mutation lock (what an in-flight stroke does)
        # and confirm a second mutation is rejected with 409
        app = create_app()
        c = TestClient(app)
        sid = open_scene(c, scene_dir)
        session = open_session(c, sid)
        handle = app.state.sessions[session]
        body = stroke_body(tiny_synth, (-0.45, 0.05, 0.0))
        with handle.lock:
            r = c.post(f"/sessions/{session}/stroke", json=body)
            assert r.status_code == 409
            assert r.json()["kind"] == "busy"
            assert c.post(f"/sessions/{session}/undo").status_code == 409
        # released: the same stroke succeeds
        assert c.post(f"/sessions/{session}/stroke", json=body).status_code == 200


class TestEdits:
    def test_edit_affects_session_frames_only(self, client, scene_dir, tiny_synth):
        sid = open_scene(client, scene_dir)
        session = open_session(client, sid)
        cam = json.dumps(front_cam_json())
        before = client.get(f"/scenes/{sid}/frame", params={"cam": cam, "mode": "rgb"})
        r = client.post(f"/sessions/{session}/edit",
                        json={"kind": "remove", "mask": "sphere"})
        assert r.status_code == 200
        assert r.json()["edit_id"].startswith("edit-")
        with_session = client.get(
            f"/scenes/{sid}/frame", params={"cam": cam, "mode": "rgb", "session": session})
        plain = client.get(f"/scenes/{sid}/frame", params={"cam": cam, "mode": "rgb"})
        assert with_session.content != before.content
        assert plain.content == before.content

    def test_unknown_scene_mask_422(self, client, scene_dir):
        sid = open_scene(client, scene_dir)
        session = open_session(client, sid)
        r = client.post(f"/sessions/{session}/edit", json={"kind": "remove", "mask": "nope"})
        assert r.status_code == 422


class TestSceneRoot:
    def test_scene_root_restricts(self, scene_dir, monkeypatch, tmp_path):
        monkeypatch.setenv("ISRF_SCENE_ROOT", str(scene_dir.parent))
        c = TestClient(create_app())
        r = c.post("/scenes", json={"path": scene_dir.name})
        assert r.status_code == 200
        r = c.post("/scenes", json={"path": "../outside"})
        assert r.status_code == 422
