import pytest
from fastapi.testclient import TestClient

from genrec.cli import main
from genrec.service import create_app

from test_config_cli import TINY


@pytest.fixture(scope="module")
def client(tmp_path_factory):
    out = tmp_path_factory.mktemp("svc")
    for cmd in ("synth", "train-rqvae", "assign-ids", "train-rec"):
        assert main([cmd, "--out", str(out), *TINY]) == 0
    return TestClient(create_app(out))


def test_health(client):
    assert client.get("/health").json() == {"status": "ok"}


def test_stats(client):
    body = client.get("/stats").json()
    assert body["users"] == 30 and body["items"] == 40 and body["id_length"] == 4
    assert 0.0 <= body["collision_rate"] <= 1.0


def test_recommend_and_score_agree(client):
    body = client.post("/recommend", json={"users": ["0"], "k": 3}).json()
    recs = body["results"][0]["items"]
    assert [r["rank"] for r in recs] == [1, 2, 3]
    scores = client.post("/score", json={"user": "0", "items": [r["item"] for r in recs]}).json()["scores"]
    for r in recs:
        assert scores[r["item"]] == pytest.approx(r["score"], abs=1e-5)


def test_rec_id_roundtrip(client):
    rid = client.get("/rec-id/5").json()["rec_id"]
    assert len(rid) == 4
    assert client.post("/lookup", json={"rec_id": rid}).json()["item"] == "5"


def test_errors(client):
    assert client.post("/recommend", json={"users": ["nobody"]}).status_code == 404
    assert client.post("/recommend", json={"users": []}).status_code == 422
    assert client.get("/rec-id/9999").status_code == 404
    assert client.post("/lookup", json={"rec_id": [0, 0, 0, 99]}).status_code == 404
