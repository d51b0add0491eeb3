import numpy as np
import pytest
from fastapi.testclient import TestClient
from numpy.random import default_rng

from tumorlab.retrieval import RetrievalIndex, query
from tumorlab.server import build_app
from conftest import random_embedding_table


@pytest.fixture(scope="module")
def table():
    return random_embedding_table(default_rng(31), n_rows=40, channels=6, n_images=20)


@pytest.fixture(scope="module")
def client(table):
    return TestClient(build_app(table))


def test_healthz_reports_fingerprint(client, table):
    res = client.get("/healthz")
    assert res.status_code == 200
    body = res.json()
    assert body["status"] == "ok"
    assert body["fingerprint"] == table.fingerprint
    assert body["rows"] == len(table.rows)


def test_neighbors_excludes_same_image(client, table):
    row = table.rows[0]
    res = client.get("/neighbors", params={"tumor_id": row.tumor_id, "k": "5"})
    assert res.status_code == 200
    body = res.json()
    assert len(body["neighbors"]) == 5
    same_image_ids = {r.tumor_id for r in table.rows if r.image_id == row.image_id}
    assert not same_image_ids & {n["tumor_id"] for n in body["neighbors"]}


def test_unknown_tumor_id_is_404(client):
    res = client.get("/neighbors", params={"tumor_id": "nope", "k": "3"})
    assert res.status_code == 404
    assert "unknown tumor_id" in res.json()["detail"]


def test_malformed_k_is_400(client, table):
    res = client.get("/neighbors", params={"tumor_id": table.rows[0].tumor_id, "k": "five"})
    assert res.status_code == 400
    res = client.get("/neighbors", params={"tumor_id": table.rows[0].tumor_id, "k": "0"})
    assert res.status_code == 400


def test_endpoint_matches_offline_query(client, table):
    index = RetrievalIndex(table)
    rng = default_rng(0)
    for _ in range(25):
        row = table.rows[int(rng.integers(len(table.rows)))]
        k = int(rng.integers(1, 8))
        body = client.get("/neighbors", params={"tumor_id": row.tumor_id, "k": str(k)}).json()
        offline = query(index, row.embedding, k, exclude_image_id=row.image_id)
        assert [n["tumor_id"] for n in body["neighbors"]] == [n.tumor_id for n in offline.neighbors]
        assert [n["distance"] for n in body["neighbors"]] == [n.distance for n in offline.neighbors]
        assert body["truncated"] == offline.truncated


def test_distances_ascending(client, table):
    body = client.get("/neighbors", params={"tumor_id": table.rows[3].tumor_id, "k": "10"}).json()
    dists = [n["distance"] for n in body["neighbors"]]
    assert dists == sorted(dists)
