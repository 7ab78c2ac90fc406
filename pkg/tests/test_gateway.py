"""Socket service: framing, request handling, replay determinism."""

import socket
import struct

import numpy as np
import pytest

from ntd.calibrate import CalibrationConfig, calibrate
from ntd.detect import Query, detect_one
from ntd.docfmt import parse_kv
from ntd.errors import FormatError
from ntd.evalharness import SyntheticSpec, generate_synthetic
from ntd.gateway import (
    LENGTH_PREFIX,
    MAX_FRAME,
    GatewayClient,
    GatewayServer,
    encode_frame,
    parse_request,
    render_error,
    render_request,
    render_response,
    request_rng,
)
from ntd.simdist import Metric


@pytest.fixture(scope="module")
def world():
    store, heldout = generate_synthetic(
        SyntheticSpec(classes=4, dim=12, records_per_class=30,
                      heldout_per_class=20, noise_sigma=0.1, seed=30))
    table = calibrate(store, CalibrationConfig(n=3, metric=Metric.COSINE,
                                               preset_frr=0.05, rounds=300,
                                               seed=31))
    return store, heldout, table


@pytest.fixture()
def server(world):
    store, _, table = world
    gw = GatewayServer(store, table, n=3, metric=Metric.COSINE, seed=99)
    host, port = gw.start_in_thread()
    yield gw, host, port
    gw.stop_in_thread()


def fields(payload):
    return dict(parse_kv(payload))


# ---------------------------------------------------------------------------
# codec
# ---------------------------------------------------------------------------

def test_request_roundtrip():
    emb = np.array([0.25, -1.0, 3.5])
    payload = render_request("q7", 2, emb)
    query = parse_request(payload)
    assert query.input_id == "q7"
    assert query.predicted_class == 2
    assert np.array_equal(query.embedding, emb)


def test_request_rejects_malformed_payloads():
    emb = np.ones(3)
    good = render_request("q", 1, emb)
    for bad in (
        good.replace("predicted_class=1", "predicted_class=one"),
        good.replace("embedding=", "embedding=nan 0 "),
        good.replace("embedding=", "vector="),
        "input_id=q\n",
        good.replace("input_id=q", "input_id="),
        "not a document",
        good + "embedding=1 2 3\n",
    ):
        with pytest.raises(FormatError):
            parse_request(bad)


def test_response_document_fields():
    payload = render_response("q", "benign", 0.5, 0.25, 3, 42)
    parsed = fields(payload)
    assert parsed == {
        "input_id": "q",
        "decision": "benign",
        "score": "0.5",
        "threshold": "0.25",
        "class": "3",
        "latency_us": "42",
    }
    assert fields(render_error("q", "boom")) == {"input_id": "q", "error": "boom"}


def test_frame_encoding_prefixes_byte_length():
    frame = encode_frame("abc")
    assert frame == struct.pack(">I", 3) + b"abc"
    assert LENGTH_PREFIX.unpack(frame[:4])[0] == 3


def test_frame_encoding_enforces_limit():
    with pytest.raises(FormatError):
        encode_frame("x" * (MAX_FRAME + 1))


# ---------------------------------------------------------------------------
# request handling without sockets
# ---------------------------------------------------------------------------

def test_handle_payload_matches_direct_detection(world):
    store, heldout, table = world
    gw = GatewayServer(store, table, n=3, metric=Metric.COSINE, seed=7)
    emb = heldout.vectors[heldout.positions(1)[0]].astype(np.float64)
    response = fields(gw.handle_payload(render_request("a", 1, emb)))
    direct = detect_one(Query("a", 1, emb), store, table, n=3,
                        metric=Metric.COSINE, rng=request_rng(7, 0))
    assert response["decision"] == direct.decision
    assert float(response["score"]) == direct.score
    assert float(response["threshold"]) == direct.threshold
    assert response["class"] == "1"
    assert int(response["latency_us"]) >= 0
    assert gw.request_count == 1


def test_handle_payload_counts_only_well_formed_requests(world):
    store, _, table = world
    gw = GatewayServer(store, table, n=3, metric=Metric.COSINE, seed=7)
    assert "error" in fields(gw.handle_payload("garbage"))
    assert gw.request_count == 0
    emb = store.vectors[0].astype(np.float64)
    gw.handle_payload(render_request("a", 0, emb))
    gw.handle_payload(render_request("b", 0, emb))
    assert gw.request_count == 2


def test_handle_payload_reports_detection_errors(world):
    store, _, table = world
    gw = GatewayServer(store, table, n=3, metric=Metric.COSINE, seed=7)
    emb = store.vectors[0].astype(np.float64)
    unknown = fields(gw.handle_payload(render_request("u", 99, emb)))
    assert unknown["input_id"] == "u"
    assert "99" in unknown["error"]
    short = fields(gw.handle_payload(render_request("s", 0, emb[:-1])))
    assert "error" in short
    # failures after parsing still consume an index slot: replay math relies
    # on index == arrival order of well-formed requests
    assert gw.request_count == 2


# ---------------------------------------------------------------------------
# live socket behavior
# ---------------------------------------------------------------------------

def test_round_trip_over_socket(server, world):
    store, heldout, table = world
    _, host, port = server
    emb = heldout.vectors[0].astype(np.float64)
    with GatewayClient(host, port) as client:
        response = fields(client.request_raw(
            render_request("live-0", int(heldout.class_ids[0]), emb)))
    assert response["input_id"] == "live-0"
    assert response["decision"] in ("benign", "trigger")


def test_verdicts_replay_offline(server, world):
    store, heldout, table = world
    gw, host, port = server
    start_index = gw.request_count
    served = []
    with GatewayClient(host, port) as client:
        for k in range(20):
            pos = k % heldout.count
            emb = heldout.vectors[pos].astype(np.float64)
            cls = int(heldout.class_ids[pos])
            response = fields(client.request_raw(
                render_request(f"r{k}", cls, emb)))
            served.append((f"r{k}", cls, emb, response))
    # every served verdict is reproducible from (service seed, request index)
    for offset, (input_id, cls, emb, response) in enumerate(served):
        verdict = detect_one(Query(input_id, cls, emb), store, table, n=3,
                             metric=Metric.COSINE,
                             rng=request_rng(99, start_index + offset))
        assert response["decision"] == verdict.decision
        assert float(response["score"]) == verdict.score
        assert float(response["threshold"]) == verdict.threshold


def test_malformed_frames_get_errors_and_connection_survives(server, world):
    store, heldout, _ = world
    _, host, port = server
    with GatewayClient(host, port) as client:
        # zero-length frame
        client.send_frame(struct.pack(">I", 0))
        assert "error" in fields(client.read_response())
        # invalid UTF-8 body
        client.send_frame(struct.pack(">I", 4) + b"\xff\xfe\xfd\xfc")
        assert "error" in fields(client.read_response())
        # valid UTF-8, not a request document
        client.send_frame(encode_frame("hello"))
        assert "error" in fields(client.read_response())
        # connection still serves a real request afterwards
        emb = heldout.vectors[0].astype(np.float64)
        response = fields(client.request_raw(
            render_request("after", int(heldout.class_ids[0]), emb)))
        assert response["decision"] in ("benign", "trigger")


def test_oversized_frame_is_drained_with_error(server, world):
    _, heldout, _ = world
    _, host, port = server
    with GatewayClient(host, port) as client:
        oversize = MAX_FRAME + 8
        client.send_frame(struct.pack(">I", oversize) + b"x" * oversize)
        response = fields(client.read_response())
        assert "error" in response
        emb = heldout.vectors[0].astype(np.float64)
        follow_up = fields(client.request_raw(
            render_request("post-drain", int(heldout.class_ids[0]), emb)))
        assert follow_up["input_id"] == "post-drain"


def test_concurrent_clients(server, world):
    import concurrent.futures

    _, heldout, _ = world
    _, host, port = server

    def worker(worker_id):
        results = []
        with GatewayClient(host, port) as client:
            for k in range(10):
                pos = (worker_id * 10 + k) % heldout.count
                emb = heldout.vectors[pos].astype(np.float64)
                response = fields(client.request_raw(render_request(
                    f"w{worker_id}-{k}", int(heldout.class_ids[pos]), emb)))
                results.append(response["input_id"])
        return results

    with concurrent.futures.ThreadPoolExecutor(max_workers=4) as pool:
        all_ids = [ids for ids in pool.map(worker, range(4))]
    for worker_id, ids in enumerate(all_ids):
        assert ids == [f"w{worker_id}-{k}" for k in range(10)]
