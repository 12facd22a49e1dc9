import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import chain
from hpl.envsim import Step, Trajectory, scripted_expert
from hpl.errors import TransportError, UsageError, ValidationError
from hpl.policy import PolicyParams
from hpl.segment import (
    HttpSegmenter,
    OracleSegmenter,
    Segmenter,
    boundaries_from_entropies,
    calibrate_entropy_threshold,
    is_partition,
    nearest_rank,
    segment_fixed_k,
    segment_fixed_n,
    segment_semantic,
    validate_response,
)


def _traj(n):
    return Trajectory("t", "t", [Step(i, 0, 0.0) for i in range(n)], 1.0, [(0, n - 1)])


@pytest.mark.parametrize("n, N, sizes", [(7, 3, [3, 2, 2]), (6, 3, [2, 2, 2]), (5, 5, [1] * 5)])
def test_fixed_n_examples(n, N, sizes):
    assert segment_fixed_n(_traj(n), N).sizes == sizes


@pytest.mark.parametrize("n, K, sizes", [(7, 3, [3, 3, 1]), (3, 5, [3]), (6, 3, [3, 3])])
def test_fixed_k_examples(n, K, sizes):
    assert segment_fixed_k(_traj(n), K).sizes == sizes


def test_fixed_errors():
    with pytest.raises(UsageError):
        segment_fixed_n(_traj(3), 4)
    with pytest.raises(UsageError):
        segment_fixed_k(_traj(3), 0)


def test_entropy_boundaries_examples():
    h = [0.1, 0.5, 0.9, 0.2, 1.2]
    assert boundaries_from_entropies(h, 0.9) == [(0, 3), (4, 4)]
    assert boundaries_from_entropies(h, 5.0) == [(0, 4)]
    assert boundaries_from_entropies(h, -1.0) == [(i, i) for i in range(5)]


def test_nearest_rank_examples():
    assert nearest_rank([0.1, 0.2, 0.5, 0.9, 1.2], 0.8) == 0.9
    assert nearest_rank([0.3] * 7, 0.35) == 0.3
    assert nearest_rank([4.2], 0.01) == nearest_rank([4.2], 0.99) == 4.2
    with pytest.raises(UsageError):
        nearest_rank([], 0.5)


def test_calibrate_threshold_uses_expert_states():
    cfg = chain((2, 2), 3, 8)
    ref = PolicyParams(np.random.default_rng(0).normal(size=(cfg.num_states, 3)))
    tr = scripted_expert(cfg)
    thr = calibrate_entropy_threshold([tr], ref, 0.5)
    from hpl.policy import entropies

    pool = sorted(entropies(ref)[[s.obs for s in tr.steps]])
    assert thr == pool[1]  # ceil(0.5 * 4) = 2nd value


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 40))
def test_fixed_partition_property(n, N, K):
    tr = _traj(n)
    assert is_partition(segment_fixed_n(tr, min(N, n)).boundaries, n)
    assert is_partition(segment_fixed_k(tr, K).boundaries, n)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 3), min_size=1, max_size=40), st.floats(-1, 4))
def test_uncertainty_partition_property(h, thr):
    spans = boundaries_from_entropies(h, thr)
    assert is_partition(spans, len(h))
    # a cut sits exactly before every strictly exceeding step t >= 1
    assert [s for s, _ in spans[1:]] == [t for t in range(1, len(h)) if h[t] > thr]


def test_oracle_passthrough():
    cfg = chain((2, 3, 2))
    seg = segment_semantic(scripted_expert(cfg), OracleSegmenter())
    assert seg.boundaries == [(0, 1), (2, 4), (5, 6)]


VALID = [
    ("[[0, 0], [1, 2], [3, 4]]", 5, [(0, 0), (1, 2), (3, 4)]),
    ("[[0, 1, 2], [3], [4]]", 5, [(0, 2), (3, 3), (4, 4)]),
    ("[[0, 4]]", 5, [(0, 4)]),
]
INVALID = [
    ("[[0, 1], [3, 4]]", 5, "index 2 is not covered"),
    ("[[0, 2], [2, 4]]", 5, "more than one group"),
    ("[[0, 1], [2, 5]]", 5, "outside"),
    ("[[0, 1], [2, 3]]", 5, "last index"),
    ("[[0, 1], [2, 4], [5, 5]]", 5, "outside"),
    ("[[-1, 1], [2, 4]]", 5, "outside"),
    ("not json", 5, "not valid JSON"),
    ("{\"groups\": [[0, 4]]}", 5, "non-empty JSON array"),
    ("[]", 5, "non-empty JSON array"),
    ("[[0, 1.5], [2, 4]]", 5, "non-integers"),
    ("[[0, 2, 1], [3, 4]]", 5, "contiguous"),
    ("[[1, 4], [0, 0]]", 5, "index 0 is not covered"),
]


@pytest.mark.parametrize("raw, n, spans", VALID)
def test_validator_accepts(raw, n, spans):
    assert validate_response(raw, n) == spans


@pytest.mark.parametrize("raw, n, msg", INVALID)
def test_validator_rejects(raw, n, msg):
    with pytest.raises(ValidationError, match=msg) as info:
        validate_response(raw, n)
    assert info.value.raw == raw


class _Canned(BaseHTTPRequestHandler):
    reply = b"[]"
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append(body)
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(type(self).reply)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    srv = HTTPServer(("127.0.0.1", 0), _Canned)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    _Canned.seen = []
    yield srv
    srv.shutdown()
    srv.server_close()


def _url(srv):
    return f"http://127.0.0.1:{srv.server_address[1]}/segment"


def test_http_segmenter_valid_reply(server):
    cfg = chain((2, 3))
    tr = scripted_expert(cfg)
    _Canned.reply = b"[[0, 1], [2, 4]]"
    seg = Segmenter("semantic", provider=HttpSegmenter(_url(server)))(tr)
    assert seg.boundaries == [(0, 1), (2, 4)]
    body = _Canned.seen[-1]
    assert body["num_actions"] == 5 and len(body["actions"]) == 5
    assert all(isinstance(a, str) for a in body["actions"])


def test_http_segmenter_invalid_reply_falls_back(server):
    cfg = chain((2, 3))
    tr = scripted_expert(cfg)
    _Canned.reply = b"[[0, 1], [3, 4]]"
    segmenter = Segmenter("semantic", provider=HttpSegmenter(_url(server)))
    seg = segmenter(tr)
    assert seg.boundaries == [(0, 1), (2, 4)] and seg.params.get("fallback")
    (event,) = segmenter.fallback_events
    assert event["raw"] == "[[0, 1], [3, 4]]" and "not covered" in event["error"]
    with pytest.raises(ValidationError):
        segment_semantic(tr, HttpSegmenter(_url(server)))


def test_http_transport_failure_falls_back():
    tr = scripted_expert(chain((1, 2)))
    provider = HttpSegmenter("http://127.0.0.1:9/none", timeout=0.5)
    with pytest.raises(TransportError):
        provider.segment(tr)
    segmenter = Segmenter("semantic", provider=provider)
    assert segmenter(tr).boundaries == [(0, 0), (1, 2)]
    assert len(segmenter.fallback_events) == 1


def test_segmenter_dispatch():
    tr = _traj(7)
    assert Segmenter("fixed_n", {"N": 3})(tr).sizes == [3, 2, 2]
    assert Segmenter("fixed_k", {"K": 3})(tr).sizes == [3, 3, 1]
    with pytest.raises(UsageError):
        Segmenter("uncertainty", {"threshold": 0.5})(tr)
    with pytest.raises(UsageError):
        Segmenter("bogus")
