import base64
import json

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coeloc.clients import ClientError, EchoChatClient, HttpChatClient, ScriptedChatClient
from coeloc.coegen import (
    CausalLink,
    Clients,
    Event,
    HumanReviewQueue,
    Stage,
    StageError,
    VerificationConfig,
    VideoInput,
    auto_filter,
    calibrate_alpha,
    consistency_scores,
    create_refinement_prompt,
    generate_and_verify,
    join_sentences,
    parse_coe,
    parse_sub_sentences,
    process_videos,
    run_stage,
    sample_frames,
    similarity_scores,
    topk_mean,
)
from coeloc.textfuse import HashEmbeddingProvider

from oracles import topk_mean_oracle


class KeywordProvider:
    """Texts mentioning "ghost" embed orthogonally to every frame."""

    def encode_texts(self, texts):
        return np.array([[0.0, 1.0] if "ghost" in t.lower() else [1.0, 0.0] for t in texts])

    def encode_frames(self, frames):
        return np.array([[1.0, 0.0] for _ in frames])


GOOD = "A man walks into the room and sits down at the table."
BAD = "A ghost floats over the table while the man sits down."
EVENTS = "The man walks in. The man sits down at the table."
CHAIN = "The man walks in, which causes the dog to bark. The barking leads to the man sitting down."
VIDEO = VideoInput("v1", ["frame one", "frame two", "frame three"], 3.0)


def _clients(vlm_rules, llm_rules):
    return Clients(ScriptedChatClient(vlm_rules, role="vlm"), ScriptedChatClient(llm_rules, role="llm"))


def _refinements(client):
    return sum("does not support" in c["prompt"] for c in client.calls)


# --- run_stage


def test_run_stage_pass_through():
    assert run_stage(Stage(1, "p"), ScriptedChatClient([(".*", "OK")], role="vlm")) == "OK"


def test_run_stage_missing_inputs():
    with pytest.raises(StageError, match="missing prior outputs"):
        run_stage(Stage(3, "p", {2: "events"}), EchoChatClient("llm"))


def test_run_stage_context_contains_prior_outputs():
    out = run_stage(Stage(3, "p", {1: "first output", 2: "second output"}), EchoChatClient("llm"))
    assert "first output" in out and "second output" in out


def test_run_stage_role_mismatch():
    with pytest.raises(StageError, match="needs a vlm"):
        run_stage(Stage(1, "p"), EchoChatClient("llm"))


def test_run_stage_client_failure_is_stage_error():
    with pytest.raises(StageError, match="client failed"):
        run_stage(Stage(1, "p"), ScriptedChatClient([], role="vlm"))


# --- filters and parsing


def test_auto_filter_examples():
    cfg = VerificationConfig()
    assert auto_filter("a b c", cfg).reason == "too short"
    assert auto_filter("X. X. X. Y.", VerificationConfig(min_words=0)).reason == "repeat"
    text = " ".join(["word"] * 15) + ". " + " ".join(["other"] * 15) + "."
    assert len(text.split()) == 30 and auto_filter(text, cfg)


def test_single_sentence_is_not_a_repeat():
    assert auto_filter("one sentence with enough words here", VerificationConfig())


def test_parse_sub_sentences_examples():
    assert parse_sub_sentences("A. B.") == ["A", "B"]
    assert parse_sub_sentences("She trips, which causes her to fall.") == ["She trips,", "which causes her to fall"]


def test_parse_chain_hand_count():
    text = (
        "A woman carries a tray across the kitchen, which causes the cat to jump. "
        "The cat knocks over a cup because it was startled. "
        "As a result the floor is wet, leading to the woman slipping! She drops the tray."
    )
    # sentences: 4; connectors: which causes, because, as a result, leading to
    assert len(parse_sub_sentences(text)) == 4 + 4 - 1


def test_parse_sub_sentences_empty():
    with pytest.raises(ValueError):
        parse_sub_sentences(" ... ")


def test_parse_coe_links():
    doc = parse_coe(CHAIN)
    assert [e.text for e in doc.events] == [
        "The man walks in", "the dog to bark", "The barking", "the man sitting down",
    ]
    assert isinstance(doc.elements[0], Event)
    assert doc.elements[1] == CausalLink(0, 1, "which causes the dog to bark")
    assert isinstance(doc.elements[3], CausalLink) and doc.elements[3].cause_index == 2
    assert doc.sentences() == ["The man walks in, which causes the dog to bark", "The barking leads to the man sitting down"]


def test_join_sentences_roundtrip():
    sents = ["First one", "Second one!", "Third?"]
    assert parse_sub_sentences(join_sentences(sents)) == ["First one", "Second one", "Third"]


# --- consistency scores


def test_two_frames_average_two():
    row = np.array([0.2, 0.6])
    assert topk_mean(row, 3) == pytest.approx(0.4, abs=1e-15)


def test_self_similarity_enters_topk():
    prov = HashEmbeddingProvider(16)
    frames = ["a red ball rolls", "the sky is blue", "a dog sleeps"]
    scores = consistency_scores(["a red ball rolls"], frames, prov, VerificationConfig(top_k=1))
    assert scores[0][1] == pytest.approx(1.0, abs=1e-12)


def test_topk_matches_sort_oracle_random_4x6(rng):
    t, f = rng.standard_normal((4, 5)), rng.standard_normal((6, 5))
    tn = t / np.linalg.norm(t, axis=1, keepdims=True)
    fn = f / np.linalg.norm(f, axis=1, keepdims=True)
    expected = [topk_mean_oracle(row, 3) for row in tn @ fn.T]
    np.testing.assert_allclose(similarity_scores(t, f, 3), expected, atol=1e-12, rtol=0)


def test_topk_matches_sort_oracle_100_matrices(rng):
    worst = 0.0
    for _ in range(100):
        n_t, n_f, k = (int(x) for x in rng.integers(1, 9, size=3))
        sims = rng.uniform(-1, 1, size=(n_t, n_f))
        for row in sims:
            worst = max(worst, abs(topk_mean(row, k) - topk_mean_oracle(row, k)))
    assert worst < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=10), st.integers(1, 12))
def test_topk_mean_bounds(row, k):
    row = np.array(row)
    assert row.mean() - 1e-12 <= topk_mean(row, k) <= row.max() + 1e-12


def test_consistency_needs_frames():
    with pytest.raises(ValueError, match="frame"):
        consistency_scores(["x"], [], HashEmbeddingProvider(), VerificationConfig())


# --- refinement prompt


def test_refinement_prompt_template():
    one = create_refinement_prompt("Describe.", ["the ghost floats"])
    assert one.count("the ghost floats") == 1 and one.startswith("Describe.")
    three = create_refinement_prompt("Describe.", ["first issue", "second issue", "third issue"])
    positions = [three.index(s) for s in ("first issue", "second issue", "third issue")]
    assert positions == sorted(positions)
    assert create_refinement_prompt("p", ["a"]) == create_refinement_prompt("p", ["a"])
    with pytest.raises(ValueError):
        create_refinement_prompt("p", [])


# --- dispositions


def test_accept_at_first_attempt():
    clients = _clients([("key actions", EVENTS), (".*", GOOD)], [(".*", CHAIN)])
    queue = HumanReviewQueue()
    doc, report = generate_and_verify(VIDEO, clients, KeywordProvider(), queue=queue)
    assert report.disposition == "accepted" and report.attempts == 1 and report.passed
    assert len(queue) == 0 and len(doc.events) == 4
    assert _refinements(clients.vlm) + _refinements(clients.llm) == 0


def test_accept_at_third_attempt_with_two_refinements():
    clients = _clients([("key actions", EVENTS), (".*", GOOD)], [(".*", [BAD, BAD, CHAIN])])
    doc, report = generate_and_verify(VIDEO, clients, KeywordProvider())
    assert report.passed and report.disposition == "refined"
    assert report.attempts == 3
    assert _refinements(clients.llm) == 2
    assert report.stages[-1].refinements == 2
    # the flagged fragment is injected into the refinement prompt
    assert "A ghost floats over the table while the man sits down" in clients.llm.calls[1]["prompt"]


def test_human_review_after_n_retry(tmp_path):
    clients = _clients([("key actions", EVENTS), (".*", GOOD)], [(".*", BAD)])
    queue = HumanReviewQueue(tmp_path / "queue.jsonl")
    doc, report = generate_and_verify(VIDEO, clients, KeywordProvider(), VerificationConfig(n_retry=5), queue=queue)
    assert doc is None and report.disposition == "human_review" and not report.passed
    assert report.attempts == 5 and len(clients.llm.calls) == 5
    # no refinement after the final attempt
    assert _refinements(clients.llm) == 4
    assert len(queue) == 1
    item = json.loads((tmp_path / "queue.jsonl").read_text())
    assert item["stage_id"] == 3 and item["attempts"] == 5 and item["flagged"]


def test_stage_one_failure_stops_pipeline():
    clients = _clients([(".*", "too few words")], [(".*", CHAIN)])
    queue = HumanReviewQueue()
    _, report = generate_and_verify(VIDEO, clients, KeywordProvider(), VerificationConfig(n_retry=2), queue=queue)
    assert [s.stage_id for s in report.stages] == [1]
    assert report.stages[0].filter_reason == "too short"
    assert queue.items[0]["flagged"] == ["too short"]
    assert clients.llm.calls == []


def test_stage_two_sees_stage_one_output():
    clients = _clients([("key actions", EVENTS), (".*", GOOD)], [(".*", CHAIN)])
    generate_and_verify(VIDEO, clients, KeywordProvider())
    assert clients.vlm.calls[1]["context"] == GOOD
    assert GOOD in clients.llm.calls[0]["context"] and EVENTS in clients.llm.calls[0]["context"]
    assert clients.vlm.calls[0]["n_frames"] == 3 and clients.llm.calls[0]["n_frames"] == 0


def test_process_videos_parallel_matches_serial():
    videos = [VideoInput(f"v{i}", ["f"], 1.0) for i in range(6)]

    def run(par):
        clients = _clients([("key actions", EVENTS), (".*", GOOD)], [(".*", CHAIN)])
        return [r.disposition for _, r in process_videos(videos, clients, KeywordProvider(), VerificationConfig(), HumanReviewQueue(), parallelism=par)]

    assert run(1) == run(3) == ["accepted"] * 6


def test_sample_frames_uses_captions(small_manifest):
    rec = small_manifest.records[0]
    frames = sample_frames(rec, fps=1.0)
    assert len(frames) == int(rec.features.duration_s)
    assert frames[0] == rec.texts.captions[0]


# --- calibration


def test_calibrate_alpha_separable():
    scores = [0.05, 0.1, 0.12, 0.4, 0.5, 0.9]
    labels = [False, False, False, True, True, True]
    alpha, table = calibrate_alpha(scores, labels, grid=[0.1, 0.2, 0.3, 0.45])
    # 0.2 and 0.3 both separate perfectly; the smaller wins
    assert alpha == 0.2
    assert max(r["balanced_accuracy"] for r in table) == 1.0


# --- clients


def test_scripted_client_sequences_and_file(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps({"rules": [{"pattern": "hello", "response": ["one", "two"]}], "default": "dflt"}))
    client = ScriptedChatClient.from_file(path, role="vlm")
    assert [client.complete("hello", "") for _ in range(3)] == ["one", "two", "two"]
    assert client.complete("other", "") == "dflt"
    with pytest.raises(ClientError):
        ScriptedChatClient([("x", "y")]).complete("nothing", "")


def test_http_client_request_shape(monkeypatch):
    seen = []

    def handler(request):
        seen.append((json.loads(request.content), request.headers.get("authorization")))
        return httpx.Response(200, json={"text": "done"})

    monkeypatch.setenv("COE_KEY", "secret")
    client = HttpChatClient("http://mock/chat", role="vlm", api_key_env="COE_KEY", client=httpx.Client(transport=httpx.MockTransport(handler)))
    assert client.complete("p", "c", ["frame"]) == "done"
    body, auth = seen[0]
    assert body == {"prompt": "p", "context": "c", "frames": [base64.b64encode(b"frame").decode()]}
    assert auth == "Bearer secret"


def test_http_client_retries_then_fails():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(500)

    client = HttpChatClient("http://mock/chat", retries=2, client=httpx.Client(transport=httpx.MockTransport(handler)))
    with pytest.raises(ClientError, match="attempt 3"):
        client.complete("p", "")
    assert len(calls) == 3


def test_http_client_missing_key(monkeypatch):
    monkeypatch.delenv("COE_MISSING", raising=False)
    with pytest.raises(ClientError, match="COE_MISSING"):
        HttpChatClient("http://mock", api_key_env="COE_MISSING")
