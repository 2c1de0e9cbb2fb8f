import json
import threading
import time
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from instructlight import instructions as ins
from instructlight import numcore as nc
from instructlight.instructions import (
    Instruction,
    SceneDescriptor,
    TextEncoder,
    Tokenizer,
    VlmConnectionError,
    VlmEndpoint,
    VlmProtocolError,
    VlmTimeoutError,
    describe_external,
    describe_heuristic,
    encode_token_batch,
    normalize_text,
    synthesize_instruction,
    template_corpus,
)

from gradcheck import check_gradients, random_loss_weights, scalarize


def scene(**kw):
    return SceneDescriptor(**kw)


# ---------------------------------------------------------------------------
# templates
# ---------------------------------------------------------------------------

def test_all_facets_masked_is_empty_sentinel():
    out = synthesize_instruction(scene(), facets=())
    assert out.text == ""
    assert all(v is None for v in out.facets.values())
    assert out.source == "template"


def test_lighting_only_fixed_string():
    s = scene(light_source="window", intensity="soft", light_position="left")
    out = synthesize_instruction(s, facets=("lighting",))
    assert out.text == ("The scene is lit by natural daylight through a window "
                        "from the left side with soft intensity.")
    assert out.facets["shadows"] is None and out.facets["spatial"] is None


def test_full_instruction_is_concatenation_of_facets():
    s = scene(light_source="lamp", intensity="bright", light_position="top",
              shadow_direction="down", has_reflections=True)
    full = synthesize_instruction(s)
    singles = [synthesize_instruction(s, facets=(f,)).text for f in ins.FACET_ORDER]
    assert full.text == " ".join(singles)


def test_template_is_pure_function_of_inputs():
    s = scene(intensity="moderate")
    a = synthesize_instruction(s, facets=("lighting", "shadows"))
    b = synthesize_instruction(s, facets=("lighting", "shadows"))
    assert a == b


def test_every_enum_value_renders():
    for src in ins.LIGHT_SOURCES:
        for inten in ins.INTENSITIES:
            for pos in ins.POSITIONS:
                out = synthesize_instruction(scene(light_source=src, intensity=inten,
                                                   light_position=pos))
                assert out.text


def test_scene_descriptor_validates_enums():
    with pytest.raises(ValueError):
        SceneDescriptor(light_source="moon")
    with pytest.raises(ValueError):
        SceneDescriptor(intensity="blinding")


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tok():
    return Tokenizer()


def test_empty_string_is_bos_eos(tok):
    assert tok.tokenize("") == [Tokenizer.BOS, Tokenizer.EOS]


def test_tokenize_deterministic(tok):
    assert tok.tokenize("soft light") == tok.tokenize("soft light")


def test_roundtrip_over_template_corpus(tok):
    corpus = template_corpus()
    assert len(corpus) > 100
    for text in corpus:
        ids = tok.tokenize(text)
        assert tok.detokenize(ids) == normalize_text(text)


def test_byte_fallback_roundtrip(tok):
    text = "a zebra under chiaroscuro"
    ids = tok.tokenize(text)
    assert tok.detokenize(ids) == normalize_text(text)


def test_truncation_at_max_len(tok):
    long_text = " ".join(["soft"] * 200)
    ids = tok.tokenize(long_text)
    assert len(ids) == Tokenizer.MAX_LEN
    assert ids[0] == Tokenizer.BOS and ids[-1] == Tokenizer.EOS


def test_facet_monotonicity_token_counts(tok):
    s = scene(light_source="sky", intensity="bright", light_position="top",
              shadow_direction="down")
    full = len(tok.tokenize(synthesize_instruction(s).text))
    for subset in [(), ("lighting",), ("lighting", "shadows"), ("shadows",), ("spatial",)]:
        masked = len(tok.tokenize(synthesize_instruction(s, facets=subset).text))
        assert full >= masked


def test_encode_token_batch_padding(tok):
    ids, mask = encode_token_batch([tok.tokenize("soft light"), tok.tokenize("")])
    assert ids.shape == mask.shape
    assert mask[1].sum() == 2  # BOS + EOS
    assert ids[1, -1] == Tokenizer.PAD


# ---------------------------------------------------------------------------
# text encoder
# ---------------------------------------------------------------------------

def test_text_encoder_deterministic(tok):
    enc = TextEncoder(tok.vocab_size, dim=16, rng=np.random.default_rng(0))
    ids = np.array(tok.tokenize("soft light from the left side"))
    a = enc(ids).data
    b = enc(ids).data
    np.testing.assert_array_equal(a, b)


def test_text_encoder_positional_sensitivity(tok):
    enc = TextEncoder(tok.vocab_size, dim=16, rng=np.random.default_rng(1))
    ids = tok.tokenize("bright light from the top")
    permuted = [ids[0]] + list(reversed(ids[1:-1])) + [ids[-1]]
    e1 = enc(np.array(ids)).data
    e2 = enc(np.array(permuted)).data
    assert np.linalg.norm(e1 - e2) > 0


def test_text_encoder_finite_on_corpus(tok):
    enc = TextEncoder(tok.vocab_size, dim=16, rng=np.random.default_rng(2))
    for text in template_corpus()[::97]:
        out = enc(np.array(tok.tokenize(text))).data
        assert np.isfinite(out).all()


def test_text_encoder_masked_batch_matches_single(tok):
    enc = TextEncoder(tok.vocab_size, dim=16, rng=np.random.default_rng(3), dtype=np.float64)
    texts = ["soft light", "bright light from the top with no visible reflections"]
    lists = [tok.tokenize(t) for t in texts]
    ids, mask = encode_token_batch(lists)
    batched = enc(ids, mask).data
    for i, toks in enumerate(lists):
        single = enc(np.array(toks)).data
        np.testing.assert_allclose(batched[i, : len(toks)], single, atol=1e-10)


def test_text_encoder_rejects_overflow(tok):
    enc = TextEncoder(tok.vocab_size, dim=8, rng=np.random.default_rng(4))
    with pytest.raises(ValueError):
        enc(np.zeros(100, dtype=np.int64))


def test_text_encoder_gradients(tok):
    rng = np.random.default_rng(5)
    enc = TextEncoder(259 + 4, dim=8, n_blocks=1, max_len=8, rng=rng, dtype=np.float64)
    # evaluate at a generic, healthy-scale parameter point: finite differences
    # are ill-conditioned right at the tiny-variance embedding init
    enc.token_embed.table.data = rng.normal(0, 0.5, size=enc.token_embed.table.data.shape)
    enc.pos_embed.table.data = rng.normal(0, 0.5, size=enc.pos_embed.table.data.shape)
    ids = np.array([1, 260, 2])
    lw = random_loss_weights(rng, (3, 8))
    leaves = [p.tensor for p in enc.parameters()]
    check_gradients(lambda: scalarize(enc(ids), lw), leaves)


# ---------------------------------------------------------------------------
# external describer
# ---------------------------------------------------------------------------

class _Handler(BaseHTTPRequestHandler):
    reply = {"text": "a softly lit room"}
    delay = 0.0
    raw = None

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length))
        assert "prompt" in body and "image_b64" in body
        type(self).last_prompt = body["prompt"]
        if self.delay:
            time.sleep(self.delay)
        payload = self.raw if self.raw is not None else json.dumps(self.reply).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def mock_server():
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()


def _image():
    return np.random.default_rng(0).uniform(size=(3, 8, 8)).astype(np.float32)


def test_describe_external_passthrough(mock_server):
    _Handler.reply = {"text": "a softly lit room"}
    _Handler.delay = 0.0
    _Handler.raw = None
    out = describe_external(_image(), VlmEndpoint(mock_server))
    assert out.text == "a softly lit room"
    assert out.source == "external_vlm"
    assert _Handler.last_prompt == ins.DEFAULT_VLM_PROMPT


def test_describe_external_unreachable():
    with pytest.raises(VlmConnectionError):
        describe_external(_image(), VlmEndpoint("http://127.0.0.1:9", timeout=2.0))


def test_describe_external_timeout(mock_server):
    _Handler.delay = 1.0
    try:
        with pytest.raises(VlmTimeoutError):
            describe_external(_image(), VlmEndpoint(mock_server, timeout=0.2))
    finally:
        _Handler.delay = 0.0


def test_describe_external_malformed(mock_server):
    _Handler.raw = b"not json"
    try:
        with pytest.raises(VlmProtocolError):
            describe_external(_image(), VlmEndpoint(mock_server))
    finally:
        _Handler.raw = None


# ---------------------------------------------------------------------------
# heuristic describer
# ---------------------------------------------------------------------------

def test_heuristic_reads_brightness_and_direction():
    ramp = np.linspace(1.0, 0.2, 32)[None, None, :] * np.ones((3, 32, 32), dtype=np.float32)
    out = describe_heuristic(ramp)
    assert "bright" in out.text
    assert "left side" in out.text
    assert out.source == "template"

    dark = np.full((3, 16, 16), 0.05, dtype=np.float32)
    assert "soft" in describe_heuristic(dark).text


def test_heuristic_is_deterministic():
    img = np.random.default_rng(1).uniform(size=(3, 16, 16)).astype(np.float32)
    assert describe_heuristic(img) == describe_heuristic(img)
