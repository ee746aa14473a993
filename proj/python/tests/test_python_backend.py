import numpy as np
import pytest

import pcomp

VOCAB, DIM, LAYERS = 40, 8, 3


class TinyBackend(pcomp.Backend):
    """Causal NumPy model: running-mean embedding then tanh residual blocks."""

    def __init__(self, dtype):
        super().__init__()
        rng = np.random.default_rng(7)
        self.embed = rng.normal(size=(VOCAB, DIM))
        self.blocks = [rng.normal(scale=0.5, size=(DIM, DIM)) for _ in range(LAYERS)]
        self.unembed = rng.normal(size=(DIM, VOCAB))
        self.calls = 0

    def info(self):
        return pcomp.ModelInfo("py-tiny", LAYERS, DIM, VOCAB, "f32", True)

    def encode_chat(self, text):
        return [1] + [2 + b % (VOCAB - 2) for b in text.encode()] + [0]

    def decode(self, tokens):
        return "".join(chr(97 + t % 26) for t in tokens)

    def states(self, tokens, writes):
        e = self.embed[tokens]
        h = np.cumsum(e, axis=0) / np.arange(1, len(tokens) + 1)[:, None]
        out = []
        for layer, w in enumerate(self.blocks):
            h = h + np.tanh(h @ w)
            for wr in writes:
                if wr.site.layer == layer:
                    h[wr.site.position] = wr.values
            out.append(h.copy())
        return out

    def forward(self, tokens, captures, writes, logits_from):
        self.calls += 1
        states = self.states(list(tokens), writes)
        caps = np.array([states[s.layer][s.position] for s in captures], dtype=np.float32)
        logits = (states[-1] @ self.unembed)[logits_from:]
        return pcomp.ForwardOutput(caps.reshape(len(captures), DIM), logits.astype(np.float32))


@pytest.fixture(scope="module")
def handle():
    pcomp.register_backend("py-tiny", LAYERS, DIM, "f32", ["f32"], TinyBackend)
    return pcomp.load_model("py-tiny")


def test_python_backend_serves_operations(handle):
    assert handle.info.model_id == "py-tiny"
    tokens = handle.tokenize("hello")
    backend = TinyBackend("f32")
    (state,) = pcomp.capture(handle, tokens, [pcomp.Site(1, 2)])
    np.testing.assert_allclose(state, backend.states(tokens, [])[1][2], rtol=1e-6)
    # no generate override: the C++ default re-runs forward over the sequence
    out = pcomp.generate_greedy(handle, tokens, 4)
    seq = list(tokens)
    for _ in range(4):
        seq.append(int(np.argmax(backend.states(seq, [])[-1][-1] @ backend.unembed)))
    assert out == seq[len(tokens):]


def test_python_backend_in_threaded_run():
    grid = pcomp.short_grid()
    config = {
        "model": "py-tiny",
        "layers": [0, 2],
        "jobs": 3,
        "subset": {"personas": [p["id"] for p in grid["personas"][:3]], "tasks": [grid["tasks"][0]["id"]]},
    }
    a = pcomp.run_experiment("localized", config)
    b = pcomp.run_experiment("localized", dict(config, jobs=1))
    assert len(a["rows"]) == 3 * 2 * 3
    assert a["rows"] == b["rows"]
    assert all(not r.get("error") for r in a["rows"])


def test_python_errors_become_backend_errors():
    class Broken(TinyBackend):
        def forward(self, *args):
            raise RuntimeError("boom")

    pcomp.register_backend("py-broken", LAYERS, DIM, "f32", ["f32"], Broken)
    with pytest.raises(pcomp.BackendError, match="boom"):
        pcomp.load_model("py-broken")

    pcomp.register_backend("py-not-a-backend", LAYERS, DIM, "f32", ["f32"], lambda d: object())
    with pytest.raises(pcomp.BackendError):
        pcomp.load_model("py-not-a-backend")


def test_non_finite_states_are_rejected():
    class Nan(TinyBackend):
        def forward(self, tokens, captures, writes, logits_from):
            out = super().forward(tokens, captures, writes, logits_from)
            caps = out.captures.copy()
            caps[:] = np.nan
            return pcomp.ForwardOutput(caps, out.logits)

    pcomp.register_backend("py-nan", LAYERS, DIM, "f32", ["f32"], Nan)
    with pytest.raises(pcomp.NonFiniteError):
        pcomp.load_model("py-nan")
