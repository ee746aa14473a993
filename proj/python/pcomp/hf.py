"""Hugging Face transformers runtime for the registered chat models.

Residual reads and writes hook the output of each decoder block, so layer L
is the state block L+1 consumes. Needs ``torch`` and ``transformers``.
"""

from __future__ import annotations

import numpy as np

from . import _core

_TORCH_DTYPES = {"f32": "float32", "bf16": "bfloat16"}


def _dtype_label(dtype) -> str:
    return dtype.name if isinstance(dtype, _core.Dtype) else str(dtype)


def _decoder_layers(model):
    inner = getattr(model, "model", model)
    layers = getattr(inner, "layers", None)
    if layers is None:
        raise _core.BackendError(f"cannot find decoder layers on {type(model).__name__}")
    return layers


class HFBackend(_core.Backend):
    """Wraps a causal LM and its tokenizer. Greedy only, batch size one."""

    def __init__(self, model, tokenizer, model_id: str, dtype="f32"):
        super().__init__()
        import torch

        self._torch = torch
        self.model = model.eval()
        self.tokenizer = tokenizer
        self.model_id = model_id
        self.dtype = _dtype_label(dtype)
        self.layers = _decoder_layers(model)
        cfg = model.config
        self._info = _core.ModelInfo(
            model_id, len(self.layers), cfg.hidden_size, cfg.vocab_size, self.dtype, True
        )

    def info(self):
        return self._info

    def encode_chat(self, text):
        ids = self.tokenizer.apply_chat_template(
            [{"role": "user", "content": text}], add_generation_prompt=True, tokenize=True
        )
        if isinstance(ids, dict) or hasattr(ids, "keys"):
            ids = ids["input_ids"]
        return [int(t) for t in ids]

    def decode(self, tokens):
        return self.tokenizer.decode(list(tokens), skip_special_tokens=True)

    def _install(self, captures, writes, offset, sink):
        """Hooks writing then reading block outputs for absolute positions."""
        torch = self._torch
        by_layer = {}
        for w in writes:
            by_layer.setdefault(w.site.layer, ([], []))[0].append(w)
        for i, s in enumerate(captures):
            by_layer.setdefault(s.layer, ([], []))[1].append((i, s))

        def make(layer_writes, layer_reads):
            def hook(_module, _args, output):
                hidden = output[0] if isinstance(output, tuple) else output
                n = hidden.shape[1]
                if layer_writes:
                    hidden = hidden.clone()
                    for w in layer_writes:
                        p = w.site.position - offset
                        if 0 <= p < n:
                            hidden[0, p] = torch.as_tensor(
                                np.asarray(w.values), dtype=hidden.dtype, device=hidden.device
                            )
                for i, s in layer_reads:
                    p = s.position - offset
                    if 0 <= p < n:
                        sink[i] = hidden[0, p].float().cpu().numpy()
                if not layer_writes:
                    return None
                return (hidden,) + tuple(output[1:]) if isinstance(output, tuple) else hidden

            return hook

        handles = []
        for layer, (ws, rs) in by_layer.items():
            if not 0 <= layer < len(self.layers):
                raise _core.BackendError(f"layer {layer} out of range")
            handles.append(self.layers[layer].register_forward_hook(make(ws, rs)))
        return handles

    def forward(self, tokens, captures, writes, logits_from):
        torch = self._torch
        sink = {}
        handles = self._install(captures, writes, 0, sink)
        try:
            with torch.no_grad():
                ids = torch.tensor([list(tokens)], device=self.model.device)
                logits = self.model(input_ids=ids, use_cache=False).logits[0]
        finally:
            for h in handles:
                h.remove()
        if len(sink) != len(captures):
            raise _core.BackendError("capture site outside the sequence")
        caps = np.stack([sink[i] for i in range(len(captures))]) if captures else np.zeros((0,), np.float32)
        return _core.ForwardOutput(caps, logits[logits_from:].float().cpu().numpy())

    def generate(self, prompt, n_tokens, writes):
        torch = self._torch
        tokens, steps = [], []
        handles = self._install([], writes, 0, {})
        try:
            with torch.no_grad():
                out = self.model(
                    input_ids=torch.tensor([list(prompt)], device=self.model.device), use_cache=True
                )
        finally:
            for h in handles:
                h.remove()
        with torch.no_grad():
            for step in range(n_tokens):
                logits = out.logits[0, -1].float().cpu().numpy()
                nxt = int(np.argmax(logits))  # first maximum: lowest id on ties
                tokens.append(nxt)
                steps.append(logits)
                if step + 1 == n_tokens:
                    break
                out = self.model(
                    input_ids=torch.tensor([[nxt]], device=self.model.device),
                    past_key_values=out.past_key_values,
                    use_cache=True,
                )
        step_logits = np.stack(steps) if steps else np.zeros((0,), np.float32)
        return _core.GenerateOutput(tokens, step_logits)


def register_hf_models(model_ids=None, device: str = "cpu"):
    """Installs transformers runtimes for registered models (default: all with metadata but no runtime)."""
    import torch
    from transformers import AutoModelForCausalLM, AutoTokenizer

    if model_ids is None:
        model_ids = [
            m for m in _core.known_models()
            if m != _core.TOY_MODEL_ID and not _core.describe_model(m)["has_runtime"]
        ]
    for model_id in model_ids:
        meta = _core.describe_model(model_id)
        if meta is None:
            raise _core.ConfigError(f"unknown model '{model_id}'")

        def factory(dtype, model_id=model_id):
            label = _dtype_label(dtype)
            model = AutoModelForCausalLM.from_pretrained(
                model_id, dtype=getattr(torch, _TORCH_DTYPES[label])
            ).to(device)
            tokenizer = AutoTokenizer.from_pretrained(model_id)
            return HFBackend(model, tokenizer, model_id, label)

        _core.register_backend(
            model_id,
            meta["num_layers"],
            meta["hidden_dim"],
            meta["default_dtype"],
            meta["supported_dtypes"],
            factory,
        )
    return list(model_ids)
