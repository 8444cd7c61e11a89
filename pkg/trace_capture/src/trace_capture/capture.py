"""Hook a causal LM at inference time and record its decode attention.

The model runs with its full, uncompressed KV cache; at every decode step
the per-layer attention of the new token over the whole cache is extracted,
head-averaged by default, renormalized, and buffered. The collected rows go
out as one ATTRC01 file with source=captured.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .format import SOURCE_CAPTURED, write_attrc


@dataclass
class CaptureConfig:
    model: str                       # hub id or local directory
    steps: int                       # max new tokens to record
    out: str
    prompt: str | None = None        # needs the model's tokenizer
    prompt_ids: list[int] | None = None
    layers: list[int] | None = None  # default: all layers
    head_average: bool = True
    greedy: bool = True
    seed: int = 0                    # sampling seed when greedy is off
    device: str = "cpu"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.prompt and not self.prompt_ids:
            raise ValueError("either prompt text or prompt token ids is required")


@dataclass
class CaptureResult:
    path: str
    prefill_len: int
    steps_recorded: int
    layers: list[int]
    n_heads: int
    tokens: list[int] = field(default_factory=list)


def _load_model(config: CaptureConfig):
    from transformers import AutoModelForCausalLM

    model = AutoModelForCausalLM.from_pretrained(
        config.model, attn_implementation="eager"
    )
    model.to(config.device)
    model.eval()
    return model


def _prompt_token_ids(config: CaptureConfig) -> list[int]:
    if config.prompt_ids:
        return [int(t) for t in config.prompt_ids]
    from transformers import AutoTokenizer

    tokenizer = AutoTokenizer.from_pretrained(config.model)
    ids = tokenizer(config.prompt, return_tensors=None)["input_ids"]
    if not ids:
        raise ValueError("prompt tokenized to zero tokens")
    return [int(t) for t in ids]


def capture_run(config: CaptureConfig) -> CaptureResult:
    """Generate up to ``config.steps`` tokens and write their attention trace."""
    model = _load_model(config)
    prompt_ids = _prompt_token_ids(config)
    m = len(prompt_ids)
    n_layers = int(model.config.num_hidden_layers)
    layers = config.layers if config.layers is not None else list(range(n_layers))
    for layer in layers:
        if not 0 <= layer < n_layers:
            raise ValueError(f"layer {layer} outside model with {n_layers} layers")
    eos_id = getattr(model.config, "eos_token_id", None)
    generator = torch.Generator(device="cpu").manual_seed(config.seed)

    step_rows: list[np.ndarray] = []
    generated: list[int] = []
    with torch.no_grad():
        ids = torch.tensor([prompt_ids], dtype=torch.long, device=config.device)
        out = model(input_ids=ids, use_cache=True)
        past = out.past_key_values
        token = _next_token(out.logits[0, -1], config.greedy, generator)
        for t in range(1, config.steps + 1):
            out = model(
                input_ids=torch.tensor([[token]], dtype=torch.long, device=config.device),
                past_key_values=past,
                use_cache=True,
                output_attentions=True,
            )
            past = out.past_key_values
            attentions = out.attentions
            if not attentions:
                raise RuntimeError(
                    "model returned no attention weights; it does not support "
                    "eager attention output"
                )
            rows = []
            for layer in layers:
                layer_attn = attentions[layer][0, :, -1, :].float().cpu().numpy()
                if layer_attn.shape[-1] != m + t:
                    raise RuntimeError(
                        f"step {t}, layer {layer}: attention over "
                        f"{layer_attn.shape[-1]} keys, expected {m + t} "
                        f"(is the cache being compressed?)"
                    )
                if config.head_average:
                    layer_attn = layer_attn.mean(axis=0, keepdims=True)
                rows.append(layer_attn)
            step_rows.append(np.stack(rows))
            generated.append(token)
            token = _next_token(out.logits[0, -1], config.greedy, generator)
            if eos_id is not None and token == eos_id and t < config.steps:
                break

    tag = json.dumps(
        {
            "capture": "causal_lm",
            "model": config.model,
            "layers": layers,
            "head_average": config.head_average,
            "greedy": config.greedy,
            "prompt_len": m,
        },
        sort_keys=True,
    )
    write_attrc(
        config.out,
        prefill_len=m,
        step_rows=step_rows,
        head_averaged=config.head_average,
        source=SOURCE_CAPTURED,
        model_tag=tag,
    )
    return CaptureResult(
        path=config.out,
        prefill_len=m,
        steps_recorded=len(step_rows),
        layers=layers,
        n_heads=step_rows[0].shape[1],
        tokens=generated,
    )


def _next_token(logits: torch.Tensor, greedy: bool, generator: torch.Generator) -> int:
    if greedy:
        return int(torch.argmax(logits))
    probs = torch.softmax(logits.float().cpu(), dim=-1)
    return int(torch.multinomial(probs, 1, generator=generator))
