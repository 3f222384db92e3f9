"""Model descriptions and config-file loading.

Weight sizes are quoted in decimal GB (1e9 bytes); page math elsewhere is
binary. MLP weights are the only sharded component (88% of total bytes by
default); attention projections, embeddings and norms stay fully
replicated on every worker at every TP degree.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

GB = 10**9


@dataclass(frozen=True)
class ModelConfig:
    name: str
    hidden_size: int
    inter_size: int
    num_experts: int = 1
    num_layers: int = 32
    num_kv_heads: int = 8
    head_dim: int = 128
    element_bytes: int = 2
    weights_gb: float = 0.0
    supported_tp: tuple[int, ...] = (1, 2, 4)
    fused_gate_up: bool = False
    mlp_weight_fraction: float = 0.88

    @property
    def weights_bytes(self) -> int:
        return int(self.weights_gb * GB)

    @property
    def mlp_bytes(self) -> int:
        return int(self.weights_bytes * self.mlp_weight_fraction)

    @property
    def mlp_layer_bytes(self) -> int:
        return self.mlp_bytes // self.num_layers

    @property
    def kv_bytes_per_token_per_layer(self) -> int:
        return 2 * self.num_kv_heads * self.head_dim * self.element_bytes

    @property
    def kv_bytes_per_token(self) -> int:
        return self.num_layers * self.kv_bytes_per_token_per_layer


BUILTIN_MODELS: dict[str, ModelConfig] = {
    m.name: m for m in [
        ModelConfig("qwen2.5-32b", hidden_size=5120, inter_size=27648,
                    num_layers=64, num_kv_heads=8, weights_gb=62.34),
        ModelConfig("qwen3-32b", hidden_size=5120, inter_size=25600,
                    num_layers=64, num_kv_heads=8, weights_gb=62.34),
        ModelConfig("llama-3.1-70b", hidden_size=8192, inter_size=28672,
                    num_layers=80, num_kv_heads=8, weights_gb=140.0),
        ModelConfig("llama2-7b", hidden_size=4096, inter_size=11008,
                    num_layers=32, num_kv_heads=32, weights_gb=15.67),
        ModelConfig("llama3-8b", hidden_size=4096, inter_size=14336,
                    num_layers=32, num_kv_heads=8, weights_gb=16.66),
        ModelConfig("gpt-oss-120b", hidden_size=2880, inter_size=2880,
                    num_experts=128, num_layers=36, num_kv_heads=8,
                    weights_gb=235.0, fused_gate_up=True),
        ModelConfig("gpt-oss-20b", hidden_size=2880, inter_size=2880,
                    num_experts=32, num_layers=24, num_kv_heads=8,
                    weights_gb=38.3, fused_gate_up=True),
    ]
}


def load_model_config(path: str | Path) -> ModelConfig:
    """Read a model config file (JSON object with the ModelConfig keys)."""
    data = json.loads(Path(path).read_text())
    if "supported_tp" in data:
        data["supported_tp"] = tuple(data["supported_tp"])
    return ModelConfig(**data)


def get_model(name_or_path: str) -> ModelConfig:
    key = name_or_path.lower()
    if key in BUILTIN_MODELS:
        return BUILTIN_MODELS[key]
    p = Path(name_or_path)
    if p.exists():
        return load_model_config(p)
    raise KeyError(f"unknown model {name_or_path!r}; "
                   f"builtins: {sorted(BUILTIN_MODELS)}")
