"""Small torch helpers shared by the trainable modules."""
from __future__ import annotations

import contextlib
import math

import numpy as np
import torch
from torch import nn

from .errors import NumericError


def init_weights(module: nn.Module):
    """Fan-in uniform linear/conv maps, orthogonal recurrent kernels, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            nn.init.uniform_(m.weight, -bound, bound)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.LSTM, nn.LSTMCell)):
            for name, p in m.named_parameters():
                if name.startswith("weight_ih"):
                    bound = 1.0 / math.sqrt(p.shape[1])
                    nn.init.uniform_(p, -bound, bound)
                elif name.startswith("weight_hh"):
                    for block in p.data.chunk(4, dim=0):
                        nn.init.orthogonal_(block)
                elif name.startswith("bias"):
                    nn.init.zeros_(p)
        elif isinstance(m, nn.Embedding):
            nn.init.normal_(m.weight, 0.0, 1.0 / math.sqrt(m.embedding_dim))


def group_arrays(module: nn.Module, groups) -> dict:
    """``{group: {param_name: float32 array}}`` for the named child modules."""
    out = {}
    for g in groups:
        out[g] = {n: p.detach().cpu().float().numpy().copy() for n, p in getattr(module, g).named_parameters()}
    return out


def load_group_arrays(module: nn.Module, arrays: dict):
    with torch.no_grad():
        for g, tensors in arrays.items():
            params = dict(getattr(module, g).named_parameters())
            for n, arr in tensors.items():
                p = params[n]
                if tuple(p.shape) != tuple(arr.shape):
                    raise ValueError(f"{g}.{n}: shape {tuple(arr.shape)} != {tuple(p.shape)}")
                p.copy_(torch.as_tensor(arr, dtype=p.dtype))


def optimizer_arrays(opt: torch.optim.Optimizer) -> dict:
    out = {}
    for idx, st in opt.state_dict()["state"].items():
        for key, val in st.items():
            out[f"{idx}.{key}"] = np.asarray(torch.as_tensor(val).detach().cpu().float().numpy()).reshape(
                tuple(torch.as_tensor(val).shape))
    return out


def load_optimizer_arrays(opt: torch.optim.Optimizer, arrays: dict):
    sd = opt.state_dict()
    state: dict = {}
    for name, arr in arrays.items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = torch.as_tensor(np.array(arr))
    sd["state"] = state
    opt.load_state_dict(sd)


def grad_norm(grads) -> float:
    total = 0.0
    for g in grads:
        if g is not None:
            total += float(torch.sum(g.detach().double() ** 2))
    return math.sqrt(total)


def check_finite(value, component: str, what: str = "value"):
    t = value if torch.is_tensor(value) else torch.as_tensor(value)
    if not torch.all(torch.isfinite(t)):
        raise NumericError(f"non-finite {what} in {component}", component=component)


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True, threads: int = 1):
    if not enabled:
        yield
        return
    prev_threads = torch.get_num_threads()
    prev_det = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.set_num_threads(prev_threads)
        torch.use_deterministic_algorithms(prev_det)


def pad_frames(arrays, dtype=torch.float32):
    """Right-pad a list of ``(n_i, M)`` arrays into ``(B, max n, M)`` plus lengths."""
    lengths = torch.tensor([len(a) for a in arrays], dtype=torch.long)
    out = torch.zeros(len(arrays), int(lengths.max()), arrays[0].shape[1], dtype=dtype)
    for i, a in enumerate(arrays):
        out[i, :len(a)] = torch.as_tensor(np.asarray(a), dtype=dtype)
    return out, lengths


def length_mask(lengths: torch.Tensor, max_len: int | None = None) -> torch.Tensor:
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len)[None, :] < lengths[:, None]
