"""Versioned binary checkpoint container.

Layout: magic b"FISG", u32 format version, u32 header length, a UTF-8
JSON header (config echo, iteration, rng states, optimizer counters, and
the flow's structural description), then a count-prefixed list of named
little-endian float64 tensors.  Loading reproduces training bit-exactly
from the stored iteration.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np

from . import flows
from .errors import FormatError
from .train import TrainConfig, TrainState, init_state

MAGIC = b"FISG"
VERSION = 1


def _flow_structure(flow):
    layers = []
    for layer in flow.layers:
        if isinstance(layer, flows.CouplingLayer):
            layers.append({"type": "coupling", "mask": layer.mask.astype(int).tolist(),
                           "clamp": layer.scale_clamp})
        elif isinstance(layer, flows.PermutationLayer):
            layers.append({"type": "perm", "perm": layer.perm.tolist()})
        else:
            layers.append({"type": "ar", "degrees": layer.degrees.tolist(),
                           "direction": layer.direction, "clamp": layer.scale_clamp})
    return {"kind": flow.kind, "dim": flow.dim, "layers": layers}


def _net_arrays(prefix, net):
    out = {}
    for k, layer in enumerate(net.layers):
        out[f"{prefix}.l{k}.w"] = layer.weights
        out[f"{prefix}.l{k}.b"] = layer.bias
    return out


def _adam_arrays(prefix, state):
    out = {}
    for k, (m, v) in enumerate(zip(state.m, state.v)):
        out[f"{prefix}.m{k}"] = m
        out[f"{prefix}.v{k}"] = v
    return out


def _dense_from(arrays, prefix, template_layer):
    w = arrays[f"{prefix}.w"]
    b = arrays[f"{prefix}.b"]
    template_layer.weights[...] = w
    template_layer.bias[...] = b


def save_checkpoint(path, state: TrainState, experiment=None):
    """Write the full training state; experiment is the effective
    experiment dict echoed for resume/eval."""
    arrays = {}
    arrays.update(_net_arrays("g", state.gen))
    arrays.update(_net_arrays("d", state.disc))
    arrays.update(_adam_arrays("adam_g", state.adam_g))
    arrays.update(_adam_arrays("adam_d", state.adam_d))
    header = {
        "config": asdict(state.config),
        "experiment": experiment,
        "iteration": state.iteration,
        "refresh_count": state.refresh_count,
        "refresh_ms_total": state.refresh_ms_total,
        "model_rng": state.model_rng.bit_generator.state,
        "data_rng": state.data_rng.bit_generator.state,
        "adam_g_step": state.adam_g.step,
        "adam_d_step": state.adam_d.step,
        "out_mid": state.out_mid,
        "out_half": state.out_half,
        "flow": None,
    }
    if state.flow is not None:
        header["flow"] = _flow_structure(state.flow)
        header["flow_adam_step"] = state.flow_adam.step
        for k, p in enumerate(state.flow.parameters()):
            arrays[f"flow.p{k}"] = p
        arrays.update(_adam_arrays("adam_f", state.flow_adam))
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _rebuild_flow(meta, config, arrays):
    # structure comes from the header; weights overwrite the scratch init
    scratch = np.random.default_rng(0)
    rebuilt_layers = []
    for entry in meta["layers"]:
        if entry["type"] == "coupling":
            mask = np.asarray(entry["mask"], dtype=bool)
            n_in = int(mask.sum())
            n_out = meta["dim"] - n_in
            scale_net = flows._coupling_subnet(scratch, n_in, n_out, config.flow_hidden)
            shift_net = flows._coupling_subnet(scratch, n_in, n_out, config.flow_hidden)
            rebuilt_layers.append(
                flows.CouplingLayer(mask, scale_net, shift_net, entry["clamp"])
            )
        elif entry["type"] == "perm":
            rebuilt_layers.append(flows.PermutationLayer(np.asarray(entry["perm"])))
        else:
            degrees = np.asarray(entry["degrees"])
            net = flows._masked_subnet(scratch, degrees, config.flow_hidden)
            rebuilt_layers.append(
                flows.AutoregressiveLayer(net, degrees, entry["direction"],
                                          entry["clamp"])
            )
    model = flows.FlowModel(rebuilt_layers, meta["dim"], meta["kind"])
    for k, p in enumerate(model.parameters()):
        p[...] = arrays[f"flow.p{k}"]
    return model


def load_checkpoint(path, dataset):
    """Rebuild a TrainState ready to resume; returns (state, experiment)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    version, header_len = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise FormatError(f"{path}: corrupt checkpoint header: {err}") from err
    offset = 12 + header_len
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(shape)
        offset += 8 * size
        arrays[name] = arr.copy()
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")

    config = TrainConfig(**header["config"])
    state = init_state(config, dataset)
    for k, layer in enumerate(state.gen.layers):
        _dense_from(arrays, f"g.l{k}", layer)
    for k, layer in enumerate(state.disc.layers):
        _dense_from(arrays, f"d.l{k}", layer)
    for k in range(len(state.adam_g.m)):
        state.adam_g.m[k][...] = arrays[f"adam_g.m{k}"]
        state.adam_g.v[k][...] = arrays[f"adam_g.v{k}"]
    for k in range(len(state.adam_d.m)):
        state.adam_d.m[k][...] = arrays[f"adam_d.m{k}"]
        state.adam_d.v[k][...] = arrays[f"adam_d.v{k}"]
    state.adam_g.step = header["adam_g_step"]
    state.adam_d.step = header["adam_d_step"]
    state.model_rng.bit_generator.state = header["model_rng"]
    state.data_rng.bit_generator.state = header["data_rng"]
    state.iteration = header["iteration"]
    state.refresh_count = header["refresh_count"]
    state.refresh_ms_total = header["refresh_ms_total"]
    state.out_mid = header["out_mid"]
    state.out_half = header["out_half"]
    if header["flow"] is not None:
        state.flow = _rebuild_flow(header["flow"], config, arrays)
        state.flow_adam = flows.flow_adam(state.flow, lr=config.lr_flow)
        for k in range(len(state.flow_adam.m)):
            state.flow_adam.m[k][...] = arrays[f"adam_f.m{k}"]
            state.flow_adam.v[k][...] = arrays[f"adam_f.v{k}"]
        state.flow_adam.step = header["flow_adam_step"]
    return state, header.get("experiment")
