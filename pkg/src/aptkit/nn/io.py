"""JSON persistence with hex-encoded float64 arrays (bit-exact round trips)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autoencoder import AttentionAutoencoder
from .core import BatchNorm, DenseNet, Layer

FORMAT_VERSION = 1


class ModelLoadError(ValueError):
    pass


def array_to_hex(a) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [float(v).hex() for v in a.reshape(-1)]}


def hex_to_array(obj) -> np.ndarray:
    data = np.array([float.fromhex(s) for s in obj["data"]], dtype=np.float64)
    return np.ascontiguousarray(data.reshape(obj["shape"]))


def layers_to_json(net: DenseNet) -> list:
    out = []
    for L in net.layers:
        entry = {"w": array_to_hex(L.W), "b": array_to_hex(L.b), "activation": L.activation}
        if L.bn is not None:
            entry["batchnorm"] = {
                "gamma": array_to_hex(L.bn.gamma),
                "beta": array_to_hex(L.bn.beta),
                "running_mean": array_to_hex(L.bn.running_mean),
                "running_var": array_to_hex(L.bn.running_var),
            }
        out.append(entry)
    return out


def layers_from_json(entries) -> DenseNet:
    layers = []
    for e in entries:
        bn = None
        if "batchnorm" in e:
            b = e["batchnorm"]
            bn = BatchNorm(hex_to_array(b["gamma"]), hex_to_array(b["beta"]),
                           hex_to_array(b["running_mean"]), hex_to_array(b["running_var"]))
        layers.append(Layer(hex_to_array(e["w"]), hex_to_array(e["b"]), e["activation"], bn))
    return DenseNet(layers)


def model_to_json(model: AttentionAutoencoder) -> dict:
    return {
        "version": FORMAT_VERSION,
        "variant": model.variant,
        "dims": {"input": model.d, "latent": model.h, "encoder_layers": len(model.encoder.layers)},
        "layers": layers_to_json(model.encoder) + layers_to_json(model.decoder),
        "att_weights": array_to_hex(model.att_weights),
        "lambda_reg": float(model.lambda_reg).hex(),
        "train_attention": model.train_attention,
    }


def model_from_json(obj) -> AttentionAutoencoder:
    try:
        version = obj["version"]
    except (KeyError, TypeError) as exc:
        raise ModelLoadError("model JSON has no version field") from exc
    if version != FORMAT_VERSION:
        raise ModelLoadError(f"unsupported model version {version}, expected {FORMAT_VERSION}")
    try:
        k = obj["dims"]["encoder_layers"]
        layers = obj["layers"]
        model = AttentionAutoencoder(
            att_weights=hex_to_array(obj["att_weights"]),
            encoder=layers_from_json(layers[:k]),
            decoder=layers_from_json(layers[k:]),
            lambda_reg=float.fromhex(obj["lambda_reg"]),
            variant=obj["variant"],
            train_attention=bool(obj.get("train_attention", obj["variant"] == "AAE")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelLoadError(f"malformed model JSON: {exc}") from exc
    if model.d != obj["dims"]["input"] or model.h != obj["dims"]["latent"]:
        raise ModelLoadError("layer shapes disagree with recorded dims")
    return model


def save_model(model: AttentionAutoencoder, path) -> None:
    Path(path).write_text(json.dumps(model_to_json(model), indent=1), encoding="utf-8")


def load_model(path) -> AttentionAutoencoder:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelLoadError(f"{path}: not valid JSON ({exc})") from exc
    return model_from_json(obj)
