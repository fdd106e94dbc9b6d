"""Model document: a versioned structured-text serialization.

Arrays are written row-major under explicit shape headers; floats use
repr so a load/save round trip reproduces predictions bit for bit.
"""

import numpy as np

from latentshift.errors import DataError
from latentshift.latent import DecoderMatrix, EncoderModel
from latentshift.moe import MoEModel
from latentshift.nn import BatchNormLayer, DenseLayer
from latentshift.shift import ConfusionEstimate

MODEL_MAGIC = "latentshift-model v1"


def _fmt(values):
    return " ".join(repr(float(v)) for v in values)


def _vector_lines(name, vec):
    return [f"vector {name} {len(vec)}", _fmt(vec)]


def _matrix_lines(name, mat):
    lines = [f"matrix {name} {mat.shape[0]} {mat.shape[1]}"]
    lines.extend(_fmt(row) for row in mat)
    return lines


def _dense_stack_lines(layers):
    lines = [f"scalar n_layers {len(layers)}"]
    for i, layer in enumerate(layers):
        lines.append(f"scalar activation{i} {layer.activation}")
        lines.extend(_matrix_lines(f"w{i}", layer.weights))
        lines.extend(_vector_lines(f"b{i}", layer.biases))
    return lines


def encoder_to_lines(encoder):
    lines = _dense_stack_lines(encoder.trunk)
    bn = encoder.batch_norm
    lines.append(f"scalar bn_momentum {bn.momentum!r}")
    lines.append(f"scalar bn_epsilon {bn.epsilon!r}")
    lines.extend(_vector_lines("bn_gamma", bn.gamma))
    lines.extend(_vector_lines("bn_beta", bn.beta))
    lines.extend(_vector_lines("bn_running_mean", bn.running_mean))
    lines.extend(_vector_lines("bn_running_var", bn.running_var))
    return lines


def encoder_document(encoder):
    """Canonical text of an encoder's parameters (used for freeze checks)."""
    return "\n".join(encoder_to_lines(encoder)) + "\n"


def model_to_text(model, chosen_nz=None, chosen_lambda=None, standardizer=None):
    lines = [MODEL_MAGIC]
    lines.append("scalar kind moe")
    lines.append(f"scalar feature_dim {model.feature_dim}")
    lines.append(f"scalar n_z {model.n_experts}")
    if chosen_nz is not None:
        lines.append(f"scalar chosen_nz {chosen_nz}")
    if chosen_lambda is not None:
        lines.append(f"scalar chosen_lambda {chosen_lambda!r}")
    if standardizer is not None:
        mean, std = standardizer
        lines.append("section standardizer")
        lines.extend(_vector_lines("mean", mean))
        lines.extend(_vector_lines("std", std))
    lines.append("section encoder")
    lines.extend(encoder_to_lines(model.gating))
    lines.append("section trunk")
    lines.extend(_dense_stack_lines(model.trunk))
    lines.append("section heads")
    lines.append(f"scalar n_heads {len(model.heads)}")
    for i, head in enumerate(model.heads):
        lines.extend(_matrix_lines(f"head_w{i}", head.weights))
        lines.extend(_vector_lines(f"head_b{i}", head.biases))
    if model.confusion is not None:
        lines.append("section shift")
        lines.extend(_matrix_lines("confusion", model.confusion.joint))
        lines.extend(_vector_lines("train_marginal", model.confusion.train_marginal))
        lines.append(f"scalar predictor {model.confusion.predictor}")
    lines.append("end")
    return "\n".join(lines) + "\n"


def save_model(path, model, chosen_nz=None, chosen_lambda=None, standardizer=None):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(model_to_text(model, chosen_nz, chosen_lambda, standardizer))


class _Reader:
    def __init__(self, text):
        self.lines = text.splitlines()
        self.pos = 0

    def next_line(self):
        if self.pos >= len(self.lines):
            raise DataError("model document truncated")
        line = self.lines[self.pos]
        self.pos += 1
        return line

    def parse(self):
        """Returns {section_name: {record_name: value}} with '' toplevel."""
        if self.next_line() != MODEL_MAGIC:
            raise DataError(f"not a model document (expected {MODEL_MAGIC!r})")
        sections = {"": {}}
        current = sections[""]
        while True:
            line = self.next_line()
            if line == "end":
                return sections
            kind, _, rest = line.partition(" ")
            if kind == "section":
                current = sections.setdefault(rest, {})
            elif kind == "scalar":
                name, _, value = rest.partition(" ")
                current[name] = value
            elif kind == "vector":
                name, _, n = rest.partition(" ")
                row = np.array([float(v) for v in self.next_line().split()])
                if row.shape != (int(n),):
                    raise DataError(f"vector {name} has wrong length")
                current[name] = row
            elif kind == "matrix":
                name, _, dims = rest.partition(" ")
                r, c = (int(v) for v in dims.split())
                rows = [
                    [float(v) for v in self.next_line().split()] for _ in range(r)
                ]
                mat = np.array(rows)
                if mat.shape != (r, c):
                    raise DataError(f"matrix {name} has wrong shape")
                current[name] = mat
            else:
                raise DataError(f"unknown record kind {kind!r} in model document")


def _dense_stack_from(section):
    n = int(section["n_layers"])
    return [
        DenseLayer(section[f"w{i}"], section[f"b{i}"], section[f"activation{i}"])
        for i in range(n)
    ]


def _encoder_from(section):
    trunk = _dense_stack_from(section)
    bn = BatchNormLayer(
        dim=trunk[-1].out_dim,
        momentum=float(section["bn_momentum"]),
        epsilon=float(section["bn_epsilon"]),
    )
    bn.gamma = section["bn_gamma"].copy()
    bn.beta = section["bn_beta"].copy()
    bn.running_mean = section["bn_running_mean"].copy()
    bn.running_var = section["bn_running_var"].copy()
    bn.mode = "eval"
    return EncoderModel(trunk, bn)


def load_model(path):
    """Read a model document. Returns (MoEModel, meta dict).

    meta carries chosen_nz, chosen_lambda, and standardizer (a
    (mean, std) pair or None). The training confusion, when present,
    is reattached to the model.
    """
    with open(path, encoding="utf-8") as fh:
        sections = _Reader(fh.read()).parse()
    top = sections[""]
    if top.get("kind") != "moe":
        raise DataError(f"unsupported model kind {top.get('kind')!r}")
    gating = _encoder_from(sections["encoder"])
    trunk = _dense_stack_from(sections["trunk"])
    heads_sec = sections["heads"]
    heads = [
        DenseLayer(heads_sec[f"head_w{i}"], heads_sec[f"head_b{i}"], "identity")
        for i in range(int(heads_sec["n_heads"]))
    ]
    model = MoEModel(gating, trunk, heads)
    if "shift" in sections:
        sec = sections["shift"]
        model.confusion = ConfusionEstimate(
            joint=sec["confusion"],
            train_marginal=sec["train_marginal"],
            predictor=sec["predictor"],
        )
    meta = {
        "chosen_nz": int(top["chosen_nz"]) if "chosen_nz" in top else None,
        "chosen_lambda": float(top["chosen_lambda"]) if "chosen_lambda" in top else None,
        "standardizer": None,
    }
    if "standardizer" in sections:
        sec = sections["standardizer"]
        meta["standardizer"] = (sec["mean"], sec["std"])
    return model, meta


def decoder_to_text(decoder):
    return "\n".join(_matrix_lines("entries", decoder.entries)) + "\n"


def decoder_from_text(text):
    reader = _Reader(MODEL_MAGIC + "\n" + text + "end")
    return DecoderMatrix(reader.parse()[""]["entries"])
