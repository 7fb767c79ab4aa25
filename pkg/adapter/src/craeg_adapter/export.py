"""Token-embedding export from model checkpoints.

Finds the static token-embedding matrix in a state dict (or a file holding
one), writes it in the shared binary format, and records in a JSON sidecar
which matrix was taken: the input embedding or the output projection. For
untied checkpoints the caller must choose explicitly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .embedfile import write_embedding_file

INPUT_EMBEDDING_KEYS = (
    "model.embed_tokens.weight",
    "transformer.wte.weight",
    "tok_embeddings.weight",
    "embed_tokens.weight",
    "wte.weight",
    "embedding.weight",
)
OUTPUT_PROJECTION_KEYS = (
    "lm_head.weight",
    "output.weight",
    "embed_out.weight",
)

MATRIX_CHOICES = ("input", "output")


class UntiedCheckpointError(ValueError):
    """Checkpoint has distinct input and output matrices and no choice was made."""


def _to_array(value) -> np.ndarray:
    # torch tensors expose detach/cpu/numpy; anything else goes through numpy
    if hasattr(value, "detach"):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"embedding matrix must be 2-D, got shape {arr.shape}")
    return arr


def _load_state_dict(checkpoint) -> dict:
    if isinstance(checkpoint, dict):
        return checkpoint
    path = Path(checkpoint)
    if path.suffix == ".npz":
        with np.load(path) as data:
            return {name: data[name] for name in data.files}
    import torch  # deferred: only checkpoint files stored by torch need it

    state = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(state, dict):
        raise ValueError(f"{path}: checkpoint did not contain a state dict")
    return state


def _find_first(state: dict, names: tuple[str, ...]):
    for name in names:
        if name in state:
            return name, state[name]
    return None, None


def export_embeddings(checkpoint, out_path, matrix: str | None = None,
                      dtype: str = "float32") -> dict:
    """Write the chosen embedding matrix and its sidecar; return the metadata.

    matrix: "input", "output", or None to auto-pick. Auto-picking works when
    only one matrix exists or when both are bitwise-equal (tied weights);
    distinct matrices demand an explicit choice.
    """
    if matrix is not None and matrix not in MATRIX_CHOICES:
        raise ValueError(f"matrix must be one of {MATRIX_CHOICES}")
    state = _load_state_dict(checkpoint)
    in_key, in_raw = _find_first(state, INPUT_EMBEDDING_KEYS)
    out_key, out_raw = _find_first(state, OUTPUT_PROJECTION_KEYS)
    if in_raw is None and out_raw is None:
        raise ValueError(
            "no token-embedding matrix found; recognized keys: "
            + ", ".join(INPUT_EMBEDDING_KEYS + OUTPUT_PROJECTION_KEYS)
        )

    in_arr = _to_array(in_raw) if in_raw is not None else None
    out_arr = _to_array(out_raw) if out_raw is not None else None
    tied = None
    if in_arr is not None and out_arr is not None:
        tied = in_raw is out_raw or (
            in_arr.shape == out_arr.shape and np.array_equal(in_arr, out_arr)
        )

    if matrix is None:
        if in_arr is not None and out_arr is not None and not tied:
            raise UntiedCheckpointError(
                f"checkpoint holds distinct {in_key!r} and {out_key!r}; "
                'pass matrix="input" or matrix="output"'
            )
        matrix = "input" if in_arr is not None else "output"
    chosen = in_arr if matrix == "input" else out_arr
    chosen_key = in_key if matrix == "input" else out_key
    if chosen is None:
        raise ValueError(f"checkpoint has no {matrix} matrix")

    write_embedding_file(chosen, out_path, dtype=dtype)
    metadata = {
        "source_matrix": matrix,
        "source_key": chosen_key,
        "tied": tied,
        "vocab_size": int(chosen.shape[0]),
        "dim": int(chosen.shape[1]),
        "dtype": dtype,
    }
    sidecar = Path(f"{out_path}.meta.json")
    sidecar.write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n",
                       encoding="utf-8")
    return metadata
