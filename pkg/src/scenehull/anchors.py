"""Per-class language anchors: frozen word vectors behind a learned projection.

Embeddings are read from GloVe-style text files ("token v1 ... vE" per line)
and stay frozen forever; only the projection to feature space trains. New
classes can be appended after training, which is what enables zero-shot
inference on categories the encoder never saw.
"""

from __future__ import annotations

import numpy as np


class MissingTokenError(LookupError):
    """A class name needs a token the embedding file does not provide."""

    def __init__(self, class_name: str, token: str):
        self.class_name = class_name
        self.token = token
        super().__init__(f"class {class_name!r}: token {token!r} not in embedding file")


def _name_tokens(name: str) -> list:
    tokens = name.lower().replace("_", " ").replace("-", " ").split()
    if not tokens:
        raise ValueError(f"class name {name!r} has no tokens")
    return tokens


def read_embedding_file(path, wanted: set) -> tuple[dict, int]:
    """Scan a GloVe-style file for the wanted tokens; returns (vectors, dim).

    Only requested tokens are parsed; the first occurrence of a token wins.
    A parsed vector whose length differs from the first one is an error.
    """
    vectors: dict = {}
    dim = None
    remaining = set(wanted)
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            token = fields[0].lower()
            if token not in remaining:
                continue
            try:
                vec = np.array([float(v) for v in fields[1:]], dtype=np.float64)
            except ValueError:
                raise ValueError(f"{path} line {lineno}: bad embedding row") from None
            if dim is None:
                dim = len(vec)
                if dim == 0:
                    raise ValueError(f"{path} line {lineno}: empty embedding vector")
            elif len(vec) != dim:
                raise ValueError(
                    f"{path} line {lineno}: dimension {len(vec)} != {dim}"
                )
            vectors[token] = vec
            remaining.discard(token)
            if not remaining:
                break
    return vectors, dim if dim is not None else 0


class AnchorTable:
    """Class names, frozen embeddings and the trainable projection to D.

    The embedding matrix is marked read-only: gradients flow to w_proj only,
    and the invariant "embedding values bit-identical across training" is
    enforced by numpy itself.
    """

    def __init__(self, class_names, embeddings: np.ndarray, w_proj: np.ndarray, normalize: bool = False):
        self.class_names = list(class_names)
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError("class names must be unique")
        embeddings = np.array(embeddings, dtype=np.float64)
        if embeddings.ndim != 2 or len(embeddings) != len(self.class_names):
            raise ValueError("embeddings must be (C, E) with one row per class")
        embeddings.flags.writeable = False
        self.embeddings = embeddings
        self.w_proj = np.asarray(w_proj)
        if self.w_proj.ndim != 2 or self.w_proj.shape[0] != embeddings.shape[1]:
            raise ValueError("w_proj must be (E, D)")
        self.normalize = bool(normalize)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def embedding_dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.w_proj.shape[1]

    def parameters(self) -> dict:
        return {"w_proj": self.w_proj}

    def matrix(self) -> np.ndarray:
        """All projected anchors, (C, D); recomputed so w_proj edits always
        show up immediately."""
        anchors = self.embeddings.astype(self.w_proj.dtype) @ self.w_proj
        if self.normalize:
            anchors = anchors / np.linalg.norm(anchors, axis=1, keepdims=True)
        return anchors

    def anchor(self, class_id: int) -> np.ndarray:
        if not 0 <= class_id < self.num_classes:
            raise IndexError(f"class id {class_id} out of range [0, {self.num_classes})")
        return self.matrix()[class_id]

    def class_id(self, name: str) -> int:
        return self.class_names.index(name)

    def add_class(self, name: str, embedding: np.ndarray) -> int:
        """Append a class; existing anchors are untouched (w_proj is shared
        but unchanged). Returns the new class id."""
        if name in self.class_names:
            raise ValueError(f"class {name!r} already present")
        embedding = np.asarray(embedding, dtype=np.float64).reshape(-1)
        if len(embedding) != self.embedding_dim:
            raise ValueError(
                f"embedding dim {len(embedding)} != table dim {self.embedding_dim}"
            )
        stacked = np.vstack([self.embeddings, embedding[None, :]])
        stacked.flags.writeable = False
        self.embeddings = stacked
        self.class_names.append(name)
        return self.num_classes - 1


def load_embeddings(
    path,
    names,
    feature_dim: int | None = None,
    seed: int = 0,
    dtype=np.float64,
    normalize: bool = False,
) -> AnchorTable:
    """Build an AnchorTable for the given class names from an embedding file.

    Multi-token names ("night stand") average their token vectors. When
    feature_dim is None or equals the file dimension, the projection starts
    as the identity; otherwise it starts uniform in +-sqrt(1/E).
    """
    names = list(names)
    token_lists = [_name_tokens(n) for n in names]
    wanted = {t for toks in token_lists for t in toks}
    vectors, dim = read_embedding_file(path, wanted)
    rows = []
    for name, tokens in zip(names, token_lists):
        for t in tokens:
            if t not in vectors:
                raise MissingTokenError(name, t)
        rows.append(np.mean([vectors[t] for t in tokens], axis=0))
    embeddings = np.asarray(rows, dtype=np.float64)

    if feature_dim is None or feature_dim == dim:
        w_proj = np.eye(dim, dtype=dtype)
    else:
        rng = np.random.default_rng(seed)
        bound = np.sqrt(1.0 / dim)
        w_proj = rng.uniform(-bound, bound, size=(dim, feature_dim)).astype(dtype)
    return AnchorTable(names, embeddings, w_proj, normalize=normalize)
