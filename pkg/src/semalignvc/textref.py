"""Text-side embedding providers for alignment supervision.

The alignment target needs per-symbol text embeddings. The default
provider is a seeded random table over the toy symbol inventory, which
keeps the whole pipeline dependency-light and deterministic. A
transformers-backed provider can be swapped in for real text when that
package is installed.
"""

from dataclasses import dataclass

import numpy as np

from .corpus import DEFAULT_ALPHABET


@dataclass
class TextTokenIds:
    ids: np.ndarray  # [L] int64, 0 reserved for blank
    text: str

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 1 or len(self.ids) == 0:
            raise ValueError("token ids must be a non-empty vector")
        if (self.ids <= 0).any():
            raise ValueError("text token ids must be positive; 0 is the blank")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class TextEmbeddingSequence:
    embeddings: np.ndarray  # [L, d_text] float
    ids: np.ndarray  # [L] int64

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.embeddings.ndim != 2:
            raise ValueError("embeddings must be [L, d_text]")
        if len(self.embeddings) != len(self.ids):
            raise ValueError("embedding/id length mismatch")

    def __len__(self) -> int:
        return len(self.embeddings)


class ToyTextProvider:
    """Seeded embedding table over single-character symbols.

    Index 0 is the blank used by the recognition head; real symbols are
    1..len(alphabet). The table is resampled until all pairwise symbol
    cosines are below `max_cosine`, so no two symbols look alike to the
    alignment loss.
    """

    def __init__(self, alphabet: str = DEFAULT_ALPHABET, d_text: int = 64,
                 seed: int = 7, max_cosine: float = 0.9):
        if len(set(alphabet)) != len(alphabet):
            raise ValueError("alphabet must not repeat symbols")
        self.alphabet = alphabet
        self.d_text = d_text
        self.blank_id = 0
        self.vocab_size = len(alphabet) + 1
        self._index = {ch: i + 1 for i, ch in enumerate(alphabet)}
        for attempt in range(100):
            rng = np.random.default_rng([seed & 0x7FFFFFFF, attempt])
            table = rng.normal(0.0, 1.0, (self.vocab_size, d_text))
            unit = table / np.linalg.norm(table, axis=1, keepdims=True)
            cos = unit @ unit.T
            np.fill_diagonal(cos, 0.0)
            if np.abs(cos).max() < max_cosine:
                break
        else:
            raise RuntimeError("could not sample a well-separated embedding table")
        table.setflags(write=False)
        self.table = table

    def encode_ids(self, text: str) -> TextTokenIds:
        try:
            ids = np.array([self._index[ch] for ch in text], dtype=np.int64)
        except KeyError as e:
            raise ValueError(f"symbol {e.args[0]!r} not in the toy alphabet") from None
        return TextTokenIds(ids=ids, text=text)

    def embed(self, text: str) -> TextEmbeddingSequence:
        tok = self.encode_ids(text)
        return TextEmbeddingSequence(embeddings=self.table[tok.ids], ids=tok.ids)


class ExternalTextProvider:
    """BERT-style contextual embeddings via transformers, loaded lazily.

    Only worth it for real text; the toy corpus never needs it. Raises a
    clear error when transformers is missing or the model cannot be
    fetched, instead of failing deep inside a training loop.
    """

    def __init__(self, model_name: str = "bert-base-uncased"):
        self.model_name = model_name
        self._model = None
        self._tokenizer = None

    def _load(self):
        if self._model is not None:
            return
        try:
            from transformers import AutoModel, AutoTokenizer
        except ImportError:
            raise RuntimeError(
                "ExternalTextProvider needs the 'transformers' package; "
                "install the [external] extra or use ToyTextProvider"
            ) from None
        try:
            self._tokenizer = AutoTokenizer.from_pretrained(self.model_name)
            self._model = AutoModel.from_pretrained(self.model_name)
        except Exception as e:
            raise RuntimeError(
                f"could not load {self.model_name!r} (offline?); "
                "use ToyTextProvider for the synthetic corpus"
            ) from e
        self._model.eval()

    @property
    def d_text(self) -> int:
        self._load()
        return self._model.config.hidden_size

    def embed(self, text: str) -> TextEmbeddingSequence:
        import torch

        self._load()
        enc = self._tokenizer(text, return_tensors="pt", add_special_tokens=False)
        with torch.no_grad():
            out = self._model(**enc).last_hidden_state[0].numpy()
        ids = enc["input_ids"][0].numpy().astype(np.int64) + 1  # keep 0 as blank
        return TextEmbeddingSequence(embeddings=out, ids=ids)
