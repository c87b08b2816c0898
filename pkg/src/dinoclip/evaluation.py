"""Cross-modal retrieval metrics, zero-shot classification, the seeded 80/20
split procedure, and prompt construction for retrieval-augmented captioning.

Ranking is everywhere by descending similarity with ties broken by ascending
gallery index, so reports are bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, DomainError, ValidationError
from .prng import SplitMix64, fisher_yates, stable_hash

ZERO_SHOT_TEMPLATE = "a satellite photo of {class name}"
TEMPLATE_SLOT = "{class name}"

LMCAP_TEMPLATE = ("You are an intelligent image captioning bot tasked with describing "
                  "remote sensing images. Similar images have the following captions: "
                  "{captions}. A creative short caption that can describe this image "
                  "in {language} is:")

LMCAP_DEFAULT_FEWSHOT = 6   # N
LMCAP_DEFAULT_RETRIEVED = 4  # K


@dataclass
class SimilarityMatrix:
    """Cosine similarities between Q queries (rows) and G gallery items."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values.data if isinstance(self.values, Tensor)
                                 else self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ContractError(f"similarity matrix must be 2-D, got {self.values.shape}")
        if self.values.size and (self.values.min() < -1.0 - 1e-5
                                 or self.values.max() > 1.0 + 1e-5):
            raise ValidationError("similarity entries fall outside [-1, 1]")

    @property
    def num_queries(self) -> int:
        return self.values.shape[0]

    @property
    def num_gallery(self) -> int:
        return self.values.shape[1]


def _as_similarity(sim) -> SimilarityMatrix:
    return sim if isinstance(sim, SimilarityMatrix) else SimilarityMatrix(sim)


@dataclass
class GroundTruth:
    """Correct gallery indices per query; every query needs at least one."""

    correct: dict[int, set]

    def validate(self, num_queries: int, num_gallery: int):
        for q in range(num_queries):
            hits = self.correct.get(q)
            if not hits:
                raise ContractError(f"query {q} has no correct gallery index")
            for g in hits:
                if not 0 <= g < num_gallery:
                    raise ContractError(f"query {q}: gallery index {g} out of range "
                                        f"[0, {num_gallery})")


@dataclass
class RetrievalReport:
    """Recall percentages in both directions plus their arithmetic mean."""

    i2t_r1: float
    i2t_r5: float
    i2t_r10: float
    t2i_r1: float
    t2i_r5: float
    t2i_r10: float
    mean_recall: float

    def __post_init__(self):
        six = self.as_tuple()[:6]
        for v in six + (self.mean_recall,):
            if not 0.0 <= v <= 100.0:
                raise ValidationError(f"recall value {v} outside [0, 100]")
        for a, b, c in ((self.i2t_r1, self.i2t_r5, self.i2t_r10),
                        (self.t2i_r1, self.t2i_r5, self.t2i_r10)):
            if not a <= b + 1e-9 or not b <= c + 1e-9:
                raise ValidationError("recall must be nondecreasing in k")
        if abs(self.mean_recall - sum(six) / 6.0) > 1e-6:
            raise ValidationError("mean_recall is not the mean of the six recalls")

    @classmethod
    def from_recalls(cls, i2t: tuple, t2i: tuple) -> "RetrievalReport":
        six = tuple(i2t) + tuple(t2i)
        return cls(*six, mean_recall=mean_recall(six))

    def as_tuple(self) -> tuple:
        return (self.i2t_r1, self.i2t_r5, self.i2t_r10,
                self.t2i_r1, self.t2i_r5, self.t2i_r10)

    def to_json(self) -> str:
        fields = ("i2t_r1", "i2t_r5", "i2t_r10", "t2i_r1", "t2i_r5", "t2i_r10",
                  "mean_recall")
        return json.dumps({k: round(getattr(self, k), 2) for k in fields})

    def to_csv_row(self) -> str:
        vals = self.as_tuple() + (self.mean_recall,)
        return ",".join(f"{v:.2f}" for v in vals)


@dataclass
class ZeroShotTemplate:
    """Prompt template with exactly one class-name slot."""

    template: str = ZERO_SHOT_TEMPLATE

    def __post_init__(self):
        if self.template.count(TEMPLATE_SLOT) != 1:
            raise ValidationError(f"template needs exactly one {TEMPLATE_SLOT!r} slot: "
                                  f"{self.template!r}")

    def expand(self, class_name: str) -> str:
        return self.template.replace(TEMPLATE_SLOT, class_name)


# ---------------------------------------------------------------------------
# ranking metrics
# ---------------------------------------------------------------------------

def _ranked_gallery(row: np.ndarray) -> np.ndarray:
    """Gallery indices by descending similarity, ascending index on ties."""
    return np.argsort(-row, kind="stable")


def recall_at_k(sim, gt: GroundTruth, k: int) -> float:
    """Percentage of queries whose top-k ranking contains a correct item."""
    sim = _as_similarity(sim)
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    if k > sim.num_gallery:
        raise DomainError(f"k={k} exceeds gallery size {sim.num_gallery}")
    gt.validate(sim.num_queries, sim.num_gallery)
    hits = 0
    for q in range(sim.num_queries):
        top = _ranked_gallery(sim.values[q])[:k]
        if not gt.correct[q].isdisjoint(top.tolist()):
            hits += 1
    return 100.0 * hits / sim.num_queries


def mean_recall(six_values) -> float:
    """Arithmetic mean of R@1/5/10 in both directions."""
    vals = tuple(float(v) for v in six_values)
    if len(vals) != 6:
        raise ContractError(f"mean recall takes exactly six values, got {len(vals)}")
    for v in vals:
        if not 0.0 <= v <= 100.0:
            raise DomainError(f"recall {v} outside [0, 100]")
    return sum(vals) / 6.0


def retrieve_top_k(query_embedding, gallery_embeddings, k: int) -> list[int]:
    """Top-k gallery indices by cosine similarity to the query."""
    q = np.asarray(query_embedding.data if isinstance(query_embedding, Tensor)
                   else query_embedding, dtype=np.float64)
    g = np.asarray(gallery_embeddings.data if isinstance(gallery_embeddings, Tensor)
                   else gallery_embeddings, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] == 0:
        raise ContractError(f"gallery must be a non-empty [G, m] matrix, got {g.shape}")
    if q.shape != (g.shape[1],):
        raise ContractError(f"query shape {q.shape} vs gallery rows of {g.shape[1]}")
    if not 1 <= k <= g.shape[0]:
        raise DomainError(f"k={k} outside [1, {g.shape[0]}]")
    sims = cosine_matrix(q[None, :], g)[0]
    return _ranked_gallery(sims)[:k].tolist()


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities between rows of a and rows of b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    return np.clip(an @ bn.T, -1.0, 1.0)


def zero_shot_classify(image_embeddings, class_names: list[str],
                       template: ZeroShotTemplate, text_encoder) -> list[int]:
    """Predict the class whose prompt embedding is most cosine-similar to
    each image embedding; ties break toward the lower class index.

    text_encoder maps a prompt string to a 1-D embedding.
    """
    if not class_names:
        raise ContractError("zero-shot classification needs at least one class")
    imgs = np.asarray(image_embeddings.data if isinstance(image_embeddings, Tensor)
                      else image_embeddings, dtype=np.float64)
    if imgs.ndim != 2:
        raise ContractError(f"image embeddings must be [Q, m], got {imgs.shape}")
    prompts = [template.expand(name) for name in class_names]
    class_vecs = []
    for p in prompts:
        v = text_encoder(p)
        class_vecs.append(np.asarray(v.data if isinstance(v, Tensor) else v,
                                     dtype=np.float64))
    sims = cosine_matrix(imgs, np.stack(class_vecs))
    # argmax returns the first (lowest-index) maximum, which is the tie rule
    return [int(np.argmax(row)) for row in sims]


# ---------------------------------------------------------------------------
# split procedure
# ---------------------------------------------------------------------------

def split_80_20(class_to_filenames: dict[str, list[str]], seed: int = 42):
    """Per class: Fisher-Yates shuffle (SplitMix64 keyed on seed XOR a stable
    hash of the class name), first floor(0.8 n) to train and the rest to
    test."""
    train, test = {}, {}
    for cls, files in class_to_filenames.items():
        if not files:
            raise ContractError(f"class {cls!r} has no filenames")
        rng = SplitMix64(seed ^ stable_hash(cls))
        shuffled = fisher_yates(list(files), rng)
        cut = int(0.8 * len(shuffled))
        train[cls] = shuffled[:cut]
        test[cls] = shuffled[cut:]
    return train, test


# ---------------------------------------------------------------------------
# retrieval-augmented captioning prompts
# ---------------------------------------------------------------------------

def format_lmcap_block(retrieved_captions: list[str], language_name: str) -> str:
    if not retrieved_captions:
        raise ContractError("need at least one retrieved caption")
    for c in retrieved_captions:
        if not c:
            raise ValidationError("retrieved caption list contains an empty caption")
    joined = ", ".join(f'"{c}"' for c in retrieved_captions)
    return LMCAP_TEMPLATE.format(captions=joined, language=language_name)


def build_lmcap_prompt(retrieved_captions: list[str], language_name: str,
                       fewshot_blocks: list[str] = ()) -> str:
    """Concatenate preformatted few-shot blocks (in order) and the query
    block.  Retrieved captions appear quoted and comma-joined, in retrieval
    order."""
    return "".join(fewshot_blocks) + format_lmcap_block(retrieved_captions, language_name)


def format_lmcap_example(retrieved_captions: list[str], language_name: str,
                         completion: str) -> str:
    """One few-shot block: the query template with its answer appended."""
    return format_lmcap_block(retrieved_captions, language_name) + f" {completion}\n\n"


# ---------------------------------------------------------------------------
# retrieval harness over embedding sets
# ---------------------------------------------------------------------------

def retrieval_report(image_embeddings: np.ndarray, caption_embeddings: np.ndarray,
                     caption_to_image: list[int]) -> RetrievalReport:
    """Recalls for both directions from embedding matrices.

    caption_to_image[j] is the image row each caption row belongs to.  A
    text query counts one correct image; an image query counts a hit when
    any of its captions ranks inside the top k.
    """
    n_img = image_embeddings.shape[0]
    if len(caption_to_image) != caption_embeddings.shape[0]:
        raise ContractError("caption ownership list does not match caption count")
    i2t_sim = SimilarityMatrix(cosine_matrix(image_embeddings, caption_embeddings))
    t2i_sim = SimilarityMatrix(cosine_matrix(caption_embeddings, image_embeddings))
    img_to_caps: dict[int, set] = {i: set() for i in range(n_img)}
    for cap_idx, img_idx in enumerate(caption_to_image):
        img_to_caps[img_idx].add(cap_idx)
    gt_i2t = GroundTruth(img_to_caps)
    gt_t2i = GroundTruth({j: {img} for j, img in enumerate(caption_to_image)})
    i2t = tuple(recall_at_k(i2t_sim, gt_i2t, min(k, i2t_sim.num_gallery))
                for k in (1, 5, 10))
    t2i = tuple(recall_at_k(t2i_sim, gt_t2i, min(k, t2i_sim.num_gallery))
                for k in (1, 5, 10))
    return RetrievalReport.from_recalls(i2t, t2i)
