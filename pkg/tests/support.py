"""Small shared builders for the model-level tests."""

from scenegraph_ise.datagen import generate_split, load_vocab, profile_config
from scenegraph_ise.model import ISEModel, ModelConfig, Vocab

GEN_VOCAB = load_vocab()


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        word_emb_dim=4, concept_emb_dim=4, hidden_dim=8, ffn_dim=8, heads=2,
        query_layers=1, graph_layers=1, fusion_layers=1, dropout=0.0,
    )
    return ModelConfig(**{**base, **overrides})


def triples(profile="mscoco", n=20, seed=0, split="train"):
    cfg = profile_config(profile, **{split: n}, seed=seed)
    return generate_split(cfg, GEN_VOCAB, split)


def tiny_model(data, seed=0, **overrides) -> ISEModel:
    return ISEModel(tiny_config(**overrides), Vocab.build(data), seed=seed)
