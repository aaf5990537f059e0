import pytest

from svdclip.adapt import contrastive_pretrain
from svdclip.clip_core import ModelConfig, init_model
from svdclip.encoder import EncoderConfig
from svdclip.linalg import make_rng
from svdclip.synth_data import SyntheticCorpusConfig, generate, split


def toy_config(width=8, heads=2, mlp=16, layers=1, joint=8, **kw):
    enc = EncoderConfig(width, heads, mlp, layers)
    base = dict(embed_dim=joint, patch_dim=6, num_patches=3, vocab_size=32, max_text_len=4)
    base.update(kw)
    return ModelConfig(enc, enc, **base)


def randomize_biases(model, seed, scale=0.1):
    rng = make_rng(seed)
    for enc in (model.vision, model.text):
        for _, lin in enc.named_linears():
            if lin.bias is not None:
                lin.bias[:] = rng.standard_normal(lin.bias.shape) * scale


@pytest.fixture
def rng():
    return make_rng(20240917)


@pytest.fixture(scope="session")
def desk_config():
    enc = EncoderConfig(32, 4, 64, 2)
    return ModelConfig(enc, enc, embed_dim=32, patch_dim=8, num_patches=4, vocab_size=64, max_text_len=8)


@pytest.fixture(scope="session")
def pretrained(desk_config):
    """Dense toy model pretrained on a 32-class synthetic corpus."""
    model = init_model(desk_config, 0)
    corpus = generate(SyntheticCorpusConfig(num_classes=32, samples_per_class=32, seed=1000))
    contrastive_pretrain(model, corpus, epochs=20, lr=1e-3, seed=0)
    return model


@pytest.fixture(scope="session")
def task_data():
    ds = generate(SyntheticCorpusConfig(num_classes=8, samples_per_class=48, seed=7, noise=0.1))
    return ds, split(ds, 0.5, 0)


ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
