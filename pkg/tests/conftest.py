"""Shared fixtures.

``pipeline`` trains the full desk-scale stack once per session through the
command-line interface and records wall-clock timings; the slower end-to-end
tests all reuse its artifacts. The tiny fixtures are for fast unit tests.
"""

import os
import time

import numpy as np
import pytest

from rvqsynth.cli import main as cli_main
from rvqsynth.codec import Codec, CodecConfig, train_codec
from rvqsynth.data import CorpusConfig, generate_corpus, load_corpus


TINY = CorpusConfig(num_speakers=8, seqs_per_speaker=6, frames=24,
                    vertices=4, audio_dim=4, seed=0)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_corpus(TINY)


@pytest.fixture(scope="session")
def tiny_codec(tiny_corpus):
    cfg = CodecConfig(input_dim=3 * TINY.vertices, depth=3, codebook_size=8,
                      code_dim=6, epochs=4, seed=0)
    codec, _ = train_codec(tiny_corpus, cfg)
    return codec


def _run(argv):
    rc = cli_main(argv)
    assert rc == 0, f"command failed ({rc}): {' '.join(argv)}"


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """Full desk-scale pipeline trained through the CLI, with timings."""
    root = tmp_path_factory.mktemp("pipeline")
    paths = {
        "root": root,
        "corpus_dir": str(root / "corpus"),
        "codec": str(root / "codec.ckpt"),
        "ar": str(root / "ar.ckpt"),
        "sync1": str(root / "sync1.ckpt"),
        "sync2": str(root / "sync2.ckpt"),
        "style": str(root / "style.ckpt"),
        "eval_dir": str(root / "eval"),
    }
    timings = {}

    def timed(name, argv):
        t0 = time.monotonic()
        _run(argv)
        timings[name] = time.monotonic() - t0

    timed("gen-data", ["gen-data", "--out", paths["corpus_dir"]])
    timed("train-codec", ["train-codec", "--data", paths["corpus_dir"],
                          "--out", paths["codec"]])
    timed("train-ar", ["train-ar", "--data", paths["corpus_dir"],
                       "--codec", paths["codec"], "--out", paths["ar"]])
    timed("train-sync1", ["train-sync", "--data", paths["corpus_dir"],
                          "--variant", "1", "--out", paths["sync1"]])
    timed("train-sync2", ["train-sync", "--data", paths["corpus_dir"],
                          "--variant", "2", "--out", paths["sync2"]])
    timed("train-style", ["train-style", "--data", paths["corpus_dir"],
                          "--out", paths["style"]])
    timed("evaluate", ["evaluate", "--data", paths["corpus_dir"],
                       "--codec", paths["codec"], "--ar", paths["ar"],
                       "--sync1", paths["sync1"], "--sync2", paths["sync2"],
                       "--style", paths["style"], "--out", paths["eval_dir"]])
    paths["timings"] = timings
    return paths


@pytest.fixture(scope="session")
def trained_corpus(pipeline):
    return load_corpus(pipeline["corpus_dir"])


@pytest.fixture(scope="session")
def trained_codec(pipeline):
    return Codec.load(pipeline["codec"])
