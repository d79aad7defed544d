"""Prompt token lifecycle: init, serialization, compatibility checks, and
the frozen-backbone isolation contract."""

import numpy as np
import pytest
import torch

from trialign.encoders import EncoderConfig, TriModalModel, Vocab, tokenize_batch
from trialign.prompts import (
    PromptSet,
    PromptShapeError,
    check_compatible,
    init_prompts,
    read_prompts,
    write_prompts,
)
from trialign.seeding import derive_rng


class TestInit:
    def test_shape_and_count(self):
        ps = init_prompts(4, 5, 64, derive_rng(0, "p"))
        assert ps.tokens.shape == (4, 5, 64)
        assert ps.layers == 4 and ps.n == 5 and ps.width == 64

    def test_gaussian_scale(self):
        ps = init_prompts(8, 16, 64, derive_rng(1, "p"))
        assert abs(float(ps.tokens.std()) - 0.02) < 0.005
        assert abs(float(ps.tokens.mean())) < 0.005

    def test_deterministic(self):
        a = init_prompts(4, 5, 64, derive_rng(2, "p"))
        b = init_prompts(4, 5, 64, derive_rng(2, "p"))
        np.testing.assert_array_equal(a.tokens, b.tokens)

    def test_disabled_set(self):
        ps = init_prompts(4, 0, 64, derive_rng(3, "p"))
        assert ps.n == 0
        vocab = Vocab.build(["a cube"])
        model = TriModalModel.create(EncoderConfig(n_prompt_tokens=0), vocab, seed=0)
        imgs = torch.rand(2, 64, 64)
        with torch.no_grad():
            model.prompt_tokens.data = ps.to_tensor().reshape(4, 0, 64)
        assert torch.equal(model.encode_image(imgs, use_prompts=True),
                           model.encode_image(imgs, use_prompts=False))

    def test_negative_n_rejected(self):
        with pytest.raises(ValueError):
            init_prompts(4, -1, 64, derive_rng(0, "p"))

    def test_nonfinite_rejected(self):
        bad = np.zeros((2, 2, 4), dtype=np.float32)
        bad[0, 0, 0] = np.inf
        with pytest.raises(ValueError):
            PromptSet(tokens=bad)


class TestIO:
    def test_round_trip_bit_identical(self, tmp_path):
        ps = init_prompts(4, 5, 64, derive_rng(4, "p"))
        path = tmp_path / "prompts.vpt"
        write_prompts(path, ps)
        back = read_prompts(path)
        np.testing.assert_array_equal(back.tokens, ps.tokens)

    def test_mismatched_encoder_rejected(self, tmp_path):
        ps = init_prompts(4, 5, 64, derive_rng(5, "p"))
        with pytest.raises(PromptShapeError):
            check_compatible(ps, EncoderConfig(layers=6))

    def test_matching_encoder_accepted(self):
        ps = init_prompts(4, 5, 64, derive_rng(6, "p"))
        check_compatible(ps, EncoderConfig())

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.vpt"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(ValueError):
            read_prompts(path)


class TestIsolation:
    """Prompt training must leave frozen weights untouched, and removing the
    prompts must reproduce pre-training outputs exactly."""

    def test_prompt_updates_touch_only_prompts(self):
        vocab = Vocab.build(["this is a cube", "a photo of a sphere"])
        model = TriModalModel.create(EncoderConfig(), vocab, seed=20)
        model.freeze("base_2d", "base_text", "proj_2d", "proj_text")
        imgs = torch.rand(4, 64, 64)
        toks, eos = tokenize_batch(["this is a cube"] * 4, vocab)
        labels = torch.tensor([0, 0, 1, 1])

        before = {g: model.group_checksum(g)
                  for g in ("base_2d", "base_text", "proj_2d", "proj_text",
                            "enc_3d", "proj_3d")}
        plain_before = model.encode_image(imgs, use_prompts=False)

        from trialign.losses import loss_prompt
        opt = torch.optim.SGD([model.prompt_tokens], lr=1e-2)
        for _ in range(5):
            opt.zero_grad()
            f2d = model.embed_image(imgs, use_prompts=True)
            with torch.no_grad():
                ftext = model.embed_text(toks, eos)
            loss_prompt(f2d, ftext, labels, 0.07).backward()
            opt.step()

        for g, checksum in before.items():
            assert model.group_checksum(g) == checksum, f"group {g} drifted"
        # anti-forgetting: prompt-free forward reproduces pre-training outputs
        assert torch.equal(model.encode_image(imgs, use_prompts=False), plain_before)
