"""Smoke test for the m2ctts extension module."""

import math
import sys
import tempfile
from pathlib import Path

import m2ctts

SMALL = [
    ("model.d_model", "16"),
    ("model.style_dim", "8"),
    ("model.ffn_filter", "24"),
    ("model.variance_filter", "8"),
    ("model.encoder_layers", "1"),
    ("model.decoder_layers", "1"),
    ("model.n_bins", "16"),
    ("train.batch_size", "3"),
]


def main() -> int:
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        manifest = m2ctts.gen_toy_corpus(str(tmp / "toy"), seed=7, dialogues=2, turns=4)
        corpus = m2ctts.Corpus(manifest)
        assert len(corpus) == 2
        first = corpus.dialogue_ids()[0]
        assert corpus.num_turns(first) == 4
        assert corpus.window(first, 3, 2) == [1, 2]

        cfg = m2ctts.RunConfig(preset="desk")
        back = m2ctts.RunConfig.from_json(cfg.to_json())
        assert back.model_hash() == cfg.model_hash()
        assert cfg.with_overrides([("train.lr", "0.5")]).model_hash() == cfg.model_hash()
        try:
            cfg.with_overrides([("train.nope", "1")])
            raise AssertionError("unknown key accepted")
        except ValueError:
            pass

        cfg = cfg.with_overrides(SMALL + [("ablation", "M7")])
        trainer = m2ctts.Trainer(cfg, str(tmp / "toy"))
        first_loss = trainer.step()
        assert set(first_loss) >= {"mel_l1", "prosody_mse", "total"}
        losses = trainer.run(20)
        assert all(math.isfinite(x) for x in losses)
        assert losses[-1] < first_loss["total"]
        assert trainer.step_count == 21
        ck = tmp / "final.m2ck"
        trainer.save_checkpoint(str(ck))
        print("eval", trainer.evaluate())

        mel, durations = m2ctts.synthesize(str(ck), str(tmp / "toy"), first, 3)
        assert len(mel) == sum(durations) and len(mel[0]) > 0
        again, _ = m2ctts.synthesize(str(ck), str(tmp / "toy"), first, 3)
        assert mel == again

    assert m2ctts.prosody_loss([0.0, 1.0], [0.0, 1.0]) == 0.0
    w = m2ctts.masked_softmax([[1.0, 5.0, 2.0]], [True, False, True])
    assert w[0][1] == 0.0 and abs(sum(w[0]) - 1.0) < 1e-12
    assert m2ctts.ablation_flags("M1") == (False, False, False, False)
    assert m2ctts.ablation_flags("M7") == (True, True, True, True)
    assert m2ctts.ABLATIONS[0] == "M1"
    results = m2ctts.verify_suite("windowing")
    assert results and all(r[2] for r in results), results
    assert m2ctts.run_cli(["train", "--bogus"]) == 2

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
