"""Smoke test for the Python bindings.

Build and install first:  pip install --no-build-isolation ./crates/py
"""

import json
import math
import sys
import tempfile
from pathlib import Path

import kreplay

SMALL = dict(
    size_pretrain=96, size_generic_train=64, size_generic_val=8, size_generic_test=8,
    size_replay=16, size_concept_val=8, size_concept_test=12,
    pretrain_epochs=1, epochs=1, d_model=16, d_ff=32,
)


def close(a, b, tol=1e-6):
    assert abs(a - b) <= tol, (a, b)


def main():
    close(kreplay.coverage_loss([1.0]), 0.313262)
    close(kreplay.kpred_loss([0.0]), 1 + math.log(2))
    close(kreplay.cosine_lr(3e-3, 3e-5, 0, 10), 3e-3, 1e-12)
    close(kreplay.bleu({0: "the cat sat"}, {0: ["the cat sat down"]}, 1), 0.7165, 1e-4)
    close(kreplay.rouge_l({0: "a b c d"}, {0: ["a c b d"]}), 0.75)
    assert kreplay.recognition_accuracy({0: "a view of the golden gate bridge"}, {0: ["golden gate bridge"]}) == 1.0

    try:
        kreplay.RunConfig(no_such_key=1)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        cfg = kreplay.RunConfig(data_dir=root / "data", **SMALL)
        counts = kreplay.gen_data(cfg, root / "data")
        assert counts["concept_test"] == 12, counts
        kreplay.pretrain(cfg, root / "base")
        cfg.set("base_checkpoint", root / "base" / "best.ckpt")
        ft = kreplay.finetune(cfg, root / "ft")
        close(ft["final_lr"], float(cfg.to_dict()["lr_min"]), 1e-12)
        cfg.set("teacher_checkpoint", root / "ft" / "best.ckpt")
        kreplay.kreplay_train(cfg, root / "kr")
        cfg.set("checkpoint", root / "kr" / "best.ckpt")
        report = json.loads(kreplay.evaluate(cfg, root / "eval"))
        assert set(report) >= {"generic", "seen", "unseen"}, report.keys()
        cfg.set("image_ids", "0,1")
        lines = [json.loads(l) for l in kreplay.decode(cfg)]
        assert len(lines) == 2 and lines[0]["method"] == "beam"

        model = kreplay.Model.load(root / "kr" / "best.ckpt")
        conf = json.loads(model.config)
        patches = [[0.0] * conf["d_patch"] for _ in range(conf["grid_h"] * conf["grid_w"])]
        tokens, logprob = model.caption(patches, method="greedy")
        assert tokens[0] != tokens[-1] and logprob <= 0.0
        try:
            kreplay.Model.load(root / "missing.ckpt")
        except FileNotFoundError:
            pass
        else:
            raise AssertionError("missing checkpoint loaded")

    print("python smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
