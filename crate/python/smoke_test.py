"""Smoke test for the trv bindings: simulate, train, predict, evaluate."""

import json
import sys
import tempfile
from pathlib import Path

import trv


def main() -> int:
    assert trv.contrastive_loss([[1.0, 0.0], [1.0, 0.0]], [[0.0, 1.0]], 1.0) == -1.0
    m = trv.classification_metrics([0.9, 0.8, 0.2, 0.1], [True, True, False, False])
    assert m["auroc"] == 1.0

    cfg = json.loads(trv.default_config())
    assert cfg["loss"]["tau"] == 0.05

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        n = trv.sim_gen(str(root / "data"), frames=8, seed=3)
        manifest = str(root / "data" / "manifest.json")
        print(trv.validate_feature_map(str(root / "data" / "frames" / "0000.trvf")))
        model = trv.train(manifest, str(root / "model"))
        print(model)
        assert model.vector is not None and len(model.vector) == model.dims[-1]
        reloaded = trv.Model.load(str(root / "model" / "checkpoint.trvc"))
        assert reloaded.dims == model.dims
        assert trv.predict(str(root / "model" / "checkpoint.trvc"), manifest, str(root / "pred")) == n
        metrics = trv.evaluate_metrics(str(root / "pred"), manifest)
        report = trv.evaluate_collisions(manifest)
        print(f"frames {n}  auroc {metrics['auroc']:.4f}  gt collision rate {report['rate']:.3f}")
    print("smoke test ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
