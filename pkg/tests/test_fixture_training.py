"""Smoke properties of a short training run on the committed fixture."""

from pathlib import Path

import numpy as np
import pytest

from eventloc.autograd import no_grad
from eventloc.config import ExperimentConfig
from eventloc.dataset import load_split
from eventloc.evaluate import evaluate
from eventloc.fusion import LossWeights, forward, init_model, total_loss
from eventloc.train import load_model, prepare_batch, train

FIXTURE = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    cfg = ExperimentConfig.load(FIXTURE / "desk8.yaml")
    ckpt = tmp_path_factory.mktemp("fixture-train") / "model.ckpt"
    result = train(cfg, FIXTURE / "desk8", ckpt)
    return cfg, ckpt, result


def _train_set_loss(cfg, weights):
    """Total loss over the whole training split, so batch-to-batch variation does not enter."""
    batch = prepare_batch(cfg, load_split(FIXTURE / "desk8", "train"))
    lw = LossWeights(cfg.loss.alpha, cfg.loss.beta, cfg.loss.gamma)
    with no_grad():
        res = forward(batch.depth, batch.event, weights, cfg.train.iters, cfg.model_config())
        return total_loss(res, batch.flow, batch.valid, batch.edge, lw)[0].item()


def test_training_halves_total_loss(trained):
    cfg, ckpt, result = trained
    assert result.steps == 200 and len(result.log) == 200
    before = _train_set_loss(cfg, init_model(cfg.model_config(), seed=cfg.seed))
    after = _train_set_loss(cfg, load_model(ckpt))
    assert after <= 0.5 * before, (before, after)


def test_constant_depth_hallucinates_no_edges(trained):
    cfg, ckpt, _ = trained
    h, w = cfg.data.height, cfg.data.width
    with no_grad():
        res = forward(np.ones((1, 1, h, w), np.float32), np.zeros((1, 1, h, w), np.float32), load_model(ckpt), 1,
                      cfg.model_config())
    assert float(res.hed_fused.data.mean()) < 0.3


def test_refinement_does_not_degrade(trained):
    cfg, ckpt, _ = trained
    per_iter = evaluate(cfg, ckpt, FIXTURE / "desk8")["aggregate"]["epe_by_iter"]
    assert len(per_iter) == cfg.eval.iters
    tail = np.array(per_iter[3:])
    # non-increasing from n=4 to N within a 5% band around the running minimum
    assert np.all(tail <= 1.05 * np.minimum.accumulate(tail)), per_iter
