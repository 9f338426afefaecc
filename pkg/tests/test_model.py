from dataclasses import dataclass

import numpy as np
import pytest
import torch

from blindcount.densitymap import integrate, pseudo_density
from blindcount.matching import matched_loss
from blindcount.model import (CountingNet, ModelConfig, TrainConfig, TrainingDiverged, backward,
                              blur_targets, extract_features, image_tensor, load_checkpoint,
                              loss_value, predict, save_checkpoint, train)
from gradcheck import TOLERANCE, run_gradcheck, toy_problem

SMALL = ModelConfig(n_heads=3, image_size=32, backbone_channels=(4, 8), k=8, head_channels=4)


@dataclass
class _Sample:
    image: np.ndarray
    densities: list


def _samples(n, size=32, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        image = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
        k = int(rng.integers(1, 3))
        dens = [pseudo_density(list(zip(rng.uniform(0, size, 4), rng.uniform(0, size, 4))),
                               size, size, 3.0) for _ in range(k)]
        out.append(_Sample(image, dens))
    return out


def _image(seed=0, size=32):
    return np.random.default_rng(seed).integers(0, 256, (size, size, 3), dtype=np.uint8)


class TestForward:
    def test_shapes_and_counts(self):
        torch.manual_seed(0)
        preds = predict(CountingNet(SMALL), _image())
        assert len(preds) == 3
        assert all(m.shape == (32, 32) for m in preds.maps)
        assert preds.counts == [pytest.approx(integrate(m)) for m in preds.maps]

    def test_zero_final_layer(self):
        model = CountingNet(SMALL)
        with torch.no_grad():
            model.head3.weight.zero_()
            model.head3.bias.zero_()
        preds = predict(model, _image())
        assert all(not m.any() for m in preds.maps) and preds.counts == [0.0] * 3

    def test_deterministic(self):
        torch.manual_seed(1)
        model = CountingNet(SMALL)
        a, b = predict(model, _image(3)), predict(model, _image(3))
        for x, y in zip(a.maps, b.maps):
            np.testing.assert_array_equal(x, y)

    def test_nonnegative_for_any_parameters(self):
        for seed in range(5):
            torch.manual_seed(seed)
            model = CountingNet(SMALL)
            with torch.no_grad():
                for p in model.parameters():
                    p.normal_(0, 2.0)
            assert all((m >= 0).all() for m in predict(model, _image(seed)).maps)

    def test_size_checks(self):
        model = CountingNet(SMALL)
        with pytest.raises(ValueError):
            predict(model, _image(size=64))
        with pytest.raises(ValueError):
            image_tensor(np.zeros((4, 4)))
        assert extract_features(model, _image()).shape == (8, 4, 4)

    def test_head_permutation_equivariance(self):
        torch.manual_seed(2)
        model = CountingNet(SMALL)
        image = _image(4)
        before = predict(model, image)
        order = [2, 0, 1]
        model.permute_heads(order)
        after = predict(model, image)
        for i, o in enumerate(order):
            np.testing.assert_allclose(after.maps[i], before.maps[o], rtol=1e-6, atol=1e-9)
        gts = [before.maps[0] * 0.5 + 1e-4, before.maps[2] + 2e-4]
        assert matched_loss(gts, after).loss == pytest.approx(matched_loss(gts, before).loss,
                                                              rel=1e-6)


class TestBackward:
    def test_gradient_check(self):
        result = run_gradcheck()
        assert result.checked >= 100, result
        assert not result.failures, result.failures[:5]
        assert result.max_rel_error < TOLERANCE

    def test_perfect_prediction_zero_gradient(self):
        model, image, _ = toy_problem()
        gts = list(predict(model, image).maps[:2])
        grads, loss, _ = backward(model, image, gts)
        assert loss == 0.0
        assert all(not g.any() for g in grads.values())

    def test_unmatched_head_gets_nothing(self):
        model, image, gts = toy_problem()
        grads, loss, assignment = backward(model, image, gts)
        [free] = set(range(3)) - set(assignment.predictions)
        for name, (_, block) in model.head_parameters(free).items():
            assert not grads[name][block].any(), name
        with torch.no_grad():
            for _, (tensor, block) in model.head_parameters(free).items():
                tensor[block] += torch.randn_like(tensor[block])
        assert loss_value(model, image, gts, assignment) == loss

    def test_backbone_gradient_only_through_matched(self):
        model, image, gts = toy_problem()
        grads, _, assignment = backward(model, image, gts)
        assert any(grads[n].any() for n in grads if n.startswith("backbone"))


class TestTraining:
    def test_loss_decreases(self):
        cfg = TrainConfig(epochs=11, lr=1e-3, warmup_blur=0.0, warmup_epochs=0, model=SMALL)
        result = train(_samples(6), cfg)
        assert result.log[10]["loss"] < result.log[0]["loss"]
        assert len(result.match_log) == 11 * 6
        assert {"epoch", "loss", "lr", "target_blur", "head_utilization"} <= set(result.log[0])

    def test_seed_reproducible(self):
        cfg = TrainConfig(epochs=2, model=SMALL)
        a, b = train(_samples(4), cfg).model, train(_samples(4), cfg).model
        for (na, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert torch.equal(pa, pb), na

    def test_frozen_backbone(self):
        torch.manual_seed(0)
        model = CountingNet(SMALL)
        backbone = {k: v.clone() for k, v in model.backbone.state_dict().items()}
        heads = model.head1.weight.clone()
        train(_samples(4), TrainConfig(epochs=2, freeze_backbone=True, model=SMALL), model=model)
        for k, v in model.backbone.state_dict().items():
            assert torch.equal(v, backbone[k])
        assert not torch.equal(model.head1.weight, heads)

    def test_schedule_halves(self):
        cfg = TrainConfig(epochs=5, halve_every=2, model=SMALL)
        lrs = [r["lr"] for r in train(_samples(2), cfg).log]
        assert lrs == pytest.approx([3e-4, 3e-4, 1.5e-4, 1.5e-4, 7.5e-5])

    def test_skips_oversized_and_detects_divergence(self, tmp_path):
        one_head = ModelConfig(n_heads=1, image_size=32, backbone_channels=(4, 8), k=8,
                               head_channels=4)
        samples = _samples(6)
        result = train(samples, TrainConfig(epochs=1, model=one_head), log_path=tmp_path / "l")
        usable = sum(len(s.densities) == 1 for s in samples)
        assert len(result.match_log) == usable
        assert (tmp_path / "l").read_text().count("\n") == 1
        bad = _samples(1)
        bad[0].densities[0][0, 0] = np.nan
        with pytest.raises(TrainingDiverged):
            train(bad, TrainConfig(epochs=1, warmup_epochs=0, model=SMALL))

    def test_warmup_blur(self):
        cfg = TrainConfig(warmup_blur=5.0, warmup_epochs=20)
        assert cfg.blur_at(1) == 5.0 and cfg.blur_at(11) == 2.5 and cfg.blur_at(21) == 0.0
        d = pseudo_density([(2.0, 2.0), (20.0, 16.0)], 32, 32, 3.0)
        [b] = blur_targets([d], 4.0)
        assert integrate(b) == pytest.approx(integrate(d), rel=1e-12)
        assert b.max() < d.max()
        assert blur_targets([d], 0.0)[0] is d

    @pytest.mark.parametrize("kw", [dict(epochs=0), dict(lr=0.0), dict(warmup_blur=-1.0)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw).validate()

    def test_config_round_trip(self):
        from dataclasses import asdict
        cfg = TrainConfig(epochs=3, model=SMALL)
        assert TrainConfig.from_dict(asdict(cfg)) == cfg


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        torch.manual_seed(5)
        model = CountingNet(SMALL)
        save_checkpoint(tmp_path / "c.bin", model, {"note": "x"})
        loaded, extra = load_checkpoint(tmp_path / "c.bin")
        assert extra == {"note": "x"}
        assert loaded.config == model.config
        for (k, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
            assert torch.equal(a, b), k
        image = _image(9)
        for a, b in zip(predict(model, image).maps, predict(loaded, image).maps):
            np.testing.assert_array_equal(a, b)

    def test_rejects_garbage(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"JUNK" + bytes(20))
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "x.bin")
