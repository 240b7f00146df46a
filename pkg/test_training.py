"""
Tests for the training objective, the gradient path, the loop and checkpoints
"""
import json
from unittest.mock import patch

import pytest
import torch

import mulmon.inference
from mulmon.inference import inner_loop
from mulmon.config import derive_seed
from mulmon.errors import CheckpointError, NumericError
from mulmon.generative import DecoderOutput
from mulmon.latent_state import LatentSlots, init_prior, kl_gaussian
from mulmon.network import build_model
from mulmon.services.checkpoints import CheckpointManager, read_checkpoint, restore_model
from mulmon.training import (
    BatchSampler,
    Trainer,
    ViewPartition,
    elbo_batch,
    elbo_single_scene,
    information_gain,
    lr_schedule,
    partition_views,
    query_loss,
)


def _scene_batch(views=3, size=8, seed=0):
    generator = torch.Generator().manual_seed(seed)
    images = torch.rand(1, views, 3, size, size, generator=generator, dtype=torch.float64)
    angles = torch.rand(1, views, generator=generator, dtype=torch.float64) * 6.28
    viewpoints = torch.stack([angles.cos(), angles.sin(), torch.full_like(angles, 4.0)], dim=-1)
    return images, viewpoints


class TestSchedule:
    """Test the learning-rate schedule"""

    def test_schedule_endpoints(self):
        """Test eta0 at step 0 and eta0 / 10 at the decay horizon"""
        assert lr_schedule(0) == 3e-4
        assert lr_schedule(600_000) == pytest.approx(3e-5, rel=1e-12)

    def test_schedule_clamps(self):
        """Test the rate never drops below eta0 / 10"""
        assert lr_schedule(10_000_000) == pytest.approx(3e-5, rel=1e-12)

    def test_schedule_midpoint(self):
        """Test the linear decay halfway"""
        assert lr_schedule(300_000) == pytest.approx(3e-4 * 0.55, rel=1e-12)

    def test_negative_step(self):
        """Test negative steps are rejected"""
        with pytest.raises(ValueError):
            lr_schedule(-1)


class TestPartition:
    """Test observed/query view splits"""

    def test_partition_properties(self):
        """Test disjoint sets covering every view with a bounded observed count"""
        generator = torch.Generator().manual_seed(0)
        for _ in range(50):
            partition = partition_views(10, generator, max_observed=5)
            assert 1 <= len(partition.observed) <= 5
            assert set(partition.observed) | set(partition.query) == set(range(10))
            assert not set(partition.observed) & set(partition.query)

    def test_two_views(self):
        """Test two views give one observed and one query view"""
        partition = partition_views(2, torch.Generator().manual_seed(1))
        assert len(partition.observed) == 1
        assert len(partition.query) == 1

    def test_single_view_rejected(self):
        """Test a one-view scene cannot be partitioned"""
        with pytest.raises(ValueError):
            partition_views(1)

    def test_overlap_rejected(self):
        """Test observed and query views must be disjoint"""
        with pytest.raises(ValueError, match="overlap"):
            ViewPartition(observed=(0, 1), query=(1,))


class TestObjective:
    """Test the negative ELBO terms"""

    def test_information_gain_is_kl(self):
        """Test IG is the KL between consecutive posteriors"""
        posterior = LatentSlots(torch.ones(2, 3, dtype=torch.float64), torch.zeros(2, 3, dtype=torch.float64))
        prior = init_prior(2, 3, dtype=torch.float64)
        assert torch.equal(information_gain(posterior, prior), kl_gaussian(posterior, prior))

    def test_query_loss_rewards_exact_means(self, micro_model):
        """Test the query loss drops when rendered means equal the query image"""
        images, viewpoints = _scene_batch(views=1)
        posterior = init_prior(2, 4, batch_shape=(1,), dtype=torch.float64)
        logits = torch.randn(1, 2, 1, 8, 8, dtype=torch.float64)
        exact = DecoderOutput(images[:, 0].unsqueeze(1).expand(1, 2, 3, 8, 8), logits)
        corrupted = DecoderOutput(exact.rgb_means + 0.3, logits)
        with patch.object(micro_model, "render_latents", return_value=exact):
            good = query_loss(posterior, images, viewpoints, micro_model)
        with patch.object(micro_model, "render_latents", return_value=corrupted):
            bad = query_loss(posterior, images, viewpoints, micro_model)
        assert good.item() < bad.item()

    def test_empty_query_set(self, micro_model):
        """Test an empty query set contributes zero"""
        posterior = init_prior(2, 4, batch_shape=(1,), dtype=torch.float64)
        loss = query_loss(posterior, torch.zeros(1, 0, 3, 8, 8, dtype=torch.float64), torch.zeros(1, 0, 3), micro_model)
        assert torch.equal(loss, torch.zeros(1, dtype=torch.float64))

    def test_breakdown(self, micro_model, micro_train_config):
        """Test the breakdown adds up and records the partition sizes"""
        images, viewpoints = _scene_batch()
        breakdown = elbo_batch(
            images,
            viewpoints,
            micro_model,
            micro_train_config,
            generator=torch.Generator().manual_seed(0),
            partition=ViewPartition(observed=(0, 1), query=(2,)),
        )
        expected = breakdown.observed_nll + breakdown.query_nll + micro_train_config.alpha_ig * breakdown.ig_term
        assert torch.equal(breakdown.total, expected)
        record = breakdown.to_record(step=1, learning_rate=3e-4)
        assert (record.num_observed, record.num_query) == (2, 1)
        assert record.ig_term >= 0.0

    def test_single_scene_matches_batch(self, micro_model, micro_train_config):
        """Test the single-scene form equals a batch of one"""
        images, viewpoints = _scene_batch()
        partition = ViewPartition(observed=(1,), query=(0, 2))
        single = elbo_single_scene(
            images[0], viewpoints[0], micro_model, micro_train_config, torch.Generator().manual_seed(3), partition
        )
        batch = elbo_batch(
            images, viewpoints, micro_model, micro_train_config, torch.Generator().manual_seed(3), partition
        )
        assert single.total.item() == batch.total.item()

    def test_single_view_reduces_to_one_inner_loop(self, micro_model, micro_train_config):
        """Test one observed view and no queries give the inner-loop NLL plus KL to the standard normal"""
        images, viewpoints = _scene_batch(views=1)
        breakdown = elbo_batch(
            images,
            viewpoints,
            micro_model,
            micro_train_config,
            torch.Generator().manual_seed(4),
            ViewPartition(observed=(0,), query=()),
        )
        reference = inner_loop(
            init_prior(2, 4, batch_shape=(1,), dtype=torch.float64),
            images[:, 0],
            viewpoints[:, 0],
            micro_train_config.num_iterations,
            micro_model,
            train_mode=True,
            generator=torch.Generator().manual_seed(4),
            kl_weight=micro_train_config.alpha_ig,
        )
        assert breakdown.query_nll.item() == 0.0
        assert breakdown.ig_term.item() == pytest.approx(reference.kl.item(), rel=1e-12)
        assert breakdown.total.item() == pytest.approx(reference.loss.item(), rel=1e-12)

    def test_query_order_does_not_change_loss(self, micro_model, micro_train_config):
        """Test listing the same query views in another order gives the same loss"""
        images, viewpoints = _scene_batch(views=4)
        losses = [
            elbo_batch(
                images,
                viewpoints,
                micro_model,
                micro_train_config,
                torch.Generator().manual_seed(6),
                ViewPartition(observed=(0, 1), query=query),
            ).total.item()
            for query in [(2, 3), (3, 2)]
        ]
        assert losses[0] == losses[1]

    def test_total_loss_is_slot_permutation_invariant(self, micro_model_config, micro_train_config):
        """Test permuting the slot noise leaves the loss unchanged across random models"""
        config = micro_model_config.model_copy(update={"num_slots": 3})
        images, viewpoints = _scene_batch(views=3, seed=2)
        images, viewpoints = images.float(), viewpoints.float()
        partition = ViewPartition(observed=(0, 1), query=(2,))
        num_draws = len(partition.observed) * micro_train_config.num_iterations + len(partition.query)
        for seed in range(20):
            model = build_model(config, seed=seed)
            generator = torch.Generator().manual_seed(seed)
            draws = [torch.randn(1, 3, 4, generator=generator) for _ in range(num_draws)]
            perm = torch.randperm(3, generator=generator)
            totals = []
            for noise in (draws, [eps[:, perm] for eps in draws]):
                supply = iter(noise)
                fake = lambda *args, **kwargs: next(supply)  # noqa: E731
                with patch("mulmon.inference.draw_noise", side_effect=fake), patch(
                    "mulmon.training.draw_noise", side_effect=fake
                ):
                    totals.append(elbo_batch(images, viewpoints, model, micro_train_config, partition=partition).total.item())
            assert totals[1] == pytest.approx(totals[0], rel=1e-5)

    def test_numeric_error_names_scene(self, micro_model, micro_train_config):
        """Test a non-finite loss reports the scene and view"""
        images, viewpoints = _scene_batch()
        images[0, 1, 0, 0, 0] = float("nan")
        with pytest.raises(NumericError) as excinfo:
            elbo_batch(
                images,
                viewpoints,
                micro_model,
                micro_train_config,
                partition=ViewPartition(observed=(0, 1), query=(2,)),
                scene_ids=["train-00007"],
            )
        assert excinfo.value.scene_id == "train-00007"
        assert excinfo.value.view_index == 1
        assert "train-00007" in str(excinfo.value)


class TestGradientCheck:
    """Test the full objective gradient against central finite differences"""

    def test_full_gradient_matches_finite_differences(self, micro_model, micro_train_config):
        """Test every parameter group with the refinement-input gradients held fixed"""
        images, viewpoints = _scene_batch(views=3, seed=5)
        partition = ViewPartition(observed=(0, 1), query=(2,))
        real_loss_gradients = mulmon.inference.loss_gradients
        recorded = []

        def recording(*args, **kwargs):
            grads = real_loss_gradients(*args, **kwargs)
            recorded.append(grads)
            return grads

        def objective():
            generator = torch.Generator().manual_seed(17)
            return elbo_batch(images, viewpoints, micro_model, micro_train_config, generator, partition).total

        with patch("mulmon.inference.loss_gradients", side_effect=recording):
            micro_model.zero_grad()
            objective().backward()
        analytic = {name: param.grad.detach().clone() for name, param in micro_model.named_parameters()}
        assert len(recorded) == 4

        def replayed():
            replay = iter(recorded)
            with patch("mulmon.inference.loss_gradients", side_effect=lambda *args, **kwargs: next(replay)):
                with torch.no_grad():
                    return objective().item()

        step = 1e-5
        worst = 0.0
        checked = set()
        for group, parameters in micro_model.parameter_groups().items():
            names = [name for name, param in micro_model.named_parameters() if any(param is p for p in parameters)]
            for name in names:
                param = dict(micro_model.named_parameters())[name]
                flat = param.data.view(-1)
                for index in range(0, flat.numel(), max(1, flat.numel() // 3)):
                    original = flat[index].item()
                    flat[index] = original + step
                    upper = replayed()
                    flat[index] = original - step
                    lower = replayed()
                    flat[index] = original
                    numeric = (upper - lower) / (2.0 * step)
                    exact = analytic[name].view(-1)[index].item()
                    worst = max(worst, abs(numeric - exact) / max(abs(numeric), abs(exact), 1.0))
                    checked.add(group)
        assert checked == {"view_transformer", "decoder", "refinement"}
        assert worst < 1e-3


class TestBatchSampler:
    """Test scene batching"""

    def test_epoch_covers_every_scene(self):
        """Test one epoch visits each scene once"""
        sampler = BatchSampler(6, 2, seed=0)
        seen = sampler.next_batch() + sampler.next_batch() + sampler.next_batch()
        assert sorted(seen) == list(range(6))

    def test_state_round_trip(self):
        """Test a restored sampler continues the same sequence"""
        sampler = BatchSampler(5, 2, seed=3)
        sampler.next_batch()
        state = sampler.state_dict()
        expected = [sampler.next_batch() for _ in range(4)]
        restored = BatchSampler(5, 2, seed=99)
        restored.load_state_dict(state)
        assert [restored.next_batch() for _ in range(4)] == expected

    def test_empty_dataset(self):
        """Test an empty dataset is rejected"""
        with pytest.raises(ValueError):
            BatchSampler(0, 2, seed=0)


class TestTrainer:
    """Test the training loop"""

    def test_fit_writes_metrics_and_checkpoints(self, micro_experiment, micro_dataset, tmp_path):
        """Test records, metrics lines and checkpoints after a short run"""
        scenes, _ = micro_dataset
        trainer = Trainer(scenes["train"], micro_experiment, tmp_path / "run")
        records = trainer.fit(total_steps=3, progress=False)
        assert [record.step for record in records] == [1, 2, 3]
        lines = (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()
        assert [json.loads(line)["step"] for line in lines] == [1, 2, 3]
        assert trainer.checkpoints.latest().name == "ckpt-00000003.pt"
        assert records[0].learning_rate == micro_experiment.train.initial_lr

    def test_resume_is_exact(self, micro_experiment, micro_dataset, tmp_path):
        """Test stopping and resuming reproduces an uninterrupted run"""
        scenes, _ = micro_dataset
        straight = Trainer(scenes["train"], micro_experiment, tmp_path / "straight", dtype=torch.float64)
        expected = straight.fit(total_steps=4, progress=False)

        first = Trainer(scenes["train"], micro_experiment, tmp_path / "split", dtype=torch.float64)
        first.fit(total_steps=2, progress=False)
        second = Trainer(scenes["train"], micro_experiment, tmp_path / "split", dtype=torch.float64)
        assert second.resume(tmp_path / "split" / "checkpoints") == 2
        resumed = second.fit(total_steps=4, progress=False)

        assert [record.step for record in resumed] == [3, 4]
        for ours, theirs in zip(resumed, expected[2:]):
            assert ours.total == pytest.approx(theirs.total, rel=1e-9)
        lines = (tmp_path / "split" / "metrics.jsonl").read_text().splitlines()
        assert [json.loads(line)["step"] for line in lines] == [1, 2, 3, 4]

    def test_same_seed_same_model(self, micro_experiment):
        """Test model initialization depends only on the seed"""
        first = build_model(micro_experiment.model, derive_seed(0, "model"))
        second = build_model(micro_experiment.model, derive_seed(0, "model"))
        for a, b in zip(first.parameters(), second.parameters()):
            assert torch.equal(a, b)


class TestCheckpoints:
    """Test checkpoint persistence"""

    def test_prune_and_resolve(self, micro_experiment, tmp_path):
        """Test only the newest checkpoints are kept and a directory resolves to the latest"""
        model = build_model(micro_experiment.model)
        manager = CheckpointManager(tmp_path, keep=2)
        for step in (1, 2, 3):
            manager.save(step, model, micro_experiment)
        assert [path.name for path in manager.list_checkpoints()] == ["ckpt-00000002.pt", "ckpt-00000003.pt"]
        assert manager.resolve(tmp_path).name == "ckpt-00000003.pt"
        sidecar = json.loads((tmp_path / "ckpt-00000003.json").read_text())
        assert sidecar["step"] == 3

    def test_restore_round_trip(self, micro_experiment, tmp_path):
        """Test restored weights equal the saved ones"""
        model = build_model(micro_experiment.model, seed=1)
        path = CheckpointManager(tmp_path).save(5, model, micro_experiment)
        other = build_model(micro_experiment.model, seed=2)
        assert restore_model(read_checkpoint(path), other) == 5
        for a, b in zip(model.parameters(), other.parameters()):
            assert torch.equal(a, b)

    def test_corrupt_checkpoint(self, tmp_path):
        """Test unreadable files raise CheckpointError"""
        (tmp_path / "ckpt-00000001.pt").write_bytes(b"garbage")
        with pytest.raises(CheckpointError, match="corrupt"):
            read_checkpoint(tmp_path / "ckpt-00000001.pt")

    def test_missing_checkpoint(self, tmp_path):
        """Test an empty directory has nothing to resolve"""
        with pytest.raises(CheckpointError, match="no checkpoints"):
            CheckpointManager(tmp_path).resolve(tmp_path)

    def test_mismatched_weights(self, micro_experiment, micro_model_config, tmp_path):
        """Test weights from another architecture are refused"""
        path = CheckpointManager(tmp_path).save(1, build_model(micro_experiment.model), micro_experiment)
        with pytest.raises(CheckpointError, match="do not fit"):
            restore_model(read_checkpoint(path), build_model(micro_model_config))
