import math

import numpy as np
import pytest
import torch

from fusc.augment import standard_policy
from fusc.ssl import (
    BatchTooSmall,
    EmbeddingMatrix,
    EmptyTrainSet,
    EncoderConfig,
    EncoderState,
    contrastive_loss,
    ema_update,
    embed,
    self_distillation_loss,
    train_ssl,
    update_center,
)
from tests.oracles import finite_difference_grad, relative_grad_error

TINY = EncoderConfig(
    topology="small-convolutional-residual",
    embedding_dim=16,
    projection_dim=8,
    conv_widths=(8, 16),
    epochs=2,
    batch_size=32,
    learning_rate=1e-3,
    seed=0,
    image_size=16,
)


@pytest.fixture
def blob_images(rng):
    # two texture families so the pretext task has something to separate
    images = []
    for i in range(96):
        if i % 2 == 0:
            img = np.zeros((16, 16), dtype=np.float32)
            img[4:12, 4:12] = 1.0
        else:
            img = np.zeros((16, 16), dtype=np.float32)
            img[::2, :] = 1.0
        img += rng.normal(0, 0.05, size=(16, 16)).astype(np.float32)
        images.append(np.clip(img, 0, 1))
    return np.stack(images)


class TestContrastiveLoss:
    def test_orthogonal_pairs_hand_value(self):
        e1 = torch.tensor([1.0, 0.0], dtype=torch.float64)
        e2 = torch.tensor([0.0, 1.0], dtype=torch.float64)
        loss = contrastive_loss(torch.stack([e1, e2]), torch.stack([e1, e2]), temperature=1.0)
        assert float(loss) == pytest.approx(math.log(1 + 2 / math.e), abs=1e-12)
        assert float(loss) == pytest.approx(0.5514, abs=5e-5)

    def test_all_identical_uniform_softmax(self):
        e = torch.tensor([[0.6, 0.8], [0.6, 0.8]], dtype=torch.float64)
        loss = contrastive_loss(e, e, temperature=1.0)
        assert float(loss) == pytest.approx(math.log(3), abs=1e-12)
        assert float(loss) == pytest.approx(1.0986, abs=5e-5)

    def test_batch_too_small(self):
        z = torch.ones((1, 4), dtype=torch.float64)
        with pytest.raises(BatchTooSmall):
            contrastive_loss(z, z, temperature=0.5)

    def test_invalid_temperature(self):
        z = torch.ones((2, 4), dtype=torch.float64)
        with pytest.raises(ValueError):
            contrastive_loss(z, z, temperature=0.0)

    def test_gradient_matches_finite_differences(self, rng):
        for _ in range(20):
            b = int(rng.integers(2, 5))
            p = int(rng.integers(2, 6))
            tau = float(rng.uniform(0.2, 1.5))
            za = torch.from_numpy(rng.normal(size=(b, p))).requires_grad_(True)
            zb = torch.from_numpy(rng.normal(size=(b, p))).requires_grad_(True)
            loss = contrastive_loss(za, zb, tau)
            loss.backward()
            fd_a = finite_difference_grad(
                lambda t: contrastive_loss(t, zb.detach(), tau), za.detach().clone()
            )
            fd_b = finite_difference_grad(
                lambda t: contrastive_loss(za.detach(), t, tau), zb.detach().clone()
            )
            assert relative_grad_error(za.grad, fd_a) < 1e-4
            assert relative_grad_error(zb.grad, fd_b) < 1e-4

    def test_invariant_under_common_rotation(self, rng):
        for _ in range(10):
            b, p = 6, 5
            za = torch.from_numpy(rng.normal(size=(b, p)))
            zb = torch.from_numpy(rng.normal(size=(b, p)))
            q, _ = np.linalg.qr(rng.normal(size=(p, p)))
            rot = torch.from_numpy(q)
            base = float(contrastive_loss(za, zb, 0.5))
            rotated = float(contrastive_loss(za @ rot, zb @ rot, 0.5))
            assert rotated == pytest.approx(base, abs=1e-6)


class TestSelfDistillationLoss:
    def test_uniform_teacher_bound(self, rng):
        p = 6
        student = torch.from_numpy(rng.normal(size=(4, p)))
        teacher = torch.full((4, p), 2.5, dtype=torch.float64)
        center = torch.full((p,), 2.5, dtype=torch.float64)
        loss = self_distillation_loss(student, teacher, center, 0.1, 0.2)
        logp = torch.log_softmax(student / 0.2, dim=1)
        expected = float((-logp.mean(dim=1)).mean())
        assert float(loss) == pytest.approx(expected, abs=1e-12)
        assert float(loss) >= math.log(p) - 1e-9

    def test_matching_distributions_give_entropy(self, rng):
        logits = torch.from_numpy(rng.normal(size=(3, 5)))
        temp = 0.3
        center = torch.zeros(5, dtype=torch.float64)
        loss = self_distillation_loss(
            logits * (0.1 / temp), logits, center, teacher_temp=temp, student_temp=0.1
        )
        target = torch.softmax(logits / temp, dim=1)
        entropy = float(-(target * torch.log(target)).sum(dim=1).mean())
        assert float(loss) == pytest.approx(entropy, abs=1e-9)

    def test_nonnegative(self, rng):
        for _ in range(30):
            s = torch.from_numpy(rng.normal(size=(5, 7)))
            t = torch.from_numpy(rng.normal(size=(5, 7)))
            c = torch.from_numpy(rng.normal(size=7))
            assert float(self_distillation_loss(s, t, c, 0.05, 0.1)) >= 0.0

    def test_ema_identity_at_momentum_one(self):
        a = torch.nn.Linear(4, 4)
        b = torch.nn.Linear(4, 4)
        before = [p.detach().clone() for p in a.parameters()]
        ema_update(a, b, momentum=1.0)
        for prev, now in zip(before, a.parameters()):
            assert torch.equal(prev, now)

    def test_ema_copy_at_momentum_zero(self):
        a = torch.nn.Linear(4, 4)
        b = torch.nn.Linear(4, 4)
        ema_update(a, b, momentum=0.0)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_center_update(self):
        center = torch.zeros(3)
        logits = torch.ones((4, 3))
        out = update_center(center, logits, momentum=0.9)
        assert torch.allclose(out, torch.full((3,), 0.1))


class TestTrainSSL:
    def test_seeded_determinism(self, blob_images):
        ids = [f"i{k}" for k in range(len(blob_images))]
        s1 = train_ssl(None, TINY, standard_policy(), images=blob_images, ids=ids)
        s2 = train_ssl(None, TINY, standard_policy(), images=blob_images, ids=ids)
        assert s1.training_log == s2.training_log
        for k in s1.weights["backbone"]:
            assert torch.equal(s1.weights["backbone"][k], s2.weights["backbone"][k])

    def test_loss_decreases(self, blob_images):
        cfg = EncoderConfig(
            topology="small-convolutional-residual",
            embedding_dim=16,
            projection_dim=8,
            conv_widths=(8, 16),
            epochs=5,
            batch_size=32,
            learning_rate=2e-3,
            seed=1,
            image_size=16,
        )
        ids = [f"i{k}" for k in range(len(blob_images))]
        state = train_ssl(None, cfg, standard_policy(), images=blob_images, ids=ids)
        assert state.training_log[4]["loss"] < state.training_log[0]["loss"]

    def test_empty_train_set(self):
        with pytest.raises(EmptyTrainSet):
            train_ssl(None, TINY, standard_policy(), images=np.zeros((0, 16, 16), np.float32), ids=[])

    def test_self_distillation_path_runs(self, blob_images):
        cfg = EncoderConfig(
            topology="small-patch-transformer",
            embedding_dim=16,
            projection_dim=8,
            vit_dim=16,
            vit_depth=1,
            vit_heads=2,
            vit_patch=4,
            epochs=1,
            batch_size=32,
            method="self-distillation",
            seed=0,
            image_size=16,
        )
        ids = [f"i{k}" for k in range(len(blob_images))]
        state = train_ssl(None, cfg, standard_policy(), images=blob_images, ids=ids)
        assert len(state.training_log) == 1
        assert state.training_log[0]["loss"] >= 0.0

    def test_checkpoint_resume_matches_straight_run(self, blob_images, tmp_path):
        ids = [f"i{k}" for k in range(len(blob_images))]
        full = train_ssl(None, TINY, standard_policy(), images=blob_images, ids=ids)

        one_epoch = EncoderConfig(**{**TINY.__dict__, "epochs": 1})
        train_ssl(None, one_epoch, standard_policy(), checkpoint_dir=tmp_path, images=blob_images, ids=ids)
        # re-request 2 epochs; epoch 0 is resumed from the checkpoint
        import dataclasses

        resumed = train_ssl(
            None,
            dataclasses.replace(one_epoch, epochs=2),
            standard_policy(),
            checkpoint_dir=tmp_path,
            images=blob_images,
            ids=ids,
        )
        assert [e["loss"] for e in resumed.training_log] == pytest.approx(
            [e["loss"] for e in full.training_log]
        )


class TestEmbed:
    def test_shape_normalization_and_determinism(self, blob_images):
        ids = [f"i{k}" for k in range(7)]
        state = train_ssl(None, TINY, standard_policy(), images=blob_images[:32], ids=[f"t{k}" for k in range(32)])
        m1 = embed(state, images=blob_images[:7], ids=ids)
        m2 = embed(state, images=blob_images[:7], ids=ids)
        assert m1.vectors.shape == (7, 16)
        norms = np.linalg.norm(m1.vectors.astype(np.float64), axis=1)
        assert np.abs(norms - 1.0).max() < 1e-6
        assert np.array_equal(m1.vectors, m2.vectors)

    def test_duplicate_images_identical_rows(self, blob_images):
        state = train_ssl(None, TINY, standard_policy(), images=blob_images[:32], ids=[f"t{k}" for k in range(32)])
        doubled = np.stack([blob_images[0], blob_images[0]])
        m = embed(state, images=doubled, ids=["a", "b"])
        assert np.array_equal(m.vectors[0], m.vectors[1])

    def test_missing_image_error(self, tmp_path):
        from fusc.data import DatasetManifest, ImageRecord
        from fusc.ssl import MissingImage, load_images

        manifest = DatasetManifest(
            records=[ImageRecord("x", "p", "nowhere.png")], root=tmp_path
        )
        with pytest.raises(MissingImage):
            load_images(manifest)


class TestEncoderStateIO:
    def test_bit_identical_reload(self, blob_images, tmp_path):
        state = train_ssl(
            None, TINY, standard_policy(), images=blob_images[:32], ids=[f"t{k}" for k in range(32)]
        )
        state.save(tmp_path / "enc.pt")
        back = EncoderState.load(tmp_path / "enc.pt")
        assert back.config == state.config
        assert back.training_log == state.training_log
        for part in ("backbone", "projector"):
            for k in state.weights[part]:
                assert torch.equal(back.weights[part][k], state.weights[part][k])

    def test_embeddings_round_trip(self, tmp_path, rng):
        vectors = rng.normal(size=(5, 4))
        vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
        m = EmbeddingMatrix(ids=[f"i{k}" for k in range(5)], vectors=vectors.astype(np.float32))
        m.save(tmp_path / "emb")
        back = EmbeddingMatrix.load(tmp_path / "emb")
        assert back.ids == m.ids
        assert np.array_equal(back.vectors, m.vectors)
        assert back.normalized
