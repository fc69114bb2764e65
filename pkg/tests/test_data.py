import pytest
import torch

from privprune import ConfigurationError, IngestionError
from privprune.data import ArrayDataset, DatasetSpec, ingest_dataset, synthetic_images


def test_synthetic_shapes_and_range():
    images, labels = synthetic_images(64, 10, 32, seed=0)
    assert images.shape == (64, 3, 32, 32)
    assert labels.shape == (64,)
    assert float(images.min()) >= 0.0 and float(images.max()) <= 1.0
    assert images.dtype == torch.float32


def test_synthetic_determinism_and_seed_variation():
    a, la = synthetic_images(32, 10, 32, seed=1)
    b, lb = synthetic_images(32, 10, 32, seed=1)
    assert torch.equal(a, b) and torch.equal(la, lb)
    c, _ = synthetic_images(32, 10, 32, seed=2)
    assert not torch.equal(a, c)


def test_synthetic_label_balance():
    _, labels = synthetic_images(100, 10, 16, seed=3)
    counts = torch.bincount(labels, minlength=10)
    assert (counts == 10).all()


def test_ingest_split_sizes_and_disjointness():
    spec = DatasetSpec(train_size=96, eval_size=32, attacker_size=64)
    bundle = ingest_dataset(spec, seed=0)
    assert len(bundle.train) == 96
    assert len(bundle.eval) == 32
    assert len(bundle.attacker) == 64
    # disjoint images across splits (checked via exact matches)
    flat = lambda d: {tuple(x.flatten().tolist()[:8]) for x in d.images}
    assert not (flat(bundle.train) & flat(bundle.attacker))
    assert not (flat(bundle.train) & flat(bundle.eval))


def test_ingest_deterministic_by_seed():
    spec = DatasetSpec(train_size=32, eval_size=16, attacker_size=16)
    a = ingest_dataset(spec, seed=5)
    b = ingest_dataset(spec, seed=5)
    assert torch.equal(a.train.images, b.train.images)
    assert torch.equal(a.eval.labels, b.eval.labels)
    c = ingest_dataset(spec, seed=6)
    assert not torch.equal(a.train.images, c.train.images)


def test_dataset_spec_validation():
    with pytest.raises(ConfigurationError):
        DatasetSpec(name="mnist")
    with pytest.raises(ConfigurationError):
        DatasetSpec(name="imagefolder", root=None)


def test_batches_iteration():
    ds = ArrayDataset(torch.rand(10, 3, 8, 8), torch.arange(10))
    batches = list(ds.batches(4))
    assert [len(y) for _, y in batches] == [4, 4, 2]
    g = torch.Generator().manual_seed(0)
    shuffled = torch.cat([y for _, y in ds.batches(4, shuffle=True, generator=g)])
    assert not torch.equal(shuffled, torch.arange(10))
    assert torch.equal(shuffled.sort().values, torch.arange(10))


def _write_image_folder(root, identities=4, per_id=6, size=48):
    from PIL import Image
    import numpy as np

    rng = np.random.default_rng(0)
    for i in range(identities):
        d = root / f"id{i:03d}"
        d.mkdir(parents=True)
        for j in range(per_id):
            arr = rng.integers(0, 255, (size, size, 3), dtype=np.uint8)
            Image.fromarray(arr).save(d / f"img{j}.png")


def test_imagefolder_ingestion(tmp_path):
    _write_image_folder(tmp_path, identities=4, per_id=6)
    spec = DatasetSpec(name="imagefolder", root=str(tmp_path), resolution=32,
                       train_size=12, eval_size=6, attacker_size=6)
    bundle = ingest_dataset(spec, seed=0)
    assert bundle.num_classes == 4
    assert bundle.train.images.shape[1:] == (3, 32, 32)
    assert len(bundle.train) == 12


def test_imagefolder_twenty_identities(tmp_path):
    _write_image_folder(tmp_path, identities=20, per_id=2, size=16)
    spec = DatasetSpec(name="imagefolder", root=str(tmp_path), resolution=16,
                       train_size=20, eval_size=10, attacker_size=10)
    bundle = ingest_dataset(spec, seed=0)
    assert bundle.num_classes == 20


def test_imagefolder_resize_flows_through_model(tmp_path):
    # down-resolution ingestion feeds the model family without error
    _write_image_folder(tmp_path, identities=3, per_id=4, size=256)
    spec = DatasetSpec(name="imagefolder", root=str(tmp_path), resolution=128,
                       train_size=6, eval_size=3, attacker_size=3)
    bundle = ingest_dataset(spec, seed=0)
    assert bundle.train.images.shape[-1] == 128
    from privprune import ArchSpec, build_split_model
    arch = ArchSpec(name="desk2", num_blocks=2, base_channels=8, image_size=128,
                    num_classes=3)
    model = build_split_model(arch, split_index=2, seed=0).eval()
    with torch.no_grad():
        out = model.forward_full(bundle.train.images[:2])
    assert out.shape == (2, 3)


def test_imagefolder_errors(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(IngestionError):
        ingest_dataset(DatasetSpec(name="imagefolder", root=str(empty)), seed=0)

    corrupt = tmp_path / "corrupt"
    (corrupt / "id0").mkdir(parents=True)
    (corrupt / "id0" / "bad.png").write_bytes(b"this is not an image")
    with pytest.raises(IngestionError, match="bad.png"):
        ingest_dataset(DatasetSpec(name="imagefolder", root=str(corrupt)), seed=0)
