import numpy as np
import pytest
import torch

from selective_utility.data import (
    DatasetHandle,
    TOY_MEAN,
    TOY_STD,
    batches,
    export_images,
    image_folder,
    load_dataset,
    preprocess,
    toy_shapes,
)
from selective_utility.errors import ContractError, DataError


def tiny_handle(n=100, num_classes=5, resolution=8):
    gen = torch.Generator().manual_seed(1)
    images = torch.randint(0, 256, (n, 3, resolution, resolution), dtype=torch.uint8, generator=gen)
    labels = torch.arange(n) % num_classes
    return DatasetHandle("tiny", "train", num_classes, images, labels, resolution, (0.5,) * 3, (0.25,) * 3)


def test_toy_shapes_shape_and_classes():
    h = toy_shapes("test", resolution=16, size=200)
    assert h.num_classes == 10
    assert h.size == 200
    x, y = h.batch(range(4))
    assert x.shape == (4, 3, 16, 16)
    assert int(y.max()) < 10


def test_toy_shapes_default_split_sizes():
    assert load_dataset("toy-shapes", "test", 32).size == 2000


def test_toy_shapes_is_fixed_per_split():
    a = toy_shapes("train", 16, size=50)
    b = toy_shapes("train", 16, size=50)
    assert torch.equal(a.images, b.images)
    assert not torch.equal(a.images, toy_shapes("test", 16, size=50).images)


def test_resize_to_requested_resolution():
    h = tiny_handle(resolution=8)
    big = DatasetHandle("tiny", "train", 5, h.images, h.labels, 224, IMAGENET := (0.485, 0.456, 0.406),
                        (0.229, 0.224, 0.225))
    assert big[0].image.shape == (3, 224, 224)
    assert IMAGENET == big.mean


def test_normalization_uses_handle_stats():
    raw = torch.full((1, 3, 4, 4), 255, dtype=torch.uint8)
    out = preprocess(raw, 4, (0.5, 0.5, 0.5), (0.25, 0.25, 0.25))
    assert torch.allclose(out, torch.full_like(out, 2.0))


def test_preprocess_rejects_already_processed():
    h = tiny_handle()
    x, _ = h.batch([0, 1])
    with pytest.raises(ContractError):
        h.preprocess(x)


def test_to_pixels_inverts_standardization():
    h = toy_shapes("test", 16, size=8)
    x, _ = h.batch(range(8))
    assert torch.allclose(h.to_pixels(x), h.images.float() / 255, atol=1e-6)


def test_batch_sizes_keep_partial_final_batch():
    sizes = [len(y) for _, y in batches(tiny_handle(100), 64, seed=0, epoch=1)]
    assert sizes == [64, 36]


def test_same_seed_epoch_same_order():
    a = [y for _, y in batches(tiny_handle(), 16, seed=3, epoch=2)]
    b = [y for _, y in batches(tiny_handle(), 16, seed=3, epoch=2)]
    assert all(torch.equal(u, v) for u, v in zip(a, b))


def test_epochs_permute_differently():
    h = tiny_handle()
    # recover the permutation through the images themselves
    def order(epoch):
        xs = torch.cat([x for x, _ in batches(h, 100, seed=3, epoch=epoch)])
        flat = h.preprocess(h.images).flatten(1)
        return [int((flat == row).all(1).nonzero()[0]) for row in xs.flatten(1)]

    e1, e2 = order(1), order(2)
    assert sorted(e1) == list(range(100)) == sorted(e2)
    assert e1 != e2


@pytest.mark.parametrize("batch_size", [1, 7, 64, 100, 150])
def test_epoch_covers_each_label_once(batch_size):
    h = tiny_handle(100)
    labels = torch.cat([y for _, y in batches(h, batch_size, seed=0, epoch=5)])
    assert sorted(labels.tolist()) == sorted(h.labels.tolist())


def test_handle_invariants():
    with pytest.raises(DataError):
        DatasetHandle("x", "train", 1, torch.zeros(1, 3, 2, 2, dtype=torch.uint8), torch.zeros(1, dtype=torch.long),
                      2, (0,) * 3, (1,) * 3)
    with pytest.raises(DataError):
        DatasetHandle("x", "train", 3, torch.zeros(1, 3, 2, 2, dtype=torch.uint8), torch.tensor([5]),
                      2, (0,) * 3, (1,) * 3)


def test_missing_cifar_gives_fetch_instructions(tmp_path):
    with pytest.raises(DataError, match="fetch-data"):
        load_dataset("cifar100", "train", 224, root=tmp_path)


def test_unknown_dataset():
    with pytest.raises(DataError):
        load_dataset("mnist-ish", "train", 32)


def test_image_folder_roundtrip_and_corrupt_records(tmp_path):
    h = toy_shapes("test", 16, size=6)
    folder = export_images(h, tmp_path / "imgs")
    (folder / "test_00002.png").write_bytes(b"not a png")
    loaded = image_folder(folder, 16, 10, TOY_MEAN, TOY_STD, skip_corrupt=True)
    assert loaded.size == 5
    keep = [0, 1, 3, 4, 5]
    assert torch.equal(loaded.images, h.images[keep])
    assert loaded.labels.tolist() == h.labels[keep].tolist()
    with pytest.raises(DataError, match="corrupt"):
        image_folder(folder, 16, 10, TOY_MEAN, TOY_STD, skip_corrupt=False)


def test_toy_class_balance():
    counts = np.bincount(toy_shapes("test", 16).labels.numpy(), minlength=10)
    assert counts.min() > 150
