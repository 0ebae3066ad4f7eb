import json
import struct

import pytest
import torch

from ganinvert import checkpoint
from ganinvert.errors import PersistenceError
from ganinvert.generator import save_weights
from ganinvert.losses import ConvFeatureExtractor, load_extractor, save_extractor


def test_container_layout(tmp_path):
    path = tmp_path / "c.bin"
    tensors = {"w": torch.arange(6, dtype=torch.float32).view(2, 3), "b": torch.tensor([1.5])}
    checkpoint.write_container(path, b"GCKPT1", {"layer_spec": "a\nb"}, tensors)
    raw = path.read_bytes()
    magic, version, head_len = struct.unpack_from("<6sII", raw)
    assert magic == b"GCKPT1" and version == 1
    header = json.loads(raw[14 : 14 + head_len])
    assert header["tensors"] == [["w", [2, 3]], ["b", [1]]]
    assert header["layer_spec"] == "a\nb"
    body = raw[14 + head_len :]
    assert struct.unpack("<7f", body) == (0, 1, 2, 3, 4, 5, 1.5)
    _, back = checkpoint.read_container(path, b"GCKPT1")
    assert torch.equal(back["w"], tensors["w"]) and torch.equal(back["b"], tensors["b"])


def test_header_is_canonical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    checkpoint.write_container(a, b"GCKPT1", {"y": 1, "x": 2}, {})
    checkpoint.write_container(b, b"GCKPT1", {"x": 2, "y": 1}, {})
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize("corrupt", [
    lambda raw: raw[:10],
    lambda raw: raw[:-1],
    lambda raw: raw + b"\x00",
    lambda raw: b"XCKPT1" + raw[6:],
    lambda raw: raw[:6] + struct.pack("<I", 99) + raw[10:],
    lambda raw: raw[:14] + b"]" + raw[15:],
])
def test_corruption_is_persistence_error(tmp_path, tiny_gen, corrupt):
    path = tmp_path / "g.gckpt"
    save_weights(tiny_gen, path)
    path.write_bytes(corrupt(path.read_bytes()))
    with pytest.raises(PersistenceError):
        checkpoint.read_container(path, checkpoint.GENERATOR_MAGIC)


def test_wrong_kind_of_checkpoint(tmp_path, tiny_gen):
    path = tmp_path / "g.gckpt"
    save_weights(tiny_gen, path)
    with pytest.raises(PersistenceError):
        load_extractor(path)


def test_missing_file(tmp_path):
    with pytest.raises(PersistenceError):
        checkpoint.read_container(tmp_path / "nope", b"GCKPT1")


def test_failed_write_leaves_no_file(tmp_path):
    path = tmp_path / "x.gckpt"

    class Boom:
        shape = (1,)

        def detach(self):
            raise RuntimeError("boom")

    with pytest.raises(RuntimeError):
        checkpoint.write_container(path, b"GCKPT1", {}, {"t": Boom()})
    assert list(tmp_path.iterdir()) == []


def test_extractor_round_trip(tmp_path, tiny_extractor):
    path = tmp_path / "f.fckpt"
    save_extractor(tiny_extractor, path)
    loaded = load_extractor(path)
    x = torch.rand(2, 3, 16, 16) * 2 - 1
    taps_a, emb_a = tiny_extractor.features(x)
    taps_b, emb_b = loaded.features(x)
    assert torch.equal(emb_a, emb_b)
    assert all(torch.equal(a, b) for a, b in zip(taps_a, taps_b))
    assert all(not p.requires_grad for p in loaded.parameters())
