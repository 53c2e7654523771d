import os

import numpy as np
import pytest
from PIL import Image

from spineage.deep_hash import deep_hash
from spineage.file_io import atomic_write, file_digest, read_file_chunks
from spineage.utils import config_digest, format_value, read_csv, save_graymap, seed_for, write_csv


def test_deep_hash_is_order_sensitive_for_lists():
    assert deep_hash([1, 2]) != deep_hash([2, 1])
    assert deep_hash([1, 2]) == deep_hash((1, 2))


def test_deep_hash_ignores_dict_insertion_order():
    assert deep_hash({"a": 1, "b": [0.5, "x"]}) == deep_hash({"b": [0.5, "x"], "a": 1})


def test_deep_hash_distinguishes_nesting():
    assert deep_hash([[1], 2]) != deep_hash([1, [2]])
    assert deep_hash("1") != deep_hash(["1"])


def test_deep_hash_arrays_include_dtype():
    assert deep_hash(np.zeros(3, dtype=np.float32)) != deep_hash(np.zeros(3, dtype=np.float64))


def test_deep_hash_rejects_unknown_types():
    with pytest.raises(TypeError):
        deep_hash(object())


def test_config_digest_is_base64url():
    digest = config_digest({"seed": 0})
    assert len(digest) == 64
    assert "+" not in digest and "/" not in digest and "=" not in digest


def test_seed_for_is_stable_and_label_dependent():
    assert seed_for(0, "subject", 1) == seed_for(0, "subject", 1)
    assert seed_for(0, "subject", 1) != seed_for(0, "subject", 2)
    assert 0 <= seed_for(3) < 2 ** 32


def test_format_value():
    assert format_value(1.0 / 3.0) == "0.333333"
    assert format_value(np.float32(2.5)) == "2.500000"
    assert format_value(True) == "1"
    assert format_value(7) == "7"


def test_read_file_chunks(tmp_path):
    path = tmp_path / "blob.bin"
    path.write_bytes(b"x" * 10)

    with open(path, 'rb') as file_handler:
        chunks = list(read_file_chunks(file_handler, chunk_size=4))

    assert [len(chunk) for chunk in chunks] == [4, 4, 2]
    assert len(file_digest(path)) == 32


def test_atomic_write_leaves_no_partial_file(tmp_path):
    path = tmp_path / "out.txt"
    with pytest.raises(RuntimeError):
        with atomic_write(str(path), 'w') as file_handler:
            file_handler.write("partial")
            raise RuntimeError("boom")

    assert not path.exists()
    assert os.listdir(tmp_path) == []


def test_csv_round_trip(tmp_path):
    path = str(tmp_path / "table.csv")
    write_csv(path, ["id", "value"], [["a", 0.5], ["b", 2]])

    assert read_csv(path) == [{"id": "a", "value": "0.500000"}, {"id": "b", "value": "2"}]


def test_save_graymap_writes_pgm(tmp_path):
    path = str(tmp_path / "map.pgm")
    save_graymap(path, np.linspace(0.0, 1.0, 12).reshape(3, 4))

    with open(path, 'rb') as file_handler:
        assert file_handler.read(2) == b"P5"
    image = Image.open(path)
    assert image.size == (4, 3)
    assert np.asarray(image)[2, 3] == 255


if __name__ == "__main__":
    test_deep_hash_is_order_sensitive_for_lists()
    test_deep_hash_ignores_dict_insertion_order()
    test_format_value()
