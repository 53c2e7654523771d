import hashlib
import struct

import numpy as np


def to_blob(data):
    if isinstance(data, bytes):
        return data
    if isinstance(data, str):
        return data.encode('utf-8')
    if isinstance(data, bool):
        return b"1" if data else b"0"
    if isinstance(data, int):
        return str(data).encode()
    if isinstance(data, float):
        return struct.pack('<d', data)
    if isinstance(data, np.ndarray):
        return str(data.dtype).encode() + str(data.shape).encode() + np.ascontiguousarray(data).tobytes()
    if data is None:
        return b""

    raise TypeError("Unable to hash value of type {}".format(type(data).__name__))


def deep_hash(data):
    """Tagged SHA-384 over nested lists, tuples and dicts of scalars, strings and arrays."""
    if isinstance(data, dict):
        data = [[str(key), data[key]] for key in sorted(data, key=str)]

    if isinstance(data, (list, tuple)):
        tag = b"list" + str(len(data)).encode()

        return deep_hash_chunks(data, hashlib.sha384(tag).digest())

    blob = to_blob(data)
    tag = b"blob" + str(len(blob)).encode()

    tagged_hash = hashlib.sha384(tag).digest() + hashlib.sha384(blob).digest()

    return hashlib.sha384(tagged_hash).digest()


def deep_hash_chunks(chunks, acc):
    # iterative so long subject lists don't hit the recursion limit
    for chunk in chunks:
        acc = hashlib.sha384(acc + deep_hash(chunk)).digest()

    return acc
