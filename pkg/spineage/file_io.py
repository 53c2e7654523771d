import hashlib
import os
import tempfile
from contextlib import contextmanager

READ_CHUNK_SIZE = 256 * 1024


def read_file_chunks(file_handler, chunk_size=READ_CHUNK_SIZE):
    """A generator function to read files one chunk at a time"""
    while True:
        data = file_handler.read(chunk_size)

        if not data:
            break

        yield data


def file_digest(path):
    digest = hashlib.sha256()

    with open(path, 'rb', buffering=0) as file_handler:
        for chunk in read_file_chunks(file_handler):
            digest.update(chunk)

    return digest.digest()


@contextmanager
def atomic_write(path, mode='wb'):
    """Write to a temp file in the target directory, then rename over ``path``."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, temp_path = tempfile.mkstemp(dir=directory, prefix='.tmp-', suffix=os.path.basename(path))

    try:
        newline = None if 'b' in mode else ''
        with os.fdopen(fd, mode, newline=newline) as file_handler:
            yield file_handler
        os.replace(temp_path, path)
    except BaseException:
        if os.path.exists(temp_path):
            os.unlink(temp_path)
        raise
