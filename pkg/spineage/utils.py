import csv
import hashlib

import numpy as np
from jose.utils import base64url_encode
from PIL import Image, ImageDraw

from .deep_hash import deep_hash
from .file_io import atomic_write, file_digest

FLOAT_FORMAT = "{:.6f}"

# cluster colours for scatter images; noise is drawn grey
PALETTE = [
    (230, 25, 75), (60, 180, 75), (0, 130, 200), (245, 130, 48), (145, 30, 180),
    (70, 240, 240), (240, 50, 230), (210, 245, 60), (0, 128, 128), (170, 110, 40),
]
NOISE_COLOUR = (160, 160, 160)


def encode_digest(digest: bytes) -> str:
    return base64url_encode(digest).decode()


def config_digest(data) -> str:
    return encode_digest(deep_hash(data))


def path_digest(path) -> str:
    return encode_digest(file_digest(path))


def seed_for(*parts) -> int:
    # stable 32-bit seed derived from a master seed and any labels
    digest = hashlib.sha256("/".join(str(part) for part in parts).encode()).digest()
    return int.from_bytes(digest[:4], 'little')


def format_value(value):
    if isinstance(value, (float, np.floating)):
        return FLOAT_FORMAT.format(float(value))
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    return str(value)


def write_csv(path, header, rows):
    with atomic_write(path, 'w') as file_handler:
        writer = csv.writer(file_handler, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(value) for value in row])


def read_csv(path):
    with open(path, 'r', newline='') as file_handler:
        return list(csv.DictReader(file_handler))


def save_graymap(path, image):
    """Save a 2D array with values in [0, 1] as a binary PGM."""
    pixels = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)

    with atomic_write(path) as file_handler:
        Image.fromarray(pixels).save(file_handler, format='PPM')


def save_scatter(path, coordinates, labels, size=256, radius=2):
    """Render 2D points coloured by integer label as a binary PPM."""
    coordinates = np.asarray(coordinates, dtype=np.float64)
    image = Image.new('RGB', (size, size), (255, 255, 255))
    draw = ImageDraw.Draw(image)

    if len(coordinates):
        low = coordinates.min(axis=0)
        span = np.maximum(coordinates.max(axis=0) - low, 1e-12)
        pixels = (coordinates - low) / span * (size - 2 * radius - 1) + radius

        for (x, y), label in zip(pixels, labels):
            colour = NOISE_COLOUR if label < 0 else PALETTE[int(label) % len(PALETTE)]
            draw.ellipse([x - radius, y - radius, x + radius, y + radius], fill=colour)

    with atomic_write(path) as file_handler:
        image.save(file_handler, format='PPM')
