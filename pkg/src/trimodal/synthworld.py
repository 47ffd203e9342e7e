"""A tiny deterministic world of shapes with aligned image, speech and caption views."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeding import derive_seed

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue")
RGB = {"red": (255, 0, 0), "green": (0, 255, 0), "blue": (0, 0, 255)}
GRID = 4
CELL = 8
IMAGE_SIZE = GRID * CELL
SPEECH_DIM = 13
CHARSET = " abcdefghijklmnopqrstuvwxyz"
_PROTOTYPE_SEED = 20240101


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: tuple[int, int]


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    seed: int

    def __post_init__(self):
        if not 1 <= len(self.objects) <= 3:
            raise ValueError("a scene holds 1 to 3 objects")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("two objects share a cell")


def sample_scene(rng_seed: int) -> Scene:
    rng = np.random.default_rng(rng_seed)
    n = int(rng.integers(1, 4))
    cells = rng.choice(GRID * GRID, size=n, replace=False)
    objs = []
    for cell in sorted(int(c) for c in cells):
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        color = COLORS[int(rng.integers(len(COLORS)))]
        objs.append(SceneObject(shape, color, divmod(cell, GRID)))
    return Scene(tuple(objs), int(rng_seed))


def _glyph(shape: str) -> np.ndarray:
    yy, xx = np.mgrid[0:CELL, 0:CELL]
    if shape == "circle":
        return (yy - 3.5) ** 2 + (xx - 3.5) ** 2 <= 3.2 ** 2
    if shape == "square":
        return (yy >= 1) & (yy <= 6) & (xx >= 1) & (xx <= 6)
    if shape == "triangle":
        # apex on top, base on row 6
        return (yy >= 1) & (yy <= 6) & (np.abs(xx - 3.5) <= (yy - 0.5) * 0.6)
    raise ValueError(f"unknown shape {shape!r}")


GLYPHS = {s: _glyph(s) for s in SHAPES}


def render_image(scene: Scene) -> np.ndarray:
    img = np.full((IMAGE_SIZE, IMAGE_SIZE, 3), 255, dtype=np.uint8)
    for obj in scene.objects:
        r, c = obj.cell
        block = img[r * CELL:(r + 1) * CELL, c * CELL:(c + 1) * CELL]
        block[GLYPHS[obj.shape]] = RGB[obj.color]
    return img


def caption_scene(scene: Scene) -> str:
    objs = sorted(scene.objects, key=lambda o: o.cell)
    return " and ".join(f"a {o.color} {o.shape}" for o in objs)


def char_prototypes(dim: int = SPEECH_DIM) -> dict[str, np.ndarray]:
    """Fixed unit-norm feature vector per character (identical across runs)."""
    rng = np.random.default_rng(_PROTOTYPE_SEED)
    vecs = rng.normal(size=(len(CHARSET), dim))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    return {ch: vecs[i].astype(np.float32) for i, ch in enumerate(CHARSET)}


_PROTOS = char_prototypes()


def synthesize_speech_features(text: str, noise_sigma: float = 0.0, seed: int = 0,
                               durations=None) -> np.ndarray:
    """Frames x 13 float32 features: each character's prototype held for 2-4 frames."""
    bad = set(text) - set(CHARSET)
    if bad:
        raise ValueError(f"characters outside the speech inventory: {sorted(bad)}")
    rng = np.random.default_rng(seed)
    if durations is None:
        durations = rng.integers(2, 5, size=len(text))
    elif len(durations) != len(text):
        raise ValueError("need one duration per character")
    frames = [np.repeat(_PROTOS[ch][None, :], int(d), axis=0) for ch, d in zip(text, durations)]
    feats = np.concatenate(frames, axis=0) if frames else np.zeros((0, SPEECH_DIM), np.float32)
    if noise_sigma > 0:
        feats = feats + rng.normal(0.0, noise_sigma, size=feats.shape)
    return feats.astype(np.float32)


def speech_frames_to_text(frames: np.ndarray) -> str:
    """Map each frame to its nearest character prototype (zero-noise inverse)."""
    if len(frames) == 0:
        return ""
    protos = np.stack([_PROTOS[c] for c in CHARSET]).astype(np.float64)
    f = np.asarray(frames, dtype=np.float64)
    d = ((f[:, None, :] - protos[None]) ** 2).sum(-1)
    return "".join(CHARSET[i] for i in d.argmin(axis=1))


@dataclass
class TriModalExample:
    id: str
    image: np.ndarray
    speech_features: np.ndarray
    text: str
    scene_seed: int | None = None


def make_example(ex_id: str, scene_seed: int, noise_sigma: float = 0.0) -> TriModalExample:
    scene = sample_scene(scene_seed)
    text = caption_scene(scene)
    feats = synthesize_speech_features(text, noise_sigma, derive_seed(scene_seed, "speech"))
    return TriModalExample(ex_id, render_image(scene), feats, text, scene_seed)


# ---------------------------------------------------------------- file formats

def write_ppm(path: str | Path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end].decode("ascii"))
        pos = end
    if fields[0] != "P6" or fields[3] != "255":
        raise ValueError(f"{path}: only binary P6 with maxval 255 is supported")
    w, h = int(fields[1]), int(fields[2])
    pix = np.frombuffer(data[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    return pix.reshape(h, w, 3).copy()


def write_features(path: str | Path, feats: np.ndarray) -> None:
    f = np.asarray(feats, dtype="<f4")
    frames, dim = f.shape
    Path(path).write_bytes(f"TMTFEAT {dim} {frames}\n".encode("ascii") + f.tobytes())


def read_features(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    nl = data.index(b"\n")
    head = data[:nl].decode("ascii").split()
    if len(head) != 3 or head[0] != "TMTFEAT":
        raise ValueError(f"{path}: not a TMTFEAT file")
    dim, frames = int(head[1]), int(head[2])
    body = data[nl + 1:]
    if len(body) != 4 * dim * frames:
        raise ValueError(f"{path}: expected {frames}x{dim} floats")
    return np.frombuffer(body, dtype="<f4").reshape(frames, dim).astype(np.float32)


SPLITS = ("train", "valid", "test")


def split_sizes(n: int) -> tuple[int, int, int]:
    held = max(1, round(n * 0.05))
    return n - 2 * held, held, held


def generate_corpus(out_dir: str | Path, n: int, split_seed: int = 0,
                    noise_sigma: float = 0.0) -> dict[str, list[str]]:
    """Write ``n`` examples plus train/valid/test manifests; returns the id split."""
    if n < 3:
        raise ValueError("corpus needs n >= 3 to populate all three splits")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "speech").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"{out}: {exc.strerror or exc}") from exc
    ids = [f"ex{i:05d}" for i in range(n)]
    order = np.random.default_rng(derive_seed(split_seed, "split")).permutation(n)
    n_train, n_valid, _ = split_sizes(n)
    parts = {
        "train": sorted(order[:n_train]),
        "valid": sorted(order[n_train:n_train + n_valid]),
        "test": sorted(order[n_train + n_valid:]),
    }
    seeds_lines = []
    for i, ex_id in enumerate(ids):
        scene_seed = derive_seed(split_seed, f"scene:{i}")
        ex = make_example(ex_id, scene_seed, noise_sigma)
        _write(out / "images" / f"{ex_id}.ppm", write_ppm, ex.image)
        _write(out / "speech" / f"{ex_id}.feat", write_features, ex.speech_features)
        seeds_lines.append(f"{ex_id}\t{scene_seed}\n")
    _write(out / "scenes.tsv", lambda p, s: Path(p).write_text(s, encoding="ascii"), "".join(seeds_lines))
    result = {}
    for split, idx in parts.items():
        lines = []
        for i in idx:
            ex_id = ids[i]
            text = caption_scene(sample_scene(derive_seed(split_seed, f"scene:{i}")))
            lines.append(f"{ex_id}\timages/{ex_id}.ppm\tspeech/{ex_id}.feat\t{text}\n")
        _write(out / f"{split}.tsv", lambda p, s: Path(p).write_text(s, encoding="ascii"), "".join(lines))
        result[split] = [ids[i] for i in idx]
    (out / "corpus.cfg").write_text(f"n={n}\nsplit_seed={split_seed}\nnoise_sigma={noise_sigma!r}\n")
    return result


def _write(path: Path, fn, payload) -> None:
    try:
        fn(path, payload)
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def load_split(corpus_dir: str | Path, split: str) -> list[TriModalExample]:
    root = Path(corpus_dir)
    seeds = {}
    if (root / "scenes.tsv").exists():
        for line in (root / "scenes.tsv").read_text().splitlines():
            ex_id, s = line.split("\t")
            seeds[ex_id] = int(s)
    out = []
    for line in (root / f"{split}.tsv").read_text(encoding="ascii").splitlines():
        ex_id, img, feat, text = line.split("\t")
        out.append(TriModalExample(ex_id, read_ppm(root / img), read_features(root / feat), text,
                                   seeds.get(ex_id)))
    return out
