"""Annotations, synthetic tool sequences, dense optical flow and flow rendering.

On-disk dataset layout (one file per frame, ``<frame-id>`` = ``seqNNN_fMMM``)::

    root/frames/<frame-id>.png          8-bit RGB frame
    root/annotations/<frame-id>.xml     VOC annotation
    root/flow_gt/<frame-id>.npy         exact forward flow, float32 [H, W, 2]
    root/flow/<frame-id>.flow.png       rendered flow image fed to the network
    root/splits/{train,test}.txt        frame ids, split by sequence
"""
from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb
from PIL import Image
from scipy import ndimage


class AnnotationError(ValueError):
    """Malformed or inconsistent VOC annotation."""


@dataclass
class VOCObject:
    name: str
    box: tuple  # (xmin, ymin, xmax, ymax)
    pose: str = "Unspecified"
    truncated: int = 0
    difficult: int = 0


@dataclass
class Annotation:
    filename: str
    width: int
    height: int
    depth: int = 3
    folder: str = "synthetic"
    objects: list = field(default_factory=list)

    @property
    def image_id(self) -> str:
        return Path(self.filename).stem

    def boxes(self, name: str | None = None) -> np.ndarray:
        rows = [o.box for o in self.objects if name is None or o.name == name]
        return np.asarray(rows, dtype=np.float64).reshape(-1, 4)


def _text(parent: ET.Element, path: str) -> str:
    node = parent.find(path)
    if node is None or node.text is None:
        raise AnnotationError(f"missing element <{path}>")
    return node.text.strip()


def _num(text: str) -> float:
    try:
        return float(text)
    except ValueError as exc:
        raise AnnotationError(f"not a number: {text!r}") from exc


def parse_voc_xml(document: bytes | str) -> Annotation:
    try:
        root = ET.fromstring(document)
    except ET.ParseError as exc:
        raise AnnotationError(f"malformed XML: {exc}") from exc
    folder_node = root.find("folder")
    ann = Annotation(
        filename=_text(root, "filename"),
        width=int(_num(_text(root, "size/width"))),
        height=int(_num(_text(root, "size/height"))),
        depth=int(_num(_text(root, "size/depth"))),
        folder=(folder_node.text or "").strip() if folder_node is not None else "",
    )
    if ann.width <= 0 or ann.height <= 0:
        raise AnnotationError(f"non-positive image size {ann.width}x{ann.height}")
    for obj in root.findall("object"):
        box = tuple(_num(_text(obj, f"bndbox/{k}")) for k in ("xmin", "ymin", "xmax", "ymax"))
        x0, y0, x1, y1 = box
        if x0 >= x1 or y0 >= y1:
            raise AnnotationError(f"empty box {box}")
        if x0 < 0 or y0 < 0 or x1 > ann.width or y1 > ann.height:
            raise AnnotationError(f"box {box} outside {ann.width}x{ann.height} image")
        pose = obj.find("pose")
        ann.objects.append(VOCObject(
            name=_text(obj, "name"),
            box=box,
            pose=pose.text.strip() if pose is not None and pose.text else "Unspecified",
            truncated=int(_num(obj.findtext("truncated", "0"))),
            difficult=int(_num(obj.findtext("difficult", "0"))),
        ))
    return ann


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def write_voc_xml(ann: Annotation) -> bytes:
    root = ET.Element("annotation")
    ET.SubElement(root, "folder").text = ann.folder
    ET.SubElement(root, "filename").text = ann.filename
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(ann.width)
    ET.SubElement(size, "height").text = str(ann.height)
    ET.SubElement(size, "depth").text = str(ann.depth)
    ET.SubElement(root, "segmented").text = "0"
    for o in ann.objects:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = o.name
        ET.SubElement(obj, "pose").text = o.pose
        ET.SubElement(obj, "truncated").text = str(o.truncated)
        ET.SubElement(obj, "difficult").text = str(o.difficult)
        bb = ET.SubElement(obj, "bndbox")
        for key, v in zip(("xmin", "ymin", "xmax", "ymax"), o.box):
            ET.SubElement(bb, key).text = _fmt(v)
    ET.indent(root)
    return ET.tostring(root, encoding="utf-8", xml_declaration=True)


# ---------------------------------------------------------------------------
# synthetic sequences


@dataclass
class SyntheticSceneConfig:
    width: int = 256
    height: int = 256
    n_tools: int = 2
    speed_range: tuple = (2.0, 5.0)
    heading_range: tuple = (0.0, 360.0)  # degrees, 0 is +x, 90 is +y (down)
    n_distractors: int = 0
    texture_seed: int | None = None
    length: int = 5
    shaft_length: tuple = (50.0, 90.0)
    shaft_width: tuple = (10.0, 16.0)
    wrist_radius: tuple = (9.0, 13.0)
    min_visible_pixels: int = 150

    def __post_init__(self):
        if min(self.width, self.height, self.length) < 1:
            raise ValueError("frame size and sequence length must be positive")
        if self.n_tools < 0 or self.n_distractors < 0:
            raise ValueError("object counts must be non-negative")
        if not all(math.isfinite(s) for s in self.speed_range):
            raise ValueError("speeds must be finite")


@dataclass
class _Tool:
    tip: np.ndarray  # wrist centre at frame 0
    velocity: np.ndarray
    angle: float
    length: float
    width: float
    radius: float
    shade: float

    def mask(self, xs: np.ndarray, ys: np.ndarray, t: int) -> np.ndarray:
        cx, cy = self.tip + t * self.velocity
        dx, dy = xs - cx, ys - cy
        c, s = math.cos(self.angle), math.sin(self.angle)
        along = dx * c + dy * s
        across = -dx * s + dy * c
        shaft = (along >= 0) & (along <= self.length) & (np.abs(across) <= self.width / 2)
        return shaft | (dx * dx + dy * dy <= self.radius ** 2)


@dataclass
class SyntheticSequence:
    frames: list  # uint8 [H, W, 3]
    annotations: list
    flows: list  # float32 [H, W, 2]


def _background(cfg: SyntheticSceneConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = cfg.height, cfg.width
    coarse = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma=12)
    coarse = coarse / (np.abs(coarse).max() + 1e-9)
    fine = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma=1.5)
    fine = fine / (np.abs(fine).max() + 1e-9)
    base = np.array([185.0, 85.0, 80.0]) + rng.uniform(-15, 15, size=3)
    img = base[None, None, :] + 35 * coarse[..., None] * np.array([1.0, 0.6, 0.5]) + 12 * fine[..., None]
    return img


def _sample_tool(cfg: SyntheticSceneConfig, rng: np.random.Generator, moving: bool) -> _Tool:
    margin = 20.0
    for _ in range(1000):
        angle = math.radians(rng.uniform(25, 65) + 90 * rng.integers(0, 4))
        speed = rng.uniform(*cfg.speed_range) if moving else 0.0
        heading = math.radians(rng.uniform(*cfg.heading_range))
        vel = speed * np.array([math.cos(heading), math.sin(heading)])
        tip = rng.uniform([margin, margin], [cfg.width - margin, cfg.height - margin])
        end = tip + (cfg.length - 1) * vel
        if margin <= end[0] <= cfg.width - margin and margin <= end[1] <= cfg.height - margin:
            break
    return _Tool(
        tip=tip, velocity=vel, angle=angle,
        length=rng.uniform(*cfg.shaft_length),
        width=rng.uniform(*cfg.shaft_width),
        radius=rng.uniform(*cfg.wrist_radius),
        shade=rng.uniform(150, 200),
    )


def _paint(img: np.ndarray, mask: np.ndarray, tool: _Tool, xs, ys, t: int) -> None:
    cx, cy = tool.tip + t * tool.velocity
    across = -(xs - cx) * math.sin(tool.angle) + (ys - cy) * math.cos(tool.angle)
    highlight = 1.0 - 0.35 * np.clip(np.abs(across) / (tool.radius + 1e-9), 0, 1)
    grey = tool.shade * highlight
    color = np.stack([grey * 0.95, grey, grey * 1.05], axis=-1)
    img[mask] = color[mask]


def generate_synthetic_sequence(cfg: SyntheticSceneConfig, seed: int, name: str = "seq000") -> SyntheticSequence:
    """Render tool-like objects translating over a textured background.

    Moving tools are annotated and carry exact flow equal to their velocity on
    the pixels where they are top-most. Distractors have the same look but stay
    still and are never annotated.
    """
    rng = np.random.default_rng(seed)
    tex_rng = np.random.default_rng(cfg.texture_seed) if cfg.texture_seed is not None else rng
    bg = _background(cfg, tex_rng)
    ys, xs = np.mgrid[0:cfg.height, 0:cfg.width] + 0.5
    distractors = [_sample_tool(cfg, rng, moving=False) for _ in range(cfg.n_distractors)]
    tools = [_sample_tool(cfg, rng, moving=True) for _ in range(cfg.n_tools)]
    noise_rng = np.random.default_rng(rng.integers(2**32))

    seq = SyntheticSequence([], [], [])
    for t in range(cfg.length):
        img = bg.copy()
        for d in distractors:
            _paint(img, d.mask(xs, ys, t), d, xs, ys, t)
        owner = np.full((cfg.height, cfg.width), -1)
        for i, tool in enumerate(tools):
            m = tool.mask(xs, ys, t)
            _paint(img, m, tool, xs, ys, t)
            owner[m] = i
        img += noise_rng.normal(0, 3.0, size=img.shape)
        frame = np.clip(np.round(img), 0, 255).astype(np.uint8)

        flow = np.zeros((cfg.height, cfg.width, 2), dtype=np.float32)
        fid = f"{name}_f{t:03d}"
        ann = Annotation(filename=f"{fid}.png", width=cfg.width, height=cfg.height)
        for i, tool in enumerate(tools):
            visible = owner == i
            flow[visible] = tool.velocity
            if visible.sum() < cfg.min_visible_pixels:
                continue
            rows = np.flatnonzero(visible.any(axis=1))
            cols = np.flatnonzero(visible.any(axis=0))
            box = (float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))
            ann.objects.append(VOCObject("tool", box, truncated=int(_touches_edge(box, cfg))))
        seq.frames.append(frame)
        seq.annotations.append(ann)
        seq.flows.append(flow)
    return seq


def _touches_edge(box, cfg) -> bool:
    return box[0] <= 0 or box[1] <= 0 or box[2] >= cfg.width or box[3] >= cfg.height


# ---------------------------------------------------------------------------
# flow


def to_gray(frame: np.ndarray) -> np.ndarray:
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim == 3:
        f = f[..., :3] @ np.array([0.299, 0.587, 0.114])
    return f / 255.0 if np.asarray(frame).dtype == np.uint8 else f


_HS_AVG = np.array([[1 / 12, 1 / 6, 1 / 12], [1 / 6, 0.0, 1 / 6], [1 / 12, 1 / 6, 1 / 12]])


def estimate_flow(frame0: np.ndarray, frame1: np.ndarray, alpha: float = 0.05, iterations: int = 200,
                  presmooth: float = 1.0) -> np.ndarray:
    """Horn-Schunck variational flow from ``frame0`` to ``frame1`` as [H, W, 2] (u, v)."""
    a = to_gray(frame0)
    b = to_gray(frame1)
    if a.shape != b.shape:
        raise ValueError(f"frame sizes differ: {a.shape} vs {b.shape}")
    if presmooth > 0:
        a = ndimage.gaussian_filter(a, presmooth)
        b = ndimage.gaussian_filter(b, presmooth)
    mean = 0.5 * (a + b)
    iy, ix = np.gradient(mean)
    it = b - a
    u = np.zeros_like(a)
    v = np.zeros_like(a)
    denom = alpha ** 2 + ix ** 2 + iy ** 2
    for _ in range(iterations):
        u_avg = ndimage.convolve(u, _HS_AVG, mode="nearest")
        v_avg = ndimage.convolve(v, _HS_AVG, mode="nearest")
        common = (ix * u_avg + iy * v_avg + it) / denom
        u = u_avg - ix * common
        v = v_avg - iy * common
    return np.stack([u, v], axis=-1).astype(np.float32)


def flow_to_rgb(flow: np.ndarray, percentile: float = 99.0) -> np.ndarray:
    """Colour-wheel rendering of a flow field as uint8 RGB.

    Hue is the flow direction (angle 0, pointing +x, is red), saturation the
    magnitude divided by its 99th percentile (falling back to the maximum when
    that percentile is zero) and clipped to 1, value is always full. Zero
    flow renders white.
    """
    flow = np.asarray(flow, dtype=np.float64)
    if not np.all(np.isfinite(flow)):
        raise ValueError("flow contains non-finite values")
    u, v = flow[..., 0], flow[..., 1]
    mag = np.hypot(u, v)
    scale = np.percentile(mag, percentile)
    if scale <= 1e-9:
        scale = mag.max()
    hue = (np.arctan2(v, u) / (2 * np.pi)) % 1.0
    sat = np.clip(mag / scale, 0, 1) if scale > 1e-9 else np.zeros_like(mag)
    rgb = hsv_to_rgb(np.stack([hue, sat, np.ones_like(mag)], axis=-1))
    return np.round(rgb * 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Sample:
    frame_id: str
    sequence: str
    image: np.ndarray
    flow_image: np.ndarray | None
    annotation: Annotation


def generate_sequences(n_sequences: int, cfg: SyntheticSceneConfig, seed: int) -> list[SyntheticSequence]:
    """Render ``n_sequences`` independent sequences named ``seq000``, ``seq001``, ..."""
    seeds = np.random.default_rng(seed).integers(0, 2**31, size=n_sequences)
    return [generate_synthetic_sequence(cfg, int(sd), f"seq{i:03d}") for i, sd in enumerate(seeds)]


def held_out_sequences(n_sequences: int, n_test: int, seed: int) -> set[int]:
    """Indices of the sequences held out for testing."""
    rng = np.random.default_rng([seed, 1])
    return set(rng.permutation(n_sequences)[:n_test].tolist())


def sequence_folds(n_sequences: int, k: int, seed: int) -> list[set[int]]:
    """Partition sequence indices into ``k`` random folds of near-equal size."""
    if not 2 <= k <= n_sequences:
        raise ValueError(f"need 2 <= k <= {n_sequences}, got k={k}")
    perm = np.random.default_rng([seed, 2]).permutation(n_sequences)
    return [set(fold.tolist()) for fold in np.array_split(perm, k)]


def sequence_samples(seq: SyntheticSequence, flow_source: str = "gt", alpha: float = 0.05,
                     iterations: int = 200) -> list[Sample]:
    """Samples of one sequence with their flow rendered to RGB.

    ``flow_source="gt"`` renders the exact flow; ``"estimated"`` runs
    Horn-Schunck from each frame to the next (the last frame reuses the flow
    into it).
    """
    if flow_source == "gt":
        flows = seq.flows
    elif flow_source == "estimated":
        flows = [estimate_flow(a, b, alpha, iterations) for a, b in zip(seq.frames, seq.frames[1:])]
        flows.append(flows[-1] if flows else np.zeros(seq.frames[0].shape[:2] + (2,), np.float32))
    else:
        raise ValueError(f"unknown flow source {flow_source!r}")
    out = []
    for frame, ann, flow in zip(seq.frames, seq.annotations, flows):
        fid = ann.image_id
        out.append(Sample(fid, fid.rsplit("_", 1)[0], frame, flow_to_rgb(flow), ann))
    return out


def generate_dataset(n_sequences: int, cfg: SyntheticSceneConfig, seed: int, n_test: int,
                     flow_source: str = "gt") -> dict:
    """Render ``n_sequences`` sequences and split them, whole, into train/test."""
    test_ids = held_out_sequences(n_sequences, n_test, seed)
    out = {"train": [], "test": []}
    for i, seq in enumerate(generate_sequences(n_sequences, cfg, seed)):
        out["test" if i in test_ids else "train"].extend(sequence_samples(seq, flow_source))
    return out


def save_image(path: Path, img: np.ndarray) -> None:
    Image.fromarray(img).save(path)


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_dataset(root: Path, n_sequences: int, cfg: SyntheticSceneConfig, seed: int, n_test: int) -> dict:
    """Generate a dataset to disk; returns the number of frames per split."""
    root = Path(root)
    for sub in ("frames", "annotations", "flow_gt", "splits"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    splits: dict[str, list[str]] = {"train": [], "test": []}
    test_ids = held_out_sequences(n_sequences, n_test, seed)
    for i, seq in enumerate(generate_sequences(n_sequences, cfg, seed)):
        split = "test" if i in test_ids else "train"
        for frame, ann, flow in zip(seq.frames, seq.annotations, seq.flows):
            fid = ann.image_id
            save_image(root / "frames" / f"{fid}.png", frame)
            (root / "annotations" / f"{fid}.xml").write_bytes(write_voc_xml(ann))
            np.save(root / "flow_gt" / f"{fid}.npy", flow)
            splits[split].append(fid)
    for split, ids in splits.items():
        (root / "splits" / f"{split}.txt").write_text("".join(f"{i}\n" for i in ids))
    return {k: len(v) for k, v in splits.items()}


def render_flow_cache(root: Path, source: str = "gt", alpha: float = 0.05, iterations: int = 200) -> int:
    """Write ``flow/<frame-id>.flow.png`` for every frame; returns the count.

    ``source="gt"`` renders the stored exact flow; ``"estimated"`` runs
    Horn-Schunck between each frame and its successor in the same sequence
    (the last frame of a sequence reuses the flow into it).
    """
    root = Path(root)
    (root / "flow").mkdir(exist_ok=True)
    ids = sorted(p.stem for p in (root / "frames").glob("*.png"))
    count = 0
    prev_flow = None
    for i, fid in enumerate(ids):
        if source == "gt":
            flow = np.load(root / "flow_gt" / f"{fid}.npy")
        elif source == "estimated":
            seq = fid.rsplit("_", 1)[0]
            if i + 1 < len(ids) and ids[i + 1].rsplit("_", 1)[0] == seq:
                flow = estimate_flow(load_image(root / "frames" / f"{fid}.png"),
                                     load_image(root / "frames" / f"{ids[i + 1]}.png"), alpha, iterations)
            elif i > 0 and ids[i - 1].rsplit("_", 1)[0] == seq:
                flow = prev_flow
            else:
                flow = np.zeros(load_image(root / "frames" / f"{fid}.png").shape[:2] + (2,), np.float32)
            prev_flow = flow
        else:
            raise ValueError(f"unknown flow source {source!r}")
        save_image(root / "flow" / f"{fid}.flow.png", flow_to_rgb(flow))
        count += 1
    return count


def load_split(root: Path, split: str, with_flow: bool = True) -> list[Sample]:
    root = Path(root)
    listing = root / "splits" / f"{split}.txt"
    if not listing.exists():
        raise FileNotFoundError(f"split listing {listing} not found")
    samples = []
    for fid in listing.read_text().split():
        ann = parse_voc_xml((root / "annotations" / f"{fid}.xml").read_bytes())
        flow_path = root / "flow" / f"{fid}.flow.png"
        if with_flow and not flow_path.exists():
            raise FileNotFoundError(f"flow image {flow_path} not found; run the flow command first")
        samples.append(Sample(
            fid, fid.rsplit("_", 1)[0], load_image(root / "frames" / f"{fid}.png"),
            load_image(flow_path) if with_flow else None, ann,
        ))
    return samples
