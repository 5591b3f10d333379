"""Procedural labeled "person" images with controllable domain shift.

Each identity is an attribute tuple (head/torso/leg palette colors and
an optional side bag); images render those attributes as vertical body
bands over a domain-specific background, with per-image position
jitter, illumination gain, and pixel noise. Distinct identities share
individual attributes at the palette base rate, which is what plants
cross-identity local similarity in the data. Everything is a pure
function of (seed, domain, index).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .config import DomainConfig
from .errors import ConfigError

ACCESSORY_COLOR = (0.22, 0.14, 0.08)


@dataclass(frozen=True)
class IdentitySpec:
    identity: int
    head_color: int
    torso_color: int
    leg_color: int
    accessory: str | None  # None, "left" or "right"


@dataclass
class SampleRecord:
    index: int
    identity: int
    camera: int
    domain: str
    image: np.ndarray  # [3, H, W] float32 in [0, 1]


def _domain_tag(domain: DomainConfig) -> int:
    return zlib.crc32(domain.name.encode("utf-8"))


def draw_identities(num_ids: int, domain: DomainConfig, seed: int) -> list[IdentitySpec]:
    """Deterministic attribute draws for a domain's identity roster.

    Identities may share any individual attribute, but the full
    flip-invariant signature (head, torso, leg, has-bag) is unique per
    identity so the roster stays separable under flip augmentation.
    """
    rng = np.random.default_rng([seed, _domain_tag(domain), 0xD1])
    palette_size = len(domain.palette)
    if 2 * palette_size**3 < num_ids:
        raise ConfigError(
            f"palette of {palette_size} colors admits only {2 * palette_size ** 3} "
            f"distinct identities, {num_ids} requested")
    specs = []
    taken: set[tuple] = set()
    for identity in range(num_ids):
        while True:
            head, torso, leg = rng.integers(0, palette_size, size=3)
            accessory = None
            if rng.random() < 0.5:
                accessory = "left" if rng.random() < 0.5 else "right"
            signature = (int(head), int(torso), int(leg), accessory is not None)
            if signature not in taken:
                taken.add(signature)
                break
        specs.append(IdentitySpec(identity, int(head), int(torso), int(leg), accessory))
    return specs


def _render(spec: IdentitySpec, domain: DomainConfig, rng: np.random.Generator,
            image_h: int, image_w: int) -> np.ndarray:
    h, w = image_h, image_w
    background = rng.uniform(domain.background[0], domain.background[1])
    img = np.full((3, h, w), background, dtype=np.float64)
    dy = int(rng.integers(-2, 3))
    dx = int(rng.integers(-2, 3))
    gain = rng.uniform(domain.gain[0], domain.gain[1])

    col_lo = max(0, w // 4 + dx)
    col_hi = min(w, w - w // 4 + dx)
    head_top = round(0.05 * h) + dy
    torso_top = round(0.27 * h) + dy
    leg_top = round(0.66 * h) + dy
    leg_bot = round(0.95 * h) + dy
    bands = [
        (head_top, torso_top, domain.palette[spec.head_color]),
        (torso_top, leg_top, domain.palette[spec.torso_color]),
        (leg_top, leg_bot, domain.palette[spec.leg_color]),
    ]
    for top, bot, color in bands:
        top, bot = max(0, top), min(h, bot)
        for c in range(3):
            img[c, top:bot, col_lo:col_hi] = color[c]
    if spec.accessory is not None:
        bag_w = max(2, w // 8)
        bag_top = max(0, torso_top + (leg_top - torso_top) // 4)
        bag_bot = min(h, leg_top)
        if spec.accessory == "left":
            b_lo, b_hi = max(0, col_lo - bag_w), col_lo
        else:
            b_lo, b_hi = col_hi, min(w, col_hi + bag_w)
        if b_hi > b_lo:
            for c in range(3):
                img[c, bag_top:bag_bot, b_lo:b_hi] = ACCESSORY_COLOR[c]
    img *= gain
    if domain.noise_sigma > 0.0:
        img += rng.normal(0.0, domain.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_dataset(num_ids: int, images_per_id: int, domain: DomainConfig,
                     seed: int, image_h: int = 64, image_w: int = 32) -> list[SampleRecord]:
    """Render the full roster; cameras assigned round-robin per identity."""
    if num_ids < 2 or images_per_id < 2:
        raise ConfigError("need at least 2 identities with 2 images each")
    if len(domain.palette) < 2:
        raise ConfigError(
            f"palette of {len(domain.palette)} color(s) cannot produce distinct identities"
        )
    tag = _domain_tag(domain)
    records = []
    index = 0
    for spec in draw_identities(num_ids, domain, seed):
        for j in range(images_per_id):
            rng = np.random.default_rng([seed, tag, spec.identity, j])
            image = _render(spec, domain, rng, image_h, image_w)
            records.append(SampleRecord(
                index=index,
                identity=spec.identity,
                camera=j % domain.cameras,
                domain=domain.name,
                image=image,
            ))
            index += 1
    return records


def pk_sample(records: list[SampleRecord], p: int, k: int, seed) -> list[list[int]]:
    """Identity-balanced batches: p distinct identities, k instances each.

    Samples without replacement within the epoch and stops once fewer
    than p identities still hold k unused instances.
    """
    by_id: dict[int, list[int]] = {}
    for i, rec in enumerate(records):
        by_id.setdefault(rec.identity, []).append(i)
    starved = sorted(i for i, idxs in by_id.items() if len(idxs) < k)
    if len(by_id) - len(starved) < p:
        raise ConfigError(
            f"need {p} identities with >= {k} instances; "
            f"identities with too few instances: {starved}"
        )
    rng = np.random.default_rng(seed)
    pools = {i: [int(x) for x in rng.permutation(idxs)] for i, idxs in sorted(by_id.items())}
    batches = []
    while True:
        eligible = [i for i in pools if len(pools[i]) >= k]
        if len(eligible) < p:
            break
        pick = rng.choice(len(eligible), size=p, replace=False)
        batch = []
        for slot in pick:
            identity = eligible[int(slot)]
            for _ in range(k):
                batch.append(pools[identity].pop())
        batches.append(batch)
    return batches


def augment(image: np.ndarray, seed, flip_probability: float = 0.5) -> np.ndarray:
    """Horizontal flip with the given probability, decided entirely by ``seed``."""
    rng = np.random.default_rng(seed)
    if flip_probability > 0.0 and rng.random() < flip_probability:
        return np.ascontiguousarray(image[:, :, ::-1])
    return image
