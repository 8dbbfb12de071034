"""Labeled-triplet dataset generation, manifests, and alignment diagnostics.

On-disk layout of a dataset root:

    manifest.json
    images/{id}_vis.png
    images/{id}_nir.png
    masks/{id}.png          (absent for records awaiting annotation)

The manifest holds the record list, the class palette, a config snapshot and
a content hash (SHA-256 over the bytes of all record files in sorted path
order), so two runs agree byte-for-byte iff their hashes agree.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

from .generator import BimodalPair, DualBranchGenerator, tap_fingerprint, weights_fingerprint
from .imaging import composite_from_arrays, from_uint8, load_png, nearest_by_mse, save_png
from .smg import SMGModel, predict_mask

MANIFEST_NAME = "manifest.json"


@dataclass
class TripletRecord:
    id: str
    seed: int
    vis: str
    nir: str
    mask: Optional[str]
    checkpoint_fingerprint: str
    smg_fingerprint: Optional[str]


@dataclass
class DatasetManifest:
    records: list[TripletRecord]
    palette: list[dict[str, Any]]
    config_snapshot: dict[str, Any]
    content_hash: str

    def record_by_id(self, record_id: str) -> TripletRecord:
        for rec in self.records:
            if rec.id == record_id:
                return rec
        raise KeyError(record_id)


def palette_entries(palette) -> list[dict[str, Any]]:
    return [
        {"class_id": cid, "name": name, "display_color": color} for cid, name, color in palette
    ]


def compute_content_hash(root: Path, records: list[TripletRecord]) -> str:
    """SHA-256 over the bytes of every record file, in sorted relative-path order."""
    paths = []
    for rec in records:
        paths.extend(p for p in (rec.vis, rec.nir, rec.mask) if p)
    digest = hashlib.sha256()
    for rel in sorted(paths):
        digest.update(rel.encode())
        digest.update((root / rel).read_bytes())
    return digest.hexdigest()


def write_manifest(root: Path, manifest: DatasetManifest) -> Path:
    payload = {
        "records": [dataclasses.asdict(r) for r in manifest.records],
        "palette": manifest.palette,
        "config_snapshot": manifest.config_snapshot,
        "content_hash": manifest.content_hash,
    }
    path = Path(root) / MANIFEST_NAME
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return path


def read_manifest(root: str | Path) -> DatasetManifest:
    path = Path(root) / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"no manifest at {path}")
    data = json.loads(path.read_text(encoding="utf-8"))
    records = [TripletRecord(**r) for r in data["records"]]
    return DatasetManifest(
        records=records,
        palette=data["palette"],
        config_snapshot=data["config_snapshot"],
        content_hash=data["content_hash"],
    )


def _record_paths(root: Path, record_id: str, with_mask: bool):
    (root / "images").mkdir(parents=True, exist_ok=True)
    if with_mask:
        (root / "masks").mkdir(parents=True, exist_ok=True)
    vis = f"images/{record_id}_vis.png"
    nir = f"images/{record_id}_nir.png"
    mask = f"masks/{record_id}.png" if with_mask else None
    return vis, nir, mask


def _synthesize_for_seed(generator: DualBranchGenerator, seed: int):
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn((1, generator.config.latent_dim), generator=gen)
    with torch.no_grad():
        w = generator.map_latent(z)
        vis, nir, stack = generator.synthesize(w, noise_mode="fixed", noise_seed=seed)
    return BimodalPair(vis=vis[0], nir=nir[0]), stack


def generate_triplets(generator: DualBranchGenerator, smg: Optional[SMGModel], n: int,
                      base_seed: int, root: str | Path, palette,
                      config_snapshot: Optional[dict[str, Any]] = None) -> DatasetManifest:
    """Write `n` records under `root`; with an SMG, masks come from ensemble votes.

    Record i is fully determined by `base_seed + i`, so equal inputs reproduce
    identical files and an identical manifest hash. Without an SMG the records
    are unlabeled pairs awaiting annotation.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ckpt_fp = weights_fingerprint(generator)
    tap_fp = tap_fingerprint(generator.config, ckpt_fp)
    if smg is not None and smg.tap_fingerprint != tap_fp:
        raise RuntimeError("SMG fingerprint does not match the generator checkpoint")

    records = []
    for i in range(n):
        seed = base_seed + i
        record_id = f"{i:06d}"
        pair, stack = _synthesize_for_seed(generator, seed)
        vis_rel, nir_rel, mask_rel = _record_paths(root, record_id, with_mask=smg is not None)
        save_png(root / vis_rel, pair.vis_uint8())
        save_png(root / nir_rel, pair.nir_uint8())
        smg_fp = None
        if smg is not None:
            mask = predict_mask(stack, smg, generator.config.output_resolution, tap_fp)[0]
            save_png(root / mask_rel, mask.astype(np.uint8))
            smg_fp = smg.tap_fingerprint
        records.append(
            TripletRecord(
                id=record_id, seed=seed, vis=vis_rel, nir=nir_rel, mask=mask_rel,
                checkpoint_fingerprint=ckpt_fp, smg_fingerprint=smg_fp,
            )
        )

    manifest = DatasetManifest(
        records=records,
        palette=palette_entries(palette),
        config_snapshot=config_snapshot or {"source": "generated", "n": n, "base_seed": base_seed},
        content_hash=compute_content_hash(root, records),
    )
    write_manifest(root, manifest)
    return manifest


def write_procedural_dataset(root: str | Path, vis, nir, masks, palette,
                             config_snapshot: Optional[dict[str, Any]] = None,
                             seeds=None) -> DatasetManifest:
    """Store pre-rendered procedural arrays in the standard triplet layout."""
    from .imaging import to_uint8

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    n = vis.shape[0]
    for i in range(n):
        record_id = f"{i:06d}"
        vis_rel, nir_rel, mask_rel = _record_paths(root, record_id, with_mask=masks is not None)
        save_png(root / vis_rel, to_uint8(np.transpose(vis[i], (1, 2, 0))))
        save_png(root / nir_rel, to_uint8(nir[i][0]))
        if masks is not None:
            save_png(root / mask_rel, masks[i].astype(np.uint8))
        records.append(
            TripletRecord(
                id=record_id, seed=int(seeds[i]) if seeds is not None else i,
                vis=vis_rel, nir=nir_rel, mask=mask_rel,
                checkpoint_fingerprint="procedural", smg_fingerprint=None,
            )
        )
    manifest = DatasetManifest(
        records=records,
        palette=palette_entries(palette),
        config_snapshot=config_snapshot or {"source": "procedural", "n": n},
        content_hash=compute_content_hash(root, records),
    )
    write_manifest(root, manifest)
    return manifest


def load_triplet_arrays(root: str | Path):
    """Read a labeled dataset back into (vis, nir, masks) arrays in [-1, 1] / uint8."""
    root = Path(root)
    manifest = read_manifest(root)
    vis_list, nir_list, mask_list = [], [], []
    for rec in manifest.records:
        if rec.mask is None:
            continue
        vis_u8 = load_png(root / rec.vis)
        nir_u8 = load_png(root / rec.nir)
        mask = load_png(root / rec.mask)
        if vis_u8.shape[:2] != nir_u8.shape[:2] or vis_u8.shape[:2] != mask.shape[:2]:
            raise ValueError(f"record {rec.id}: images and mask dims differ")
        vis_list.append(np.transpose(from_uint8(vis_u8), (2, 0, 1)))
        nir_list.append(from_uint8(nir_u8)[None])
        mask_list.append(mask)
    if not vis_list:
        raise ValueError(f"dataset at {root} holds no labeled records")
    return (
        np.stack(vis_list),
        np.stack(nir_list),
        np.stack(mask_list).astype(np.int64),
        manifest,
    )


def composite_alignment_image(pair: BimodalPair) -> np.ndarray:
    """VIS -> YCbCr (BT.601), luma replaced by NIR, back to clamped RGB uint8."""
    return composite_from_arrays(pair.vis_uint8(), pair.nir_uint8())


def nearest_training_sample(query_vis, training_vis_set) -> tuple[int, float]:
    """Index and MSE of the training VIS image closest to `query_vis` (ties: lowest index)."""
    return nearest_by_mse(query_vis, training_vis_set)
