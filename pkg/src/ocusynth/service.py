"""Local-first annotation service over a generated-pair dataset root.

Serves sample images and the class palette to the browser annotation tool and
accepts mask uploads. Mask writes use optimistic concurrency: every PUT must
carry an `X-Mask-Version` header equal to the currently stored version
("none" before the first write); a stale version is rejected with 409, so a
concurrent writer can never silently win. Writes are atomic (temp file +
rename) and serialized per sample id. The service binds to localhost tooling
use and carries no authentication by design.
"""

from __future__ import annotations

import hashlib
import io
import os
import tempfile
import threading
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, Header, HTTPException, Request, Response
from PIL import Image

from .dataset import read_manifest

NO_MASK_VERSION = "none"


def _mask_path(root: Path, record) -> Path:
    rel = record.mask or f"masks/{record.id}.png"
    return root / rel


def _mask_version(path: Path) -> str:
    if not path.is_file():
        return NO_MASK_VERSION
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _decode_mask(body: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(body)) as im:
            im.load()
            if im.mode in ("L", "P"):
                arr = np.asarray(im.convert("L") if im.mode == "P" else im, dtype=np.uint8)
            elif im.mode in ("RGB", "RGBA"):
                rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
                if not ((rgb[..., 0] == rgb[..., 1]) & (rgb[..., 1] == rgb[..., 2])).all():
                    raise HTTPException(400, "mask channels disagree; send class indices")
                arr = rgb[..., 0]
            else:
                raise HTTPException(400, f"unsupported mask mode {im.mode}")
    except HTTPException:
        raise
    except Exception:
        raise HTTPException(400, "body is not a decodable PNG") from None
    return arr


def create_app(dataset_root: str | Path, frontend_dir: Optional[str | Path] = None) -> FastAPI:
    root = Path(dataset_root)
    manifest = read_manifest(root)
    records = {rec.id: rec for rec in manifest.records}
    palette_ids = {entry["class_id"] for entry in manifest.palette}
    locks: dict[str, threading.Lock] = {rid: threading.Lock() for rid in records}

    app = FastAPI(title="ocusynth annotation service")

    def _get_record(sample_id: str):
        rec = records.get(sample_id)
        if rec is None:
            raise HTTPException(404, f"unknown sample id {sample_id!r}")
        return rec

    @app.get("/api/samples")
    def list_samples():
        out = []
        for rec in manifest.records:
            mpath = _mask_path(root, rec)
            out.append(
                {
                    "id": rec.id,
                    "seed": rec.seed,
                    "annotated": mpath.is_file(),
                    "mask_version": _mask_version(mpath),
                }
            )
        return {"samples": out}

    @app.get("/api/palette")
    def get_palette():
        return {"palette": manifest.palette}

    def _png_response(path: Path) -> Response:
        if not path.is_file():
            raise HTTPException(404, f"no file at {path.name}")
        return Response(content=path.read_bytes(), media_type="image/png")

    @app.get("/api/samples/{sample_id}/vis.png")
    def get_vis(sample_id: str):
        return _png_response(root / _get_record(sample_id).vis)

    @app.get("/api/samples/{sample_id}/nir.png")
    def get_nir(sample_id: str):
        return _png_response(root / _get_record(sample_id).nir)

    @app.get("/api/samples/{sample_id}/mask.png")
    def get_mask(sample_id: str):
        return _png_response(_mask_path(root, _get_record(sample_id)))

    @app.put("/api/samples/{sample_id}/mask")
    async def put_mask(sample_id: str, request: Request,
                       x_mask_version: Optional[str] = Header(default=None)):
        rec = _get_record(sample_id)
        if x_mask_version is None:
            raise HTTPException(400, "X-Mask-Version header is required")
        arr = _decode_mask(await request.body())

        with Image.open(root / rec.vis) as im:
            expected = (im.height, im.width)
        if arr.shape != expected:
            raise HTTPException(400, f"mask dims {arr.shape} != image dims {expected}")
        bad = set(np.unique(arr).tolist()) - palette_ids
        if bad:
            raise HTTPException(400, f"mask holds class ids outside the palette: {sorted(bad)}")

        mpath = _mask_path(root, rec)
        with locks[sample_id]:
            current = _mask_version(mpath)
            if x_mask_version != current:
                raise HTTPException(
                    409, f"version conflict: stored mask is {current}, you sent {x_mask_version}"
                )
            mpath.parent.mkdir(parents=True, exist_ok=True)
            buf = io.BytesIO()
            Image.fromarray(arr, mode="L").save(buf, format="PNG")
            data = buf.getvalue()
            fd, tmp = tempfile.mkstemp(dir=mpath.parent, suffix=".tmp")
            try:
                with os.fdopen(fd, "wb") as f:
                    f.write(data)
                os.replace(tmp, mpath)
            finally:
                if os.path.exists(tmp):
                    os.unlink(tmp)
            new_version = hashlib.sha256(data).hexdigest()
        return {"id": sample_id, "mask_version": new_version, "hash": new_version}

    if frontend_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(frontend_dir), html=True), name="frontend")

    return app


def serve(dataset_root, port: int = 8787, frontend_dir=None) -> None:
    import uvicorn

    app = create_app(dataset_root, frontend_dir=frontend_dir)
    uvicorn.run(app, host="127.0.0.1", port=port, log_level="warning")
