import { AnnotationApi, ApiError } from "./api.js";
import { compositeRgba } from "./composite.js";
import { decodeGrayPng, encodeGrayPng } from "./png.js";
import { MaskRaster } from "./raster.js";
import type { PaletteEntry, Point, SampleInfo, ViewMode } from "./types.js";

const MASK_ALPHA = 0.45;

interface LoadedSample {
  info: SampleInfo;
  width: number;
  height: number;
  vis: ImageData;
  nir: ImageData;
  composite: ImageData;
  raster: MaskRaster;
  /** Version the editor holds for optimistic concurrency. */
  version: string;
}

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

async function bytesToImageData(bytes: Uint8Array): Promise<ImageData> {
  const blob = new Blob([bytes as unknown as BlobPart], { type: "image/png" });
  const bitmap = await createImageBitmap(blob);
  const canvas = document.createElement("canvas");
  canvas.width = bitmap.width;
  canvas.height = bitmap.height;
  const ctx = canvas.getContext("2d")!;
  ctx.drawImage(bitmap, 0, 0);
  return ctx.getImageData(0, 0, bitmap.width, bitmap.height);
}

export class AnnotatorApp {
  private api: AnnotationApi;
  private palette: PaletteEntry[] = [];
  private samples: SampleInfo[] = [];
  private current: LoadedSample | null = null;

  private activeClass = 0;
  private brushSize = 3;
  private viewMode: ViewMode = "NIR"; // NIR offers the clearer boundaries for annotation
  private zoom = 8; // display-only scaling
  private drawing = false;
  private strokePoints: Point[] = [];

  private canvas!: HTMLCanvasElement;
  private ctx!: CanvasRenderingContext2D;

  constructor(baseUrl = "") {
    this.api = new AnnotationApi(baseUrl);
  }

  async start(): Promise<void> {
    this.canvas = el<HTMLCanvasElement>("editor");
    this.ctx = this.canvas.getContext("2d")!;
    this.bindControls();
    try {
      this.palette = await this.api.getPalette();
      this.samples = await this.api.listSamples();
    } catch (err) {
      this.setBanner(`Cannot reach the annotation service: ${err}. Retry when it is up.`, true);
      this.setEditorEnabled(false);
      el<HTMLButtonElement>("retry").hidden = false;
      return;
    }
    el<HTMLButtonElement>("retry").hidden = true;
    this.setBanner("", false);
    this.renderPalette();
    this.renderSampleList();
    if (this.samples.length > 0) await this.loadSample(this.samples[0].id);
  }

  // -- UI wiring -------------------------------------------------------------

  private bindControls(): void {
    el<HTMLButtonElement>("retry").onclick = () => void this.start();
    el<HTMLButtonElement>("undo").onclick = () => this.undo();
    el<HTMLButtonElement>("save").onclick = () => void this.save();
    el<HTMLButtonElement>("fill").onclick = () => this.fill();
    (["VIS", "NIR", "composite"] as ViewMode[]).forEach((mode) => {
      el<HTMLButtonElement>(`view-${mode}`).onclick = () => {
        this.viewMode = mode;
        this.redraw();
        this.syncToolbar();
      };
    });
    const brush = el<HTMLInputElement>("brush");
    brush.oninput = () => {
      this.brushSize = Math.max(1, Number(brush.value));
      this.syncToolbar();
    };
    el<HTMLButtonElement>("zoom-in").onclick = () => this.setZoom(this.zoom * 2);
    el<HTMLButtonElement>("zoom-out").onclick = () => this.setZoom(this.zoom / 2);

    this.canvas.addEventListener("pointerdown", (e) => this.onPointerDown(e));
    this.canvas.addEventListener("pointermove", (e) => this.onPointerMove(e));
    window.addEventListener("pointerup", () => this.onPointerUp());
    window.addEventListener("keydown", (e) => this.onKey(e));
  }

  private onKey(e: KeyboardEvent): void {
    if (e.target instanceof HTMLInputElement) return;
    if (e.key === "z" && (e.ctrlKey || e.metaKey)) {
      e.preventDefault();
      this.undo();
      return;
    }
    // cycle classes in palette order; digits select directly
    if (e.key === "x") this.selectClass((this.activeClass + 1) % this.palette.length);
    if (e.key === "z" && !e.ctrlKey && !e.metaKey) {
      this.selectClass((this.activeClass + this.palette.length - 1) % this.palette.length);
    }
    if (/^[0-9]$/.test(e.key)) {
      const id = Number(e.key);
      if (this.palette.some((p) => p.class_id === id)) this.selectClass(id);
    }
  }

  private selectClass(classId: number): void {
    this.activeClass = classId;
    const entry = this.palette.find((p) => p.class_id === classId);
    // boundary classes get the 1-px brush by default
    if (entry && entry.name.includes("boundary")) {
      this.brushSize = 1;
    }
    this.syncToolbar();
    this.renderPalette();
  }

  // -- painting ----------------------------------------------------------------

  /** Map a pointer event to image pixel coordinates (zoom is display-only). */
  private toImagePoint(e: PointerEvent): Point {
    const rect = this.canvas.getBoundingClientRect();
    return {
      x: ((e.clientX - rect.left) / rect.width) * this.current!.width,
      y: ((e.clientY - rect.top) / rect.height) * this.current!.height,
    };
  }

  private onPointerDown(e: PointerEvent): void {
    if (!this.current) return;
    this.drawing = true;
    this.strokePoints = [this.toImagePoint(e)];
    this.current.raster.apply({
      kind: "stroke",
      classId: this.activeClass,
      size: this.brushSize,
      points: [...this.strokePoints],
    });
    this.redraw();
  }

  private onPointerMove(e: PointerEvent): void {
    if (!this.drawing || !this.current) return;
    this.strokePoints.push(this.toImagePoint(e));
    // extend the in-flight stroke: replace the op so undo removes it atomically
    this.current.raster.undo();
    this.current.raster.apply({
      kind: "stroke",
      classId: this.activeClass,
      size: this.brushSize,
      points: [...this.strokePoints],
    });
    this.redraw();
  }

  private onPointerUp(): void {
    this.drawing = false;
    this.strokePoints = [];
  }

  private fill(): void {
    if (!this.current) return;
    this.current.raster.apply({ kind: "fill", classId: this.activeClass });
    this.redraw();
  }

  private undo(): void {
    if (this.current?.raster.undo()) this.redraw();
  }

  // -- sample lifecycle ----------------------------------------------------------

  async loadSample(id: string): Promise<void> {
    try {
      const info = this.samples.find((s) => s.id === id);
      if (!info) throw new Error(`unknown sample ${id}`);
      const [visBytes, nirBytes, maskBytes] = await Promise.all([
        this.api.fetchImageBytes(id, "vis"),
        this.api.fetchImageBytes(id, "nir"),
        this.api.fetchMaskBytes(id),
      ]);
      const vis = await bytesToImageData(visBytes);
      const nir = await bytesToImageData(nirBytes);
      const composite = new ImageData(
        compositeRgba(vis.data, nir.data, vis.width * vis.height),
        vis.width,
        vis.height,
      );
      const raster = new MaskRaster(vis.width, vis.height);
      let version = info.mask_version;
      if (maskBytes) {
        const decoded = await decodeGrayPng(maskBytes);
        if (decoded.width !== vis.width || decoded.height !== vis.height) {
          throw new Error("stored mask dims disagree with the image");
        }
        raster.reset(decoded.pixels);
      }
      this.current = { info, width: vis.width, height: vis.height, vis, nir, composite,
                       raster, version };
      this.setBanner("", false);
      this.setEditorEnabled(true);
      this.setZoom(this.zoom);
      this.renderSampleList();
      this.redraw();
    } catch (err) {
      // leave the previous sample's state untouched
      this.setBanner(`Failed to load sample ${id}: ${err}`, true);
    }
  }

  async save(): Promise<void> {
    if (!this.current) return;
    const { raster, info } = this.current;
    const png = await encodeGrayPng(raster.data(), this.current.width, this.current.height);
    try {
      const res = await this.api.putMask(info.id, png, this.current.version);
      this.current.version = res.mask_version;
      info.annotated = true;
      info.mask_version = res.mask_version;
      this.setBanner(`Saved (${res.hash.slice(0, 12)}...)`, false);
      this.renderSampleList();
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        this.setBanner("Save conflict: the mask changed elsewhere. Reload the sample.", true);
      } else if (err instanceof ApiError && err.status === 400) {
        this.setBanner(`Rejected by the service: ${err.detail}`, true);
      } else {
        this.setBanner(`Save failed: ${err}`, true);
      }
    }
  }

  // -- rendering ------------------------------------------------------------------

  private setZoom(zoom: number): void {
    this.zoom = Math.min(32, Math.max(1, zoom));
    if (!this.current) return;
    this.canvas.width = this.current.width;
    this.canvas.height = this.current.height;
    this.canvas.style.width = `${this.current.width * this.zoom}px`;
    this.canvas.style.height = `${this.current.height * this.zoom}px`;
    this.redraw();
  }

  private classColor(classId: number): [number, number, number] {
    const hex = this.palette.find((p) => p.class_id === classId)?.display_color ?? "#ff00ff";
    return [
      parseInt(hex.slice(1, 3), 16),
      parseInt(hex.slice(3, 5), 16),
      parseInt(hex.slice(5, 7), 16),
    ];
  }

  private redraw(): void {
    if (!this.current) return;
    const { width, height } = this.current;
    const base =
      this.viewMode === "VIS" ? this.current.vis
      : this.viewMode === "NIR" ? this.current.nir
      : this.current.composite;
    const frame = new ImageData(new Uint8ClampedArray(base.data), width, height);
    const mask = this.current.raster.data();
    for (let i = 0; i < mask.length; i++) {
      const [r, g, b] = this.classColor(mask[i]);
      frame.data[i * 4] = frame.data[i * 4] * (1 - MASK_ALPHA) + r * MASK_ALPHA;
      frame.data[i * 4 + 1] = frame.data[i * 4 + 1] * (1 - MASK_ALPHA) + g * MASK_ALPHA;
      frame.data[i * 4 + 2] = frame.data[i * 4 + 2] * (1 - MASK_ALPHA) + b * MASK_ALPHA;
    }
    this.ctx.putImageData(frame, 0, 0);
  }

  private renderPalette(): void {
    const host = el<HTMLDivElement>("palette");
    host.innerHTML = "";
    for (const entry of this.palette) {
      const btn = document.createElement("button");
      btn.textContent = `${entry.class_id} ${entry.name}`;
      btn.style.borderLeft = `12px solid ${entry.display_color}`;
      btn.className = entry.class_id === this.activeClass ? "active" : "";
      btn.onclick = () => this.selectClass(entry.class_id);
      host.appendChild(btn);
    }
  }

  private renderSampleList(): void {
    const host = el<HTMLUListElement>("samples");
    host.innerHTML = "";
    for (const sample of this.samples) {
      const item = document.createElement("li");
      item.textContent = `${sample.id} ${sample.annotated ? "✓" : ""}`;
      item.className = sample.id === this.current?.info.id ? "active" : "";
      item.onclick = () => void this.loadSample(sample.id);
      host.appendChild(item);
    }
  }

  private syncToolbar(): void {
    el<HTMLInputElement>("brush").value = String(this.brushSize);
    el<HTMLSpanElement>("brush-label").textContent = `${this.brushSize}px`;
    (["VIS", "NIR", "composite"] as ViewMode[]).forEach((mode) => {
      el<HTMLButtonElement>(`view-${mode}`).classList.toggle("active", mode === this.viewMode);
    });
  }

  private setBanner(text: string, isError: boolean): void {
    const banner = el<HTMLDivElement>("banner");
    banner.textContent = text;
    banner.className = text ? (isError ? "error" : "ok") : "";
  }

  private setEditorEnabled(enabled: boolean): void {
    el<HTMLDivElement>("workspace").style.pointerEvents = enabled ? "auto" : "none";
    el<HTMLDivElement>("workspace").style.opacity = enabled ? "1" : "0.4";
  }
}
