import type { PaintOp, Point, StrokeOp } from "./types.js";

/**
 * Class-index raster with an undoable paint-operation log.
 *
 * Painting happens in image pixel space only; display zoom never touches the
 * raster. The current pixels are always exactly `base` with the op log
 * replayed on top, so undo is "pop and replay" and reproduces the raster
 * bit-for-bit.
 */
export class MaskRaster {
  readonly width: number;
  readonly height: number;
  private base: Uint8Array;
  private ops: PaintOp[] = [];
  private pixels: Uint8Array;

  constructor(width: number, height: number, base?: Uint8Array) {
    if (width <= 0 || height <= 0) throw new Error("raster dims must be positive");
    this.width = width;
    this.height = height;
    this.base = base ? Uint8Array.from(base) : new Uint8Array(width * height);
    if (this.base.length !== width * height) {
      throw new Error("base length does not match raster dims");
    }
    this.pixels = Uint8Array.from(this.base);
  }

  /** Current raster contents (copy). */
  data(): Uint8Array {
    return Uint8Array.from(this.pixels);
  }

  classAt(x: number, y: number): number {
    return this.pixels[y * this.width + x];
  }

  opCount(): number {
    return this.ops.length;
  }

  /** Replace the committed base (e.g. after loading the server mask). Clears the op log. */
  reset(base?: Uint8Array): void {
    this.base = base ? Uint8Array.from(base) : new Uint8Array(this.width * this.height);
    if (this.base.length !== this.width * this.height) {
      throw new Error("base length does not match raster dims");
    }
    this.ops = [];
    this.pixels = Uint8Array.from(this.base);
  }

  apply(op: PaintOp): void {
    this.ops.push(op);
    this.applyToPixels(op, this.pixels);
  }

  /** Drop the most recent op and rebuild the raster from the base. */
  undo(): boolean {
    if (this.ops.length === 0) return false;
    this.ops.pop();
    this.pixels = Uint8Array.from(this.base);
    for (const op of this.ops) this.applyToPixels(op, this.pixels);
    return true;
  }

  private applyToPixels(op: PaintOp, pixels: Uint8Array): void {
    if (op.kind === "fill") {
      pixels.fill(op.classId);
      return;
    }
    this.rasterizeStroke(op, pixels);
  }

  private rasterizeStroke(op: StrokeOp, pixels: Uint8Array): void {
    const pts = op.points;
    if (pts.length === 0) return;
    this.stamp(pts[0], op, pixels);
    for (let i = 1; i < pts.length; i++) {
      const a = pts[i - 1];
      const b = pts[i];
      const dist = Math.hypot(b.x - a.x, b.y - a.y);
      const steps = Math.max(1, Math.ceil(dist * 2));
      for (let s = 1; s <= steps; s++) {
        const t = s / steps;
        this.stamp({ x: a.x + (b.x - a.x) * t, y: a.y + (b.y - a.y) * t }, op, pixels);
      }
    }
  }

  /** Hard-edged circular stamp centered on the pointed pixel's center. */
  private stamp(p: Point, op: StrokeOp, pixels: Uint8Array): void {
    const cx = Math.floor(p.x);
    const cy = Math.floor(p.y);
    const r = op.size / 2;
    if (op.size <= 1) {
      if (cx >= 0 && cx < this.width && cy >= 0 && cy < this.height) {
        pixels[cy * this.width + cx] = op.classId;
      }
      return;
    }
    const reach = Math.ceil(r);
    for (let y = cy - reach; y <= cy + reach; y++) {
      if (y < 0 || y >= this.height) continue;
      for (let x = cx - reach; x <= cx + reach; x++) {
        if (x < 0 || x >= this.width) continue;
        if ((x - cx) ** 2 + (y - cy) ** 2 <= r * r) {
          pixels[y * this.width + x] = op.classId;
        }
      }
    }
  }
}
