export interface SampleInfo {
  id: string;
  seed: number;
  annotated: boolean;
  mask_version: string;
}

export interface PaletteEntry {
  class_id: number;
  name: string;
  display_color: string;
}

export type ViewMode = "VIS" | "NIR" | "composite";

export interface Point {
  x: number;
  y: number;
}

/** One hard-edged brush stroke in image pixel space. */
export interface StrokeOp {
  kind: "stroke";
  classId: number;
  /** Brush diameter in pixels; 1 paints exactly the pointed pixel. */
  size: number;
  points: Point[];
}

/** Whole-canvas fill. */
export interface FillOp {
  kind: "fill";
  classId: number;
}

export type PaintOp = StrokeOp | FillOp;
