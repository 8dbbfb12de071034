/**
 * Luma-replacement composite (BT.601 full range): keep the VIS chroma, take
 * luma from the NIR plane, clamp back into the RGB gamut. Mirrors the
 * pipeline's alignment diagnostic so annotators can eyeball pair alignment.
 */
const KR = 0.299;
const KG = 0.587;
const KB = 0.114;

export function compositeRgba(
  vis: Uint8ClampedArray,
  nir: Uint8ClampedArray,
  pixelCount: number,
): Uint8ClampedArray<ArrayBuffer> {
  const out = new Uint8ClampedArray(pixelCount * 4);
  for (let i = 0; i < pixelCount; i++) {
    const r = vis[i * 4];
    const g = vis[i * 4 + 1];
    const b = vis[i * 4 + 2];
    const y = KR * r + KG * g + KB * b;
    const cb = (b - y) * (0.5 / (1 - KB));
    const cr = (r - y) * (0.5 / (1 - KR));
    const yn = nir[i * 4]; // grayscale image: any channel carries the level
    const rOut = yn + 2 * (1 - KR) * cr;
    const bOut = yn + 2 * (1 - KB) * cb;
    const gOut = (yn - KR * rOut - KB * bOut) / KG;
    out[i * 4] = rOut; // Uint8ClampedArray clamps on assignment
    out[i * 4 + 1] = gOut;
    out[i * 4 + 2] = bOut;
    out[i * 4 + 3] = 255;
  }
  return out;
}
