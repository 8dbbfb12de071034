import type { PaletteEntry, SampleInfo } from "./types.js";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function errorDetail(res: Response): Promise<string> {
  try {
    const body = await res.json();
    return typeof body?.detail === "string" ? body.detail : JSON.stringify(body);
  } catch {
    return res.statusText;
  }
}

/** Thin client over the annotation service HTTP API. */
export class AnnotationApi {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchFn: typeof fetch = fetch,
  ) {}

  private url(path: string): string {
    return `${this.baseUrl}${path}`;
  }

  async listSamples(): Promise<SampleInfo[]> {
    const res = await this.fetchFn(this.url("/api/samples"));
    if (!res.ok) throw new ApiError(res.status, await errorDetail(res));
    return (await res.json()).samples;
  }

  async getPalette(): Promise<PaletteEntry[]> {
    const res = await this.fetchFn(this.url("/api/palette"));
    if (!res.ok) throw new ApiError(res.status, await errorDetail(res));
    return (await res.json()).palette;
  }

  imageUrl(id: string, kind: "vis" | "nir"): string {
    return this.url(`/api/samples/${id}/${kind}.png`);
  }

  async fetchImageBytes(id: string, kind: "vis" | "nir"): Promise<Uint8Array> {
    const res = await this.fetchFn(this.imageUrl(id, kind));
    if (!res.ok) throw new ApiError(res.status, await errorDetail(res));
    return new Uint8Array(await res.arrayBuffer());
  }

  /** Stored mask PNG bytes, or null when the sample has no annotation yet. */
  async fetchMaskBytes(id: string): Promise<Uint8Array | null> {
    const res = await this.fetchFn(this.url(`/api/samples/${id}/mask.png`));
    if (res.status === 404) return null;
    if (!res.ok) throw new ApiError(res.status, await errorDetail(res));
    return new Uint8Array(await res.arrayBuffer());
  }

  /**
   * Upload a class-index mask PNG under optimistic concurrency: `version`
   * must equal the currently stored mask version ("none" before the first
   * write). A stale version surfaces as ApiError(409).
   */
  async putMask(
    id: string,
    png: Uint8Array,
    version: string,
  ): Promise<{ mask_version: string; hash: string }> {
    const res = await this.fetchFn(this.url(`/api/samples/${id}/mask`), {
      method: "PUT",
      headers: { "Content-Type": "image/png", "X-Mask-Version": version },
      body: png as unknown as BodyInit,
    });
    if (!res.ok) throw new ApiError(res.status, await errorDetail(res));
    return await res.json();
  }
}
