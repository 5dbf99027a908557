/**
 * Run-length codec for label masks, mirroring the service wire format:
 * row-major (code, length) pairs covering every pixel, with consecutive
 * runs carrying distinct codes.
 */

export interface RleMask {
  shape: [number, number]; // (height, width)
  runs: [number, number][]; // (code, length)
}

export const BACKGROUND = 0;
export const TISSUE = 1;
export const FLUID = 2;
export const UNRESOLVED = 255;

const VALID_CODES = new Set([BACKGROUND, TISSUE, FLUID, UNRESOLVED]);

export function encodeRle(mask: Uint8Array, height: number, width: number): RleMask {
  if (mask.length !== height * width) {
    throw new Error(`mask has ${mask.length} pixels, expected ${height * width}`);
  }
  const runs: [number, number][] = [];
  let code = mask[0];
  let length = 1;
  for (let i = 1; i < mask.length; i++) {
    if (mask[i] === code) {
      length++;
    } else {
      runs.push([code, length]);
      code = mask[i];
      length = 1;
    }
  }
  runs.push([code, length]);
  return { shape: [height, width], runs };
}

export function decodeRle(rle: RleMask): Uint8Array {
  const [height, width] = rle.shape;
  const out = new Uint8Array(height * width);
  let cursor = 0;
  let previous = -1;
  for (const [code, length] of rle.runs) {
    if (!VALID_CODES.has(code)) {
      throw new Error(`invalid label code ${code}`);
    }
    if (length < 1) {
      throw new Error("run lengths must be >= 1");
    }
    if (code === previous) {
      throw new Error("consecutive runs must have distinct codes");
    }
    out.fill(code, cursor, cursor + length);
    cursor += length;
    previous = code;
  }
  if (cursor !== out.length) {
    throw new Error(`runs cover ${cursor} pixels, expected ${out.length}`);
  }
  return out;
}
