/**
 * Overlay colors: background green, tissue black (left transparent over
 * the scan), fluid red, unresolved pixels highlighted yellow. Prediction
 * overlays render blue against ground-truth red.
 */

import { BACKGROUND, FLUID, TISSUE, UNRESOLVED } from "./rle.js";

export type Rgba = [number, number, number, number];

export const LABEL_COLORS: Record<number, Rgba> = {
  [BACKGROUND]: [0, 160, 60, 140],
  [TISSUE]: [0, 0, 0, 0],
  [FLUID]: [220, 30, 30, 160],
  [UNRESOLVED]: [255, 220, 0, 220],
};

export const PREDICTION_COLOR: Rgba = [40, 90, 220, 160];

/**
 * Composite a label mask over grayscale image bytes (RGBA, premixed by
 * alpha). `opacity` scales every overlay alpha; view-only, never mutates
 * the mask.
 */
export function compositeOverlay(
  imageRgba: Uint8ClampedArray,
  mask: Uint8Array,
  opacity: number,
  colors: Record<number, Rgba> = LABEL_COLORS,
): Uint8ClampedArray<ArrayBuffer> {
  if (imageRgba.length !== mask.length * 4) {
    throw new Error("image and mask sizes disagree");
  }
  const out = new Uint8ClampedArray(imageRgba) as Uint8ClampedArray<ArrayBuffer>;
  for (let i = 0; i < mask.length; i++) {
    const color = colors[mask[i]];
    if (!color) continue;
    const alpha = (color[3] / 255) * opacity;
    if (alpha <= 0) continue;
    const base = i * 4;
    for (let c = 0; c < 3; c++) {
      out[base + c] = Math.round((1 - alpha) * out[base + c] + alpha * color[c]);
    }
    out[base + 3] = 255;
  }
  return out;
}
