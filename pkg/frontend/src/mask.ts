/**
 * In-memory label plane editing: brush strokes, polygon fill, eraser.
 * All coordinates are (row, col) pixels; out-of-bounds input is clipped.
 */

import { BACKGROUND } from "./rle.js";

export interface Point {
  row: number;
  col: number;
}

export class MaskBuffer {
  readonly data: Uint8Array;

  constructor(
    readonly height: number,
    readonly width: number,
    initial?: Uint8Array,
  ) {
    if (initial !== undefined) {
      if (initial.length !== height * width) {
        throw new Error(`initial mask has ${initial.length} pixels, expected ${height * width}`);
      }
      this.data = initial.slice();
    } else {
      this.data = new Uint8Array(height * width);
    }
  }

  clone(): MaskBuffer {
    return new MaskBuffer(this.height, this.width, this.data);
  }

  get(row: number, col: number): number {
    return this.data[row * this.width + col];
  }

  set(row: number, col: number, code: number): void {
    if (row >= 0 && row < this.height && col >= 0 && col < this.width) {
      this.data[row * this.width + col] = code;
    }
  }

  equals(other: MaskBuffer): boolean {
    if (other.height !== this.height || other.width !== this.width) return false;
    for (let i = 0; i < this.data.length; i++) {
      if (this.data[i] !== other.data[i]) return false;
    }
    return true;
  }

  /** Stamp a filled disc of the given radius. */
  paintDisc(center: Point, radius: number, code: number): void {
    const r = Math.max(0, radius);
    const rowLo = Math.floor(center.row - r);
    const rowHi = Math.ceil(center.row + r);
    const colLo = Math.floor(center.col - r);
    const colHi = Math.ceil(center.col + r);
    for (let row = rowLo; row <= rowHi; row++) {
      for (let col = colLo; col <= colHi; col++) {
        const dr = row - center.row;
        const dc = col - center.col;
        if (dr * dr + dc * dc <= r * r) {
          this.set(row, col, code);
        }
      }
    }
  }

  /**
   * Paint along a stroke: discs stamped at each point and densely along
   * the segments between them. A zero-length stroke is a single disc.
   */
  paintStroke(points: Point[], radius: number, code: number): void {
    if (points.length === 0) return;
    this.paintDisc(points[0], radius, code);
    for (let i = 1; i < points.length; i++) {
      const a = points[i - 1];
      const b = points[i];
      const steps = Math.max(
        1,
        Math.ceil(Math.max(Math.abs(b.row - a.row), Math.abs(b.col - a.col))),
      );
      for (let s = 1; s <= steps; s++) {
        const t = s / steps;
        this.paintDisc(
          { row: a.row + t * (b.row - a.row), col: a.col + t * (b.col - a.col) },
          radius,
          code,
        );
      }
    }
  }

  erase(points: Point[], radius: number): void {
    this.paintStroke(points, radius, BACKGROUND);
  }

  /** Scanline fill of a closed polygon (vertices in pixel coordinates). */
  fillPolygon(vertices: Point[], code: number): void {
    if (vertices.length < 3) return;
    let rowLo = Infinity;
    let rowHi = -Infinity;
    for (const v of vertices) {
      rowLo = Math.min(rowLo, v.row);
      rowHi = Math.max(rowHi, v.row);
    }
    rowLo = Math.max(0, Math.floor(rowLo));
    rowHi = Math.min(this.height - 1, Math.ceil(rowHi));
    for (let row = rowLo; row <= rowHi; row++) {
      const y = row + 0.5; // sample pixel centers
      const crossings: number[] = [];
      for (let i = 0; i < vertices.length; i++) {
        const a = vertices[i];
        const b = vertices[(i + 1) % vertices.length];
        if (a.row === b.row) continue;
        if ((y >= Math.min(a.row, b.row)) && (y < Math.max(a.row, b.row))) {
          crossings.push(a.col + ((y - a.row) / (b.row - a.row)) * (b.col - a.col));
        }
      }
      crossings.sort((p, q) => p - q);
      for (let k = 0; k + 1 < crossings.length; k += 2) {
        const colLo = Math.max(0, Math.ceil(crossings[k] - 0.5));
        const colHi = Math.min(this.width - 1, Math.floor(crossings[k + 1] - 0.5));
        for (let col = colLo; col <= colHi; col++) {
          this.set(row, col, code);
        }
      }
    }
  }

  countOf(code: number): number {
    let count = 0;
    for (const value of this.data) {
      if (value === code) count++;
    }
    return count;
  }
}
