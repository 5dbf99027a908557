/**
 * Grader session state machine: per-B-scan edit buffers, explicit saves
 * with optimistic versioning, and the consensus-review workflow over the
 * merged map's unresolved pixels.
 */

import { ApiClient, ConflictError } from "./api.js";
import { MaskBuffer, Point } from "./mask.js";
import { BACKGROUND, FLUID, TISSUE, decodeRle, encodeRle } from "./rle.js";

export type Tool = "brush" | "polygon" | "eraser";
export type LabelClass = typeof BACKGROUND | typeof TISSUE | typeof FLUID;
export type OverlayMode = "none" | "my-labels" | "merged" | "prediction" | "disagreement";

export interface SaveOutcome {
  status: "saved" | "conflict" | "clean";
  version?: number;
  detail?: string;
}

interface BscanState {
  buffer: MaskBuffer;
  saved: MaskBuffer; // last acknowledged server state
  version: number;
}

export class AnnotationSession {
  currentBscan = 0;
  activeTool: Tool = "brush";
  activeClass: LabelClass = FLUID;
  overlayMode: OverlayMode = "my-labels";
  brushRadius = 3;

  private states = new Map<number, BscanState>();
  private disagreements: [number, number, number][] = [];
  private disagreementCursor = -1;

  constructor(
    readonly api: ApiClient,
    readonly volumeId: string,
    readonly graderId: string,
    readonly nBscans: number,
    readonly height: number,
    readonly width: number,
  ) {}

  /** Unsaved edits exist on the current B-scan. */
  get dirty(): boolean {
    const state = this.states.get(this.currentBscan);
    return state !== undefined && !state.buffer.equals(state.saved);
  }

  get version(): number {
    return this.states.get(this.currentBscan)?.version ?? 0;
  }

  private blankState(): BscanState {
    return {
      buffer: new MaskBuffer(this.height, this.width),
      saved: new MaskBuffer(this.height, this.width),
      version: 0,
    };
  }

  /** Fetch the server copy of the current B-scan into the edit buffer. */
  async load(): Promise<MaskBuffer> {
    const read = await this.api.getLabels(this.volumeId, this.graderId, this.currentBscan);
    const state = this.blankState();
    if (read !== null) {
      const pixels = decodeRle({ shape: read.shape, runs: read.runs });
      state.buffer = new MaskBuffer(this.height, this.width, pixels);
      state.saved = state.buffer.clone();
      state.version = read.version;
    }
    this.states.set(this.currentBscan, state);
    return state.buffer;
  }

  private state(): BscanState {
    let state = this.states.get(this.currentBscan);
    if (state === undefined) {
      state = this.blankState();
      this.states.set(this.currentBscan, state);
    }
    return state;
  }

  get buffer(): MaskBuffer {
    return this.state().buffer;
  }

  /** Apply a brush/eraser stroke with the active tool and class. */
  paint(stroke: Point[], radius: number = this.brushRadius): MaskBuffer {
    const state = this.state();
    if (this.activeTool === "eraser") {
      state.buffer.erase(stroke, radius);
    } else if (this.activeTool === "brush") {
      state.buffer.paintStroke(stroke, radius, this.activeClass);
    } else {
      throw new Error("polygon tool paints via closePolygon()");
    }
    return state.buffer;
  }

  closePolygon(vertices: Point[]): MaskBuffer {
    if (this.activeTool !== "polygon") {
      throw new Error("polygon tool is not active");
    }
    const state = this.state();
    state.buffer.fillPolygon(vertices, this.activeClass);
    return state.buffer;
  }

  /**
   * PUT the current buffer with the expected version. A concurrent write
   * surfaces as a conflict outcome; the local buffer is retained either
   * way and `dirty` clears only on success.
   */
  async save(): Promise<SaveOutcome> {
    const state = this.state();
    if (state.buffer.equals(state.saved)) {
      return { status: "clean" };
    }
    const mask = encodeRle(state.buffer.data, this.height, this.width);
    try {
      const version = await this.api.putLabels(
        this.volumeId, this.graderId, this.currentBscan, mask, state.version,
      );
      state.version = version;
      state.saved = state.buffer.clone();
      return { status: "saved", version };
    } catch (err) {
      if (err instanceof ConflictError) {
        return { status: "conflict", detail: err.message };
      }
      throw err; // network failure: buffer stays, caller may retry
    }
  }

  goTo(index: number): number {
    this.currentBscan = Math.min(this.nBscans - 1, Math.max(0, index));
    return this.currentBscan;
  }

  nextBscan(): number {
    return this.goTo(this.currentBscan + 1);
  }

  previousBscan(): number {
    return this.goTo(this.currentBscan - 1);
  }

  /** Pull the unresolved-pixel list after a server-side merge. */
  async reviewDisagreements(): Promise<[number, number, number][]> {
    const result = await this.api.unresolved(this.volumeId);
    this.disagreements = result.unresolved;
    this.disagreementCursor = this.disagreements.length ? 0 : -1;
    this.overlayMode = "disagreement";
    return this.disagreements;
  }

  get currentDisagreement(): [number, number, number] | null {
    return this.disagreementCursor >= 0 ? this.disagreements[this.disagreementCursor] : null;
  }

  /** Jump the view to the next flagged pixel, cycling through B-scans. */
  nextDisagreement(): [number, number, number] | null {
    if (!this.disagreements.length) return null;
    this.disagreementCursor = (this.disagreementCursor + 1) % this.disagreements.length;
    const [bscan] = this.disagreements[this.disagreementCursor];
    this.goTo(bscan);
    return this.disagreements[this.disagreementCursor];
  }

  /** Post a consensus code for one flagged pixel; returns remaining count. */
  async resolveCurrent(code: LabelClass): Promise<number> {
    const pixel = this.currentDisagreement;
    if (pixel === null) {
      throw new Error("no disagreement selected");
    }
    const remaining = await this.api.postResolutions(this.volumeId, [[...pixel, code]]);
    this.disagreements.splice(this.disagreementCursor, 1);
    if (this.disagreementCursor >= this.disagreements.length) {
      this.disagreementCursor = this.disagreements.length ? 0 : -1;
    }
    return remaining;
  }
}
