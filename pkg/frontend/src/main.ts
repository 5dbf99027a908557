/**
 * Browser entry: wires the canvas, toolbar, and keyboard paging to an
 * AnnotationSession. All segmentation logic lives in the other modules;
 * this file is DOM glue only.
 */

import { ApiClient } from "./api.js";
import { compositeOverlay, LABEL_COLORS, PREDICTION_COLOR } from "./palette.js";
import { decodeRle, BACKGROUND, FLUID, TISSUE } from "./rle.js";
import { AnnotationSession, LabelClass, Tool } from "./session.js";

const api = new ApiClient("");

function byId<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
}

async function loadBscanImage(url: string): Promise<HTMLImageElement> {
  return new Promise((resolve, reject) => {
    const img = new Image();
    img.onload = () => resolve(img);
    img.onerror = () => reject(new Error(`failed to load ${url}`));
    img.src = url;
  });
}

class App {
  session: AnnotationSession | null = null;
  canvas = byId<HTMLCanvasElement>("bscan-canvas");
  status = byId<HTMLDivElement>("status");
  modality = "oct";
  beta = 0.2;
  opacity = 0.6;
  private stroke: { row: number; col: number }[] = [];
  private polygon: { row: number; col: number }[] = [];
  private scanImage: HTMLImageElement | null = null;

  async start(): Promise<void> {
    const volumes = await api.listVolumes();
    const select = byId<HTMLSelectElement>("volume-select");
    select.innerHTML = volumes.map((v) => `<option value="${v}">${v}</option>`).join("");
    select.onchange = () => this.openVolume(select.value);
    if (volumes.length) await this.openVolume(volumes[0]);
    this.bindToolbar();
    this.bindCanvas();
    this.bindKeys();
  }

  async openVolume(volumeId: string): Promise<void> {
    const meta = await api.volumeMeta(volumeId);
    const graderId = byId<HTMLInputElement>("grader-id").value || "g1";
    const [nBscans, height, width] = meta.shape;
    this.session = new AnnotationSession(api, volumeId, graderId, nBscans, height, width);
    this.canvas.width = width;
    this.canvas.height = height;
    await this.session.load();
    await this.redraw();
  }

  bindToolbar(): void {
    for (const tool of ["brush", "polygon", "eraser"] as Tool[]) {
      byId<HTMLButtonElement>(`tool-${tool}`).onclick = () => {
        if (this.session) this.session.activeTool = tool;
        this.setStatus(`tool: ${tool}`);
      };
    }
    const classes: [string, LabelClass][] = [
      ["background", BACKGROUND as LabelClass],
      ["tissue", TISSUE as LabelClass],
      ["fluid", FLUID as LabelClass],
    ];
    for (const [name, code] of classes) {
      byId<HTMLButtonElement>(`class-${name}`).onclick = () => {
        if (this.session) this.session.activeClass = code;
        this.setStatus(`class: ${name}`);
      };
    }
    byId<HTMLButtonElement>("save").onclick = () => this.save();
    byId<HTMLButtonElement>("merge").onclick = () => this.merge();
    byId<HTMLButtonElement>("review").onclick = () => this.review();
    byId<HTMLButtonElement>("next-disagreement").onclick = () => this.jumpDisagreement();
    const opacity = byId<HTMLInputElement>("opacity");
    opacity.oninput = () => {
      this.opacity = Number(opacity.value) / 100;
      void this.redraw();
    };
    const overlay = byId<HTMLSelectElement>("overlay-mode");
    overlay.onchange = () => {
      if (this.session) this.session.overlayMode = overlay.value as never;
      void this.redraw();
    };
    const modality = byId<HTMLSelectElement>("modality");
    modality.onchange = () => {
      this.modality = modality.value;
      void this.redraw(true);
    };
  }

  bindCanvas(): void {
    let painting = false;
    const toPixel = (ev: MouseEvent) => {
      const rect = this.canvas.getBoundingClientRect();
      return {
        row: ((ev.clientY - rect.top) / rect.height) * this.canvas.height,
        col: ((ev.clientX - rect.left) / rect.width) * this.canvas.width,
      };
    };
    this.canvas.onmousedown = (ev) => {
      if (!this.session) return;
      const p = toPixel(ev);
      if (this.session.activeTool === "polygon") {
        this.polygon.push(p);
        return;
      }
      painting = true;
      this.stroke = [p];
    };
    this.canvas.onmousemove = (ev) => {
      if (!painting || !this.session) return;
      this.stroke.push(toPixel(ev));
      this.session.paint(this.stroke.slice(-2));
      void this.redraw();
    };
    window.addEventListener("mouseup", () => {
      if (painting && this.session) {
        this.session.paint(this.stroke);
        void this.redraw();
      }
      painting = false;
      this.stroke = [];
    });
    this.canvas.ondblclick = () => {
      if (this.session?.activeTool === "polygon" && this.polygon.length >= 3) {
        this.session.closePolygon(this.polygon);
        this.polygon = [];
        void this.redraw();
      }
    };
  }

  bindKeys(): void {
    window.addEventListener("keydown", (ev) => {
      if (!this.session) return;
      if (ev.key === "ArrowRight" || ev.key === "PageDown") {
        this.session.nextBscan();
        void this.afterPage();
      } else if (ev.key === "ArrowLeft" || ev.key === "PageUp") {
        this.session.previousBscan();
        void this.afterPage();
      }
    });
  }

  private async afterPage(): Promise<void> {
    if (!this.session) return;
    await this.session.load();
    await this.redraw(true);
    this.setStatus(`B-scan ${this.session.currentBscan + 1}/${this.session.nBscans}`);
  }

  async save(): Promise<void> {
    if (!this.session) return;
    const outcome = await this.session.save();
    if (outcome.status === "conflict") {
      const reload = window.confirm(
        `Save conflict: ${outcome.detail}\nReload the server copy (discarding local edits)?`,
      );
      if (reload) {
        await this.session.load();
        await this.redraw();
      }
      this.setStatus("conflict");
    } else {
      this.setStatus(outcome.status === "saved" ? `saved v${outcome.version}` : "no changes");
    }
  }

  async merge(): Promise<void> {
    if (!this.session) return;
    try {
      const result = await api.merge(this.session.volumeId);
      this.setStatus(`merged: ${result.count} unresolved pixel(s)`);
    } catch (err) {
      this.setStatus(`merge failed: ${(err as Error).message}`);
    }
  }

  async review(): Promise<void> {
    if (!this.session) return;
    try {
      const pixels = await this.session.reviewDisagreements();
      this.setStatus(
        pixels.length ? `${pixels.length} unresolved pixel(s)` : "consensus complete",
      );
      await this.redraw();
    } catch {
      this.setStatus("merge not yet run: press Merge first");
    }
  }

  async jumpDisagreement(): Promise<void> {
    if (!this.session) return;
    const pixel = this.session.nextDisagreement();
    if (pixel) {
      await this.session.load();
      await this.redraw(true);
      this.setStatus(`unresolved pixel at B-scan ${pixel[0]}, row ${pixel[1]}, col ${pixel[2]}`);
    }
  }

  async redraw(refetchImage = false): Promise<void> {
    const session = this.session;
    if (!session) return;
    if (!this.scanImage || refetchImage) {
      const url = api.bscanUrl(
        session.volumeId, session.currentBscan, this.modality,
        this.modality === "fused" ? this.beta : undefined,
      );
      this.scanImage = await loadBscanImage(url);
    }
    const ctx = this.canvas.getContext("2d");
    if (!ctx) return;
    ctx.drawImage(this.scanImage, 0, 0);
    if (session.overlayMode === "none") return;
    const frame = ctx.getImageData(0, 0, this.canvas.width, this.canvas.height);
    let mask = session.buffer.data;
    let colors = LABEL_COLORS;
    if (session.overlayMode === "prediction") {
      const pred = await api.getPrediction(session.volumeId, session.currentBscan);
      if (!pred) {
        this.setStatus("no predictions stored for this volume");
        return;
      }
      mask = decodeRle(pred);
      colors = { [FLUID]: PREDICTION_COLOR } as typeof LABEL_COLORS;
    }
    const blended = compositeOverlay(frame.data, mask, this.opacity, colors);
    ctx.putImageData(new ImageData(blended, this.canvas.width, this.canvas.height), 0, 0);
  }

  setStatus(text: string): void {
    this.status.textContent = text;
  }
}

window.addEventListener("DOMContentLoaded", () => {
  new App().start().catch((err) => {
    byId<HTMLDivElement>("status").textContent = `startup failed: ${err.message}`;
  });
});
