import { describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { FLUID, TISSUE, encodeRle } from "../src/rle.js";
import { AnnotationSession } from "../src/session.js";

/**
 * End-to-end checks against a live annotation service. Run the backend
 * over a small dataset and point OCTFLUID_API_URL at it:
 *
 *    octfluid serve --data-dir <dir> --port 870 &
 *    OCTFLUID_API_URL=http://127.0.0.1:8700 npm test
 *
 * Skipped when the variable is unset so the suite works offline.
 */

const baseUrl = process.env.OCTFLUID_API_URL;

describe.skipIf(!baseUrl)("live service integration", () => {
  const api = new ApiClient(baseUrl!, (input, init) => fetch(input, init));

  async function openSession(grader: string): Promise<AnnotationSession> {
    const volumes = await api.listVolumes();
    expect(volumes.length).toBeGreaterThan(0);
    const meta = await api.volumeMeta(volumes[0]);
    const [n, h, w] = meta.shape;
    return new AnnotationSession(api, volumes[0], grader, n, h, w);
  }

  it("draw, save, reload round-trips the identical RLE", async () => {
    const session = await openSession("it-g1");
    session.activeClass = FLUID;
    session.paint([{ row: 5, col: 5 }, { row: 9, col: 11 }], 2);
    const drawnRle = encodeRle(session.buffer.data, session.height, session.width);

    const outcome = await session.save();
    expect(outcome.status).toBe("saved");

    const fresh = await openSession("it-g1");
    await fresh.load();
    const reloaded = encodeRle(fresh.buffer.data, fresh.height, fresh.width);
    expect(reloaded.runs).toEqual(drawnRle.runs);
  });

  it("concurrent saves: one success, one surfaced conflict", async () => {
    const alice = await openSession("it-g2");
    const bob = await openSession("it-g2");
    await alice.load().catch(() => undefined);
    await bob.load().catch(() => undefined);
    alice.activeClass = FLUID;
    bob.activeClass = TISSUE;
    alice.paint([{ row: 2, col: 2 }]);
    bob.paint([{ row: 12, col: 12 }]);
    const outcomes = [await alice.save(), await bob.save()];
    expect(outcomes.map((o) => o.status).sort()).toEqual(["conflict", "saved"]);
  });

  it("consensus workflow drives a three-way tie to zero unresolved", async () => {
    const volumes = await api.listVolumes();
    const meta = await api.volumeMeta(volumes[0]);
    const [n, h, w] = meta.shape;

    // three graders agree everywhere except one pixel with three-way split
    for (const [grader, code] of [["c-g1", 0], ["c-g2", 1], ["c-g3", 2]] as const) {
      for (let i = 0; i < n; i++) {
        const plane = new Uint8Array(h * w);
        if (i === 1) plane[7 * w + 7] = code;
        const current = await api.getLabels(volumes[0], grader, i);
        const version = await api.putLabels(
          volumes[0], grader, i, encodeRle(plane, h, w), current?.version ?? 0,
        );
        expect(version).toBeGreaterThan(0);
      }
    }

    const merge = await api.merge(volumes[0]);
    expect(merge.count).toBe(1);
    expect(merge.unresolved).toEqual([[1, 7, 7]]);

    const session = await openSession("c-g1");
    const pixels = await session.reviewDisagreements();
    expect(pixels.length).toBe(1);
    const remaining = await session.resolveCurrent(FLUID);
    expect(remaining).toBe(0);
  });
});
