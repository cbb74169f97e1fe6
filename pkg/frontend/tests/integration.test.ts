/**
 * Live round-trip against a running review service (the script
 * run_integration.sh starts one and sets FUSC_SERVICE_URL): relabel one
 * image, name one cluster, export, and check the export reflects both.
 */

import { describe, expect, it } from "vitest";

import { ReviewApi } from "../src/api.js";
import { GalleryState } from "../src/state.js";

const serviceUrl = process.env.FUSC_SERVICE_URL;
const liveDescribe = serviceUrl ? describe : describe.skip;

liveDescribe("live review round-trip", () => {
  it("relabels, names a cluster, and exports through the UI state layer", async () => {
    const api = new ReviewApi(serviceUrl!);
    const state = new GalleryState(api);

    await state.refreshClusters();
    expect(state.clusters.length).toBeGreaterThan(0);

    const target = state.clusters[0]!;
    await state.openCluster(target.cluster_id);
    expect(state.items.length).toBeGreaterThan(0);

    // lowest-confidence item leads the gallery; relabel it
    const suspect = state.items[0]!;
    state.toggleSelect(suspect.image_id);
    const results = await state.applyCorrection("relabel", { label: "Femur" });
    expect(results.every((r) => r.ok)).toBe(true);

    await state.nameActiveCluster("Brain");
    const named = state.clusters.find((c) => c.cluster_id === target.cluster_id);
    expect(named?.name).toBe("Brain");

    const { corrections, manifest } = await state.exportManifest();
    expect(corrections).toBeGreaterThanOrEqual(1);

    const rows = manifest
      .trim()
      .split("\n")
      .map((line) => JSON.parse(line) as { image_id: string; pseudo_label: string });
    const byId = new Map(rows.map((r) => [r.image_id, r.pseudo_label]));
    expect(byId.get(suspect.image_id)).toBe("Femur");

    // every other image of the named cluster takes the cluster name unless corrected
    const other = state.items.find((i) => i.image_id !== suspect.image_id);
    if (other) {
      expect(byId.get(other.image_id)).toBe("Brain");
    }
  });
});
