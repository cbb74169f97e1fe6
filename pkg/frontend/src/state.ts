/**
 * Gallery view state and the pending-correction queue.
 *
 * Corrections are applied optimistically to the local item cache, queued,
 * and submitted strictly in order; a rejected submission rolls the affected
 * item back to its last server-acknowledged form. The server stays the only
 * authority: after any queue drain the local items match a fresh GET.
 */

import { ReviewApi } from "./api.js";
import {
  ClusterItem,
  ClusterSummary,
  CorrectionRequest,
  SortOrder,
} from "./types.js";

export interface QueueResult {
  correction: CorrectionRequest;
  ok: boolean;
  error?: string;
}

interface PendingEntry {
  correction: CorrectionRequest;
  /** Snapshot for rollback; null when the item is not in the current page. */
  snapshot: ClusterItem | null;
}

export class GalleryState {
  activeCluster: number | null = null;
  sort: SortOrder = "confidence_asc";
  page = 0;
  pageSize = 50;
  total = 0;
  clusters: ClusterSummary[] = [];
  items: ClusterItem[] = [];
  selection = new Set<string>();
  lastError: string | null = null;

  private queue: PendingEntry[] = [];
  private draining = false;
  private listeners: (() => void)[] = [];

  constructor(private api: ReviewApi) {}

  onChange(listener: () => void): void {
    this.listeners.push(listener);
  }

  private notify(): void {
    for (const listener of this.listeners) listener();
  }

  get pendingCount(): number {
    return this.queue.length;
  }

  async refreshClusters(): Promise<void> {
    this.clusters = await this.api.listClusters();
    this.notify();
  }

  async openCluster(clusterId: number, page = 0): Promise<void> {
    const result = await this.api.getClusterItems(clusterId, page, this.pageSize, this.sort);
    this.activeCluster = clusterId;
    this.page = result.page;
    this.total = result.total;
    this.items = result.items;
    this.selection.clear();
    this.notify();
  }

  /** Appends the next server page; true when more pages remain after it. */
  async loadNextPage(): Promise<boolean> {
    if (this.activeCluster === null) return false;
    const next = this.page + 1;
    const result = await this.api.getClusterItems(
      this.activeCluster,
      next,
      this.pageSize,
      this.sort,
    );
    if (result.items.length === 0) return false;
    this.page = next;
    this.items = this.items.concat(result.items);
    this.notify();
    return this.items.length < result.total;
  }

  toggleSelect(imageId: string): void {
    if (this.selection.has(imageId)) {
      this.selection.delete(imageId);
    } else {
      this.selection.add(imageId);
    }
    this.notify();
  }

  private findItem(imageId: string): ClusterItem | undefined {
    return this.items.find((item) => item.image_id === imageId);
  }

  private applyOptimistic(correction: CorrectionRequest): ClusterItem | null {
    const item = this.findItem(correction.image_id);
    if (!item) return null;
    const snapshot: ClusterItem = { ...item };
    if (correction.action === "relabel" && correction.label) {
      item.effective_label = correction.label;
      item.flagged = false;
    } else if (correction.action === "flag_outlier") {
      item.flagged = true;
      item.effective_label = "";
    } else if (correction.action === "move_to_cluster") {
      this.items = this.items.filter((it) => it.image_id !== correction.image_id);
      this.total -= 1;
    }
    this.notify();
    return snapshot;
  }

  private rollback(entry: PendingEntry): void {
    if (!entry.snapshot) return;
    const current = this.findItem(entry.correction.image_id);
    if (current) {
      Object.assign(current, entry.snapshot);
    } else {
      this.items.push({ ...entry.snapshot });
      this.total += 1;
    }
    this.notify();
  }

  /**
   * Queue one correction per selected image (or an explicit id list) and
   * drain the queue in submission order.
   */
  async applyCorrection(
    action: CorrectionRequest["action"],
    options: { label?: string; clusterId?: number; imageIds?: string[]; annotator?: string } = {},
  ): Promise<QueueResult[]> {
    const targets = options.imageIds ?? [...this.selection];
    if (targets.length === 0) {
      throw new Error("nothing selected");
    }
    for (const imageId of targets) {
      const correction: CorrectionRequest = {
        image_id: imageId,
        action,
        ...(options.label !== undefined ? { label: options.label } : {}),
        ...(options.clusterId !== undefined ? { cluster_id: options.clusterId } : {}),
        ...(options.annotator ? { annotator: options.annotator } : {}),
      };
      this.queue.push({ correction, snapshot: this.applyOptimistic(correction) });
    }
    this.selection.clear();
    return this.drain();
  }

  /** Submit queued corrections one at a time, oldest first. */
  private async drain(): Promise<QueueResult[]> {
    if (this.draining) return [];
    this.draining = true;
    const results: QueueResult[] = [];
    try {
      while (this.queue.length > 0) {
        const entry = this.queue[0]!;
        try {
          await this.api.submitCorrection(entry.correction);
          results.push({ correction: entry.correction, ok: true });
        } catch (error) {
          this.rollback(entry);
          const message = error instanceof Error ? error.message : String(error);
          this.lastError = message;
          results.push({ correction: entry.correction, ok: false, error: message });
        }
        this.queue.shift();
      }
    } finally {
      this.draining = false;
      this.notify();
    }
    return results;
  }

  async nameActiveCluster(name: string): Promise<void> {
    if (this.activeCluster === null) {
      throw new Error("no cluster open");
    }
    await this.api.nameCluster(this.activeCluster, name);
    await this.refreshClusters();
    await this.openCluster(this.activeCluster, 0);
  }

  /**
   * Export flow: fetch the correction-count summary first, then the
   * corrected manifest itself.
   */
  async exportManifest(): Promise<{ corrections: number; manifest: string }> {
    const summary = await this.api.exportSummary();
    const manifest = await this.api.exportManifest();
    return { corrections: summary.corrections, manifest };
  }
}
