/**
 * DOM layer: cluster sidebar, thumbnail gallery (ascending confidence so
 * likely outliers lead), selection, correction actions, export flow.
 *
 * All state transitions live in GalleryState; this module only renders and
 * forwards events.
 */

import { ReviewApi } from "./api.js";
import { bindShortcuts } from "./keyboard.js";
import { GalleryState } from "./state.js";

const VIEW_LABELS = [
  "Brain", "Profile", "Orbit", "LipsNose", "RVOT", "LVOT", "FourChamber",
  "ThreeVesselView", "Abdomen", "Kidney", "Diaphragm", "CordInsertion",
  "Spine", "Feet", "Femur",
];

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

export class App {
  private state: GalleryState;
  private api: ReviewApi;
  private root: HTMLElement;
  private banner: HTMLElement;

  constructor(root: HTMLElement, baseUrl: string) {
    this.api = new ReviewApi(baseUrl);
    this.state = new GalleryState(this.api);
    this.root = root;
    this.banner = el("div", "banner");
    this.state.onChange(() => this.render());
  }

  async start(): Promise<void> {
    this.root.append(this.banner);
    // infinite scroll: pull the next server page as the bottom approaches
    window.addEventListener("scroll", () => {
      const nearBottom =
        window.innerHeight + window.scrollY >= document.body.offsetHeight - 200;
      if (nearBottom && this.state.items.length < this.state.total) {
        void this.state.loadNextPage().catch((e) => this.showError(e));
      }
    });
    bindShortcuts(document, {
      flagOutlier: () => void this.flagSelection(),
      relabelPrompt: () => void this.relabelSelection(),
      nameClusterPrompt: () => void this.nameCluster(),
      nextPage: () => void this.state.loadNextPage().catch((e) => this.showError(e)),
      clearSelection: () => {
        this.state.selection.clear();
        this.render();
      },
    });
    try {
      await this.state.refreshClusters();
      const first = this.state.clusters[0];
      if (first) await this.state.openCluster(first.cluster_id);
    } catch (error) {
      this.showError(error);
    }
    this.render();
  }

  private showError(error: unknown): void {
    const message = error instanceof Error ? error.message : String(error);
    this.banner.textContent = `service error: ${message} (retry with R or reload)`;
    this.banner.classList.add("error");
  }

  private async flagSelection(): Promise<void> {
    if (this.state.selection.size === 0) return;
    const results = await this.state.applyCorrection("flag_outlier");
    const failed = results.filter((r) => !r.ok);
    if (failed.length > 0) this.showError(new Error(failed[0]!.error ?? "rejected"));
  }

  private async relabelSelection(): Promise<void> {
    if (this.state.selection.size === 0) return;
    const label = window.prompt(`Relabel as (${VIEW_LABELS.join(", ")}):`);
    if (!label) return;
    const results = await this.state.applyCorrection("relabel", { label });
    const failed = results.filter((r) => !r.ok);
    if (failed.length > 0) this.showError(new Error(failed[0]!.error ?? "rejected"));
  }

  private async nameCluster(): Promise<void> {
    const name = window.prompt("Cluster name (vocabulary label):");
    if (!name) return;
    try {
      await this.state.nameActiveCluster(name);
    } catch (error) {
      this.showError(error);
    }
  }

  private async exportFlow(): Promise<void> {
    try {
      const { corrections, manifest } = await this.state.exportManifest();
      const proceed = window.confirm(
        corrections === 0
          ? "No corrections recorded; export will equal the input labels. Download?"
          : `${corrections} correction(s) will be applied. Download corrected manifest?`,
      );
      if (!proceed) return;
      const blob = new Blob([manifest], { type: "application/jsonl" });
      const link = el("a");
      link.href = URL.createObjectURL(blob);
      link.download = "corrected_manifest.jsonl";
      link.click();
      URL.revokeObjectURL(link.href);
    } catch (error) {
      this.showError(error);
    }
  }

  private render(): void {
    for (const child of [...this.root.children]) {
      if (child !== this.banner) child.remove();
    }

    const layout = el("div", "layout");
    layout.append(this.renderSidebar(), this.renderGallery());
    this.root.append(layout);
  }

  private renderSidebar(): HTMLElement {
    const sidebar = el("nav", "sidebar");
    const exportButton = el("button", "export", "Export corrected manifest");
    exportButton.addEventListener("click", () => void this.exportFlow());
    sidebar.append(exportButton);

    for (const summary of this.state.clusters) {
      const entry = el("button", "cluster-entry");
      if (summary.cluster_id === this.state.activeCluster) entry.classList.add("active");
      const label = summary.name ? ` "${summary.name}"` : "";
      const minConf =
        summary.min_confidence === null ? "-" : summary.min_confidence.toFixed(2);
      entry.textContent = `#${summary.cluster_id}${label} (${summary.size}, min ${minConf})`;
      entry.addEventListener("click", () =>
        void this.state.openCluster(summary.cluster_id).catch((e) => this.showError(e)),
      );
      sidebar.append(entry);
    }
    return sidebar;
  }

  private renderGallery(): HTMLElement {
    const gallery = el("main", "gallery");
    if (this.state.activeCluster === null) {
      gallery.append(el("p", "empty", "No cluster selected."));
      return gallery;
    }
    const header = el("header");
    header.append(
      el(
        "h2",
        undefined,
        `Cluster ${this.state.activeCluster} - ${this.state.total} images, lowest confidence first`,
      ),
    );
    const hint = el(
      "p",
      "hint",
      "click: select | x: flag outlier | r: relabel | n: name cluster | j: more",
    );
    header.append(hint);
    if (this.state.pendingCount > 0) {
      header.append(el("p", "pending", `${this.state.pendingCount} correction(s) in flight`));
    }
    gallery.append(header);

    if (this.state.items.length === 0) {
      gallery.append(el("p", "empty", "This cluster is empty."));
      return gallery;
    }

    const grid = el("div", "grid");
    for (const item of this.state.items) {
      const tile = el("figure", "tile");
      if (this.state.selection.has(item.image_id)) tile.classList.add("selected");
      if (item.flagged) tile.classList.add("flagged");
      const img = el("img");
      img.src = this.api.thumbnailUrl(item.image_id);
      img.loading = "lazy";
      img.alt = item.image_id;
      const caption = el(
        "figcaption",
        undefined,
        `${item.confidence.toFixed(3)} ${item.effective_label || "(unlabeled)"}`,
      );
      tile.append(img, caption);
      tile.addEventListener("click", () => this.state.toggleSelect(item.image_id));
      grid.append(tile);
    }
    gallery.append(grid);

    if (this.state.items.length < this.state.total) {
      const more = el("button", "more", "Load more");
      more.addEventListener("click", () =>
        void this.state.loadNextPage().catch((e) => this.showError(e)),
      );
      gallery.append(more);
    }
    return gallery;
  }
}

export function mount(): void {
  const root = document.getElementById("app");
  if (!root) throw new Error("missing #app element");
  const baseUrl = new URLSearchParams(window.location.search).get("service") ?? "";
  void new App(root, baseUrl).start();
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  mount();
}
