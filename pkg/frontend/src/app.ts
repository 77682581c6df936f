/**
 * Interactive search client: compose attribute queries (with per-group
 * co-location toggles), browse the ranked gallery, overlay per-factor
 * heat maps, and navigate the query history. Every edit re-queries the
 * service in place; scores and ordering are shown exactly as returned.
 */

import { ApiClient, isAbort } from "./api.js";
import { renderOverlay } from "./heatmap.js";
import { QueryHistory } from "./history.js";
import { QueryModel } from "./query.js";
import type { SearchResult } from "./types.js";

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
};

export class SearchApp {
  private query = new QueryModel();
  private history = new QueryHistory();
  private factorNames: string[] = [];
  private selectedImage: string | null = null;

  constructor(private api: ApiClient) {}

  async start(): Promise<void> {
    this.factorNames = await this.api.factors();
    const select = $<HTMLSelectElement>("factor-select");
    for (const name of this.factorNames) {
      const opt = document.createElement("option");
      opt.value = name;
      opt.textContent = name;
      select.appendChild(opt);
    }
    $<HTMLButtonElement>("add-group").onclick = () => {
      this.query.addGroup([select.value]);
      this.queryChanged();
    };
    $<HTMLButtonElement>("add-factor").onclick = () => {
      if (this.query.isEmpty) this.query.addGroup([]);
      this.query.addFactor(this.query.groups.length - 1, select.value);
      this.queryChanged();
    };
    $<HTMLButtonElement>("history-back").onclick = () => this.navigate(this.history.back());
    $<HTMLButtonElement>("history-forward").onclick = () =>
      this.navigate(this.history.forward());
    this.renderGroups();
  }

  /** Refine loop: record the edit and re-issue the search, no reload. */
  private queryChanged(): void {
    this.renderGroups();
    if (this.query.isEmpty) {
      this.renderResults([]);
      return;
    }
    this.history.push(this.query.signature());
    void this.runSearch();
  }

  private navigate(signature: string | null): void {
    if (signature === null) return;
    this.query = QueryModel.fromSignature(signature);
    this.renderGroups();
    void this.runSearch();
  }

  private async runSearch(): Promise<void> {
    try {
      const results = await this.api.search(this.query.toBody());
      this.renderResults(results);
    } catch (err) {
      if (isAbort(err)) return; // superseded by a newer query
      $("status").textContent = String(err);
    }
  }

  private renderGroups(): void {
    const box = $("groups");
    box.replaceChildren();
    this.query.groups.forEach((group, gi) => {
      const chip = document.createElement("div");
      chip.className = "group";
      const label = document.createElement("span");
      label.textContent = group.factors.join(" , ") || "(empty)";
      chip.appendChild(label);

      const toggle = document.createElement("label");
      const cb = document.createElement("input");
      cb.type = "checkbox";
      cb.checked = group.colocated;
      cb.disabled = group.factors.length < 2;
      cb.onchange = () => {
        this.query.toggleColocated(gi);
        this.queryChanged();
      };
      toggle.append(cb, document.createTextNode(" co-located"));
      chip.appendChild(toggle);

      const drop = document.createElement("button");
      drop.textContent = "remove";
      drop.onclick = () => {
        this.query.removeGroup(gi);
        this.queryChanged();
      };
      chip.appendChild(drop);
      box.appendChild(chip);
    });
    $("query-text").textContent = this.query.describe();
    $<HTMLButtonElement>("history-back").disabled = !this.history.canBack;
    $<HTMLButtonElement>("history-forward").disabled = !this.history.canForward;
  }

  /** Gallery in exactly the service's order, scores verbatim. */
  private renderResults(results: SearchResult[]): void {
    const list = $("results");
    list.replaceChildren();
    for (const r of results) {
      const row = document.createElement("li");
      const link = document.createElement("a");
      link.href = "#";
      link.textContent = `${r.image_id}  (score ${r.score})`;
      link.onclick = (ev) => {
        ev.preventDefault();
        this.selectedImage = r.image_id;
        void this.showOverlays(r.image_id);
      };
      row.appendChild(link);
      list.appendChild(row);
    }
    $("status").textContent = `${results.length} results`;
    if (this.selectedImage && !results.some((r) => r.image_id === this.selectedImage)) {
      this.selectedImage = null;
      $("overlays").replaceChildren();
    }
  }

  /** One canvas per queried factor, heat map composited over the tile. */
  private async showOverlays(imageId: string): Promise<void> {
    const box = $("overlays");
    box.replaceChildren();
    const factors = [...new Set(this.query.groups.flatMap((g) => g.factors))];
    for (const factor of factors) {
      try {
        const hm = await this.api.heatmap(imageId, factor);
        const canvas = document.createElement("canvas");
        canvas.width = hm.width;
        canvas.height = hm.height;
        const ctx = canvas.getContext("2d");
        if (!ctx) continue;
        const rgba = renderOverlay(hm.values, hm.width, hm.height);
        ctx.putImageData(new ImageData(rgba, hm.width, hm.height), 0, 0);
        const fig = document.createElement("figure");
        const cap = document.createElement("figcaption");
        cap.textContent = `${imageId} / ${factor}`;
        fig.append(canvas, cap);
        box.appendChild(fig);
      } catch (err) {
        if (!isAbort(err)) $("status").textContent = String(err);
      }
    }
  }
}

if (typeof document !== "undefined" && document.getElementById("factor-select")) {
  const base = (window as { SEMFACTOR_API?: string }).SEMFACTOR_API ?? "";
  void new SearchApp(new ApiClient(base)).start();
}
