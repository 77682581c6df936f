/**
 * Query composition model: an ordered list of factor groups, each with a
 * co-location flag. Groups combine independently on the service side;
 * a co-located group requires its factors on the same pixels.
 */

import type { SearchRequestBody } from "./types.js";

export interface QueryGroupState {
  factors: string[];
  colocated: boolean;
}

export class QueryModel {
  groups: QueryGroupState[] = [];

  get isEmpty(): boolean {
    return this.groups.length === 0;
  }

  addGroup(factors: string[] = [], colocated = true): number {
    this.groups.push({ factors: [...factors], colocated });
    return this.groups.length - 1;
  }

  removeGroup(index: number): void {
    this.groups.splice(index, 1);
  }

  addFactor(index: number, name: string): void {
    const g = this.groups[index];
    if (!g) throw new RangeError(`no group ${index}`);
    if (!g.factors.includes(name)) g.factors.push(name);
  }

  removeFactor(index: number, name: string): void {
    const g = this.groups[index];
    if (!g) return;
    g.factors = g.factors.filter((f) => f !== name);
    if (g.factors.length === 0) this.removeGroup(index);
  }

  /** Flip exactly one group's co-location flag; other groups untouched. */
  toggleColocated(index: number): void {
    const g = this.groups[index];
    if (!g) throw new RangeError(`no group ${index}`);
    g.colocated = !g.colocated;
  }

  /** Request body; single-factor groups are always sent co-located. */
  toBody(limit?: number): SearchRequestBody {
    const groups = this.groups
      .filter((g) => g.factors.length > 0)
      .map((g) => ({
        factors: [...g.factors],
        colocated: g.factors.length > 1 ? g.colocated : true,
      }));
    const body: SearchRequestBody = { groups };
    if (limit !== undefined) body.limit = limit;
    return body;
  }

  /** Canonical string form, used for history entries and dedupe. */
  signature(): string {
    return JSON.stringify(this.toBody().groups);
  }

  clone(): QueryModel {
    const q = new QueryModel();
    q.groups = this.groups.map((g) => ({ factors: [...g.factors], colocated: g.colocated }));
    return q;
  }

  static fromSignature(sig: string): QueryModel {
    const q = new QueryModel();
    const groups = JSON.parse(sig) as QueryGroupState[];
    for (const g of groups) q.addGroup(g.factors, g.colocated);
    return q;
  }

  /** Compact human-readable form, e.g. "Red-Shirt + Blue-Trousers". */
  describe(): string {
    return this.groups
      .filter((g) => g.factors.length > 0)
      .map((g) => g.factors.join(g.colocated ? "-" : " & "))
      .join(" + ");
  }
}
