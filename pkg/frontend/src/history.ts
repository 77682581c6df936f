/** Linear query history with back/forward navigation. */

export class QueryHistory {
  private entries: string[] = [];
  private pos = -1;

  /** Record a new query; truncates any forward branch. */
  push(signature: string): void {
    if (this.entries[this.pos] === signature) return;
    this.entries = this.entries.slice(0, this.pos + 1);
    this.entries.push(signature);
    this.pos = this.entries.length - 1;
  }

  get canBack(): boolean {
    return this.pos > 0;
  }

  get canForward(): boolean {
    return this.pos < this.entries.length - 1;
  }

  back(): string | null {
    if (!this.canBack) return null;
    this.pos -= 1;
    return this.entries[this.pos];
  }

  forward(): string | null {
    if (!this.canForward) return null;
    this.pos += 1;
    return this.entries[this.pos];
  }

  current(): string | null {
    return this.pos >= 0 ? this.entries[this.pos] : null;
  }

  get length(): number {
    return this.entries.length;
  }
}
