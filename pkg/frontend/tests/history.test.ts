import { describe, expect, it } from "vitest";

import { QueryHistory } from "../src/history.js";

describe("QueryHistory", () => {
  it("navigates back and forward", () => {
    const h = new QueryHistory();
    h.push("a");
    h.push("b");
    h.push("c");
    expect(h.current()).toBe("c");
    expect(h.back()).toBe("b");
    expect(h.back()).toBe("a");
    expect(h.canBack).toBe(false);
    expect(h.back()).toBeNull();
    expect(h.forward()).toBe("b");
    expect(h.forward()).toBe("c");
    expect(h.forward()).toBeNull();
  });

  it("a new push truncates the forward branch", () => {
    const h = new QueryHistory();
    h.push("a");
    h.push("b");
    h.back();
    h.push("c");
    expect(h.canForward).toBe(false);
    expect(h.current()).toBe("c");
    expect(h.back()).toBe("a");
    expect(h.length).toBe(2);
  });

  it("collapses consecutive duplicates", () => {
    const h = new QueryHistory();
    h.push("a");
    h.push("a");
    expect(h.length).toBe(1);
  });
});
