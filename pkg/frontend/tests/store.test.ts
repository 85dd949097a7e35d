import { beforeEach, describe, expect, it } from "vitest";

import { Store } from "../src/store";

describe("Store", () => {
  beforeEach(() => localStorage.clear());

  it("persists state across instances (per browser profile)", () => {
    const a = new Store();
    a.update({ baseUrl: "http://gw", token: "tok-1" });
    a.pushMessage({ role: "user", content: "hi" });
    const b = new Store();
    expect(b.get().baseUrl).toBe("http://gw");
    expect(b.get().chat.history).toEqual([{ role: "user", content: "hi" }]);
  });

  it("enforces alternating user/assistant roles", () => {
    const store = new Store();
    store.pushMessage({ role: "user", content: "one" });
    expect(() => store.pushMessage({ role: "user", content: "two" })).toThrow();
    store.pushMessage({ role: "assistant", content: "ok" });
    store.pushMessage({ role: "user", content: "two" });
    expect(store.get().chat.history).toHaveLength(3);
  });

  it("amends the trailing assistant message during streaming", () => {
    const store = new Store();
    store.pushMessage({ role: "user", content: "q" });
    store.pushMessage({ role: "assistant", content: "" });
    store.amendAssistant("partial");
    store.amendAssistant("partial answer");
    expect(store.get().chat.history[1].content).toBe("partial answer");
    expect(() => {
      const fresh = new Store();
      fresh.resetChat();
      fresh.amendAssistant("x");
    }).toThrow();
  });

  it("notifies subscribers and supports unsubscribe", () => {
    const store = new Store();
    let calls = 0;
    const off = store.subscribe(() => (calls += 1));
    store.update({ token: "t" });
    off();
    store.update({ token: "u" });
    expect(calls).toBe(1);
  });

  it("survives corrupted stored state", () => {
    localStorage.setItem("fedgate-console", "{broken json");
    const store = new Store();
    expect(store.get().token).toBe("");
  });
});
