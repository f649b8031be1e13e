import { afterEach, describe, expect, it, vi } from "vitest";

import {
  ApiError,
  clearLabel,
  exportFinetuneSet,
  getMetrics,
  listVolumes,
  setLabel,
  sliceUrl,
} from "./api.js";

const jsonResponse = (body: unknown, status = 200) =>
  new Response(JSON.stringify(body), {
    status,
    headers: { "Content-Type": "application/json" },
  });

// fetch bodies are one-shot streams, so the stub builds a fresh Response per call
function stubFetch(make: () => Response) {
  const mock = vi.fn(async () => make());
  vi.stubGlobal("fetch", mock);
  return mock;
}

afterEach(() => {
  vi.unstubAllGlobals();
});

describe("query building", () => {
  it("lists volumes with the documented query names", async () => {
    const mock = stubFetch(() => jsonResponse({ total: 0, volumes: [] }));
    await listVolumes({ sort: "id", page: 2, pageSize: 10, threshold: 0.25 });
    expect(mock).toHaveBeenCalledWith(
      "/api/volumes?sort=id&page=2&page_size=10&threshold=0.25",
      undefined,
    );
  });

  it("omits the query string entirely when no options are set", async () => {
    const mock = stubFetch(() => jsonResponse({ total: 0, volumes: [] }));
    await listVolumes();
    expect(mock).toHaveBeenCalledWith("/api/volumes", undefined);
  });

  it("passes the threshold to the metrics endpoint", async () => {
    const mock = stubFetch(() =>
      jsonResponse({ threshold: 0.5, metrics: {}, flagged: 0, total: 0 }),
    );
    const out = await getMetrics(0.15);
    expect(mock).toHaveBeenCalledWith("/api/metrics?threshold=0.15", undefined);
    expect(out.flagged).toBe(0);
  });
});

describe("label overrides", () => {
  it("posts the label as a json body", async () => {
    const mock = stubFetch(() => jsonResponse({ id: "v1", override: "artifact" }));
    await setLabel("v1", "artifact");
    const [url, init] = mock.mock.calls[0] as unknown as [string, RequestInit];
    expect(url).toBe("/api/volumes/v1/label");
    expect(init.method).toBe("POST");
    expect(JSON.parse(init.body as string)).toEqual({ label: "artifact" });
  });

  it("encodes awkward volume ids", async () => {
    const mock = stubFetch(() => jsonResponse({ id: "a b", override: null }));
    await clearLabel("a b");
    const [url, init] = mock.mock.calls[0] as unknown as [string, RequestInit];
    expect(url).toBe("/api/volumes/a%20b/label");
    expect(init.method).toBe("DELETE");
  });
});

describe("export", () => {
  it("uses the server's snake_case field names", async () => {
    const mock = stubFetch(() => jsonResponse({ path: "/tmp/out.jsonl", count: 9 }));
    const out = await exportFinetuneSet({
      fraction: 0.25,
      includeOverrides: false,
      seed: 3,
    });
    const [, init] = mock.mock.calls[0] as unknown as [string, RequestInit];
    expect(JSON.parse(init.body as string)).toEqual({
      fraction: 0.25,
      include_overrides: false,
      seed: 3,
    });
    expect(out.count).toBe(9);
  });

  it("sends an empty body for an overrides-only export", async () => {
    const mock = stubFetch(() => jsonResponse({ path: "x", count: 1 }));
    await exportFinetuneSet();
    const [, init] = mock.mock.calls[0] as unknown as [string, RequestInit];
    expect(JSON.parse(init.body as string)).toEqual({});
  });
});

describe("errors", () => {
  it("surfaces the server's detail string", async () => {
    stubFetch(() => jsonResponse({ detail: "no labels or overrides available" }, 409));
    await expect(getMetrics(0.5)).rejects.toThrowError(ApiError);
    await expect(getMetrics(0.5)).rejects.toMatchObject({
      status: 409,
      detail: "no labels or overrides available",
    });
  });

  it("falls back to the status text for non-json errors", async () => {
    stubFetch(() => new Response("boom", { status: 500, statusText: "Server Error" }));
    await expect(getMetrics(0.5)).rejects.toMatchObject({
      status: 500,
      detail: "Server Error",
    });
  });
});

describe("sliceUrl", () => {
  it("builds the png path", () => {
    expect(sliceUrl("vol-1", 12)).toBe("/api/volumes/vol-1/slices/12.png");
    expect(sliceUrl("a b", 0)).toBe("/api/volumes/a%20b/slices/0.png");
  });
});
