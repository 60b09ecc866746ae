import { describe, expect, it } from "vitest";
import { SseParser, streamSse } from "../src/sse.js";

function feedInChunks(text: string, size: number) {
  const parser = new SseParser();
  const events = [];
  for (let i = 0; i < text.length; i += size) {
    events.push(...parser.push(text.slice(i, i + size)));
  }
  return events;
}

const SAMPLE =
  'event: token\ndata: {"index": 0, "text": "你"}\n\n' +
  'event: token\ndata: {"index": 1, "text": "好"}\n\n' +
  'event: done\ndata: {"text": "你好"}\n\n';

describe("SseParser", () => {
  it("parses complete events", () => {
    const events = new SseParser().push(SAMPLE);
    expect(events.map((e) => e.event)).toEqual(["token", "token", "done"]);
    expect((events[0].data as any).text).toBe("你");
  });

  it("preserves order at every chunk size", () => {
    for (const size of [1, 2, 3, 7, 16, 64]) {
      const events = feedInChunks(SAMPLE, size);
      expect(events.map((e) => e.event)).toEqual(["token", "token", "done"]);
      expect(events.slice(0, 2).map((e) => (e.data as any).index)).toEqual([0, 1]);
    }
  });

  it("handles CRLF line endings", () => {
    const events = new SseParser().push('event: done\r\ndata: {"ok": true}\r\n\r\n');
    expect(events).toHaveLength(1);
    expect((events[0].data as any).ok).toBe(true);
  });

  it("joins multi-line data fields", () => {
    const events = new SseParser().push("data: line1\ndata: line2\n\n");
    expect(events[0].data).toBe("line1\nline2");
  });

  it("ignores comments and empty events", () => {
    const events = new SseParser().push(": keepalive\n\n\nevent: token\ndata: 1\n\n");
    expect(events).toHaveLength(1);
    expect(events[0].data).toBe(1);
  });

  it("defaults the event name to message", () => {
    const events = new SseParser().push("data: plain\n\n");
    expect(events[0].event).toBe("message");
  });
});

describe("streamSse", () => {
  it("decodes a byte stream split mid-codepoint", async () => {
    const bytes = new TextEncoder().encode(SAMPLE);
    const mid = 20; // splits inside the first multi-byte character's JSON
    const stream = new ReadableStream<Uint8Array>({
      start(controller) {
        controller.enqueue(bytes.slice(0, mid));
        controller.enqueue(bytes.slice(mid));
        controller.close();
      },
    });
    const events = [];
    for await (const event of streamSse(stream)) events.push(event);
    expect(events.map((e) => e.event)).toEqual(["token", "token", "done"]);
    expect((events[2].data as any).text).toBe("你好");
  });
});
