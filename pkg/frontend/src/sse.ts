export interface SseEvent {
  event: string;
  data: unknown;
}

/**
 * Incremental server-sent-events parser. Feed decoded text chunks in any
 * split (mid-line, mid-event); completed events come back in arrival
 * order, never reordered.
 */
export class SseParser {
  private buffer = "";
  private eventName = "message";
  private dataLines: string[] = [];

  push(chunk: string): SseEvent[] {
    this.buffer += chunk;
    const events: SseEvent[] = [];
    let idx: number;
    while ((idx = this.buffer.indexOf("\n")) >= 0) {
      let line = this.buffer.slice(0, idx);
      this.buffer = this.buffer.slice(idx + 1);
      if (line.endsWith("\r")) line = line.slice(0, -1);
      if (line === "") {
        const event = this.flush();
        if (event) events.push(event);
      } else if (line.startsWith("event:")) {
        this.eventName = line.slice(6).trimStart();
      } else if (line.startsWith("data:")) {
        this.dataLines.push(line.slice(5).trimStart());
      }
      // comments and unknown fields are ignored per the SSE spec
    }
    return events;
  }

  private flush(): SseEvent | null {
    if (this.dataLines.length === 0) {
      this.eventName = "message";
      return null;
    }
    const raw = this.dataLines.join("\n");
    this.dataLines = [];
    const name = this.eventName;
    this.eventName = "message";
    let data: unknown = raw;
    try {
      data = JSON.parse(raw);
    } catch {
      // non-JSON payloads pass through as text
    }
    return { event: name, data };
  }
}

/** Parse a streaming fetch body into SSE events. */
export async function* streamSse(body: ReadableStream<Uint8Array>): AsyncGenerator<SseEvent> {
  const reader = body.getReader();
  const decoder = new TextDecoder();
  const parser = new SseParser();
  try {
    while (true) {
      const { value, done } = await reader.read();
      if (done) break;
      for (const event of parser.push(decoder.decode(value, { stream: true }))) {
        yield event;
      }
    }
    for (const event of parser.push(decoder.decode())) {
      yield event;
    }
  } finally {
    reader.releaseLock();
  }
}
