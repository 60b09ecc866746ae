// End-to-end: the real chat service (spawned as a subprocess) behind the
// real ChatApi/ChatView, with a happy-dom document standing in for the
// browser.
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { spawn, spawnSync, ChildProcess } from "node:child_process";
import { mkdtempSync, readdirSync, readFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { Window } from "happy-dom";
import { ChatApi } from "../src/api.js";
import { ChatView } from "../src/view.js";
import { DoneEvent, TokenEvent } from "../src/types.js";

const PORT = 8700 + Math.floor(Math.random() * 200);
const BASE = `http://127.0.0.1:${PORT}`;

let serviceProc: ChildProcess;
let workDir: string;
let persistDir: string;

async function waitForHealth(timeoutMs = 60_000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    try {
      const resp = await fetch(`${BASE}/v1/health`);
      if (resp.ok) return;
    } catch {
      // not up yet
    }
    await new Promise((resolve) => setTimeout(resolve, 250));
  }
  throw new Error("service did not become healthy in time");
}

beforeAll(async () => {
  workDir = mkdtempSync(join(tmpdir(), "nanoglm-e2e-"));
  persistDir = join(workDir, "events");
  const modelPath = join(workDir, "tiny.nglm");

  const init = spawnSync("python3", [
    "-m", "nanoglm.cli", "init-model", "--out", modelPath,
    "--layers", "2", "--d-model", "32", "--heads", "2", "--d-ff", "64",
    "--max-seq-len", "256", "--seed", "5",
  ], { encoding: "utf-8" });
  if (init.status !== 0) throw new Error(`init-model failed: ${init.stderr}`);

  const libraryPath = spawnSync("python3", [
    "-c", "from nanoglm import data_path, TOY_LIBRARY; print(data_path(TOY_LIBRARY))",
  ], { encoding: "utf-8" }).stdout.trim();

  serviceProc = spawn("python3", [
    "-m", "nanoglm.cli", "serve", "--model", modelPath, "--library", libraryPath,
    "--port", String(PORT), "--persist-dir", persistDir,
    "--temperature", "0.9", "--top-p", "0.8", "--seed", "1", "--max-new-tokens", "12",
  ], { stdio: ["ignore", "pipe", "pipe"] });
  serviceProc.stderr?.on("data", (chunk) => {
    process.stderr.write(`[service] ${chunk}`);
  });
  await waitForHealth();
});

afterAll(() => {
  serviceProc?.kill("SIGTERM");
});

function readEventLog(): Record<string, any>[] {
  const lines: Record<string, any>[] = [];
  for (const name of readdirSync(persistDir)) {
    if (!name.startsWith("events-")) continue;
    for (const line of readFileSync(join(persistDir, name), "utf-8").split("\n")) {
      if (line.trim()) lines.push(JSON.parse(line));
    }
  }
  return lines;
}

describe("chat service end to end", () => {
  it("streams 20 messages whose assembled transcript equals the service text", async () => {
    const api = new ChatApi(BASE);
    const session = await api.createSession({});
    const finals: string[] = [];
    for (let i = 0; i < 20; i++) {
      const tokens: string[] = [];
      let done: DoneEvent | null = null;
      for await (const event of api.streamMessage(session.session_id, `测试消息 ${i}`)) {
        if (event.event === "token") tokens.push((event.data as TokenEvent).text);
        else if (event.event === "done") done = event.data as DoneEvent;
      }
      expect(done).not.toBeNull();
      expect(tokens.join("")).toBe(done!.text);
      expect(typeof done!.repetition_flagged).toBe("boolean");
      finals.push(done!.text);
    }
    const info = await api.getSession(session.session_id);
    const assistantTexts = info.history.filter((m) => m.role === "assistant").map((m) => m.text);
    expect(assistantTexts).toEqual(finals);
  });

  it("round-trips slider values into request bodies, verified via the service log", async () => {
    const window = new Window();
    const doc = window.document;
    doc.body.innerHTML = '<div id="app"></div>';
    const view = new ChatView(doc.getElementById("app") as unknown as HTMLElement, new ChatApi(BASE));
    await view.start();
    expect(view.sessionId).not.toBeNull();

    view.temperatureSlider.value = "0.95";
    view.topPSlider.value = "0.7";
    view.seedField.value = "7";
    await view.send("slider check message");

    const logged = readEventLog().filter(
      (e) => e.type === "message" && e.session_id === view.sessionId,
    );
    expect(logged).toHaveLength(1);
    expect(logged[0].sampler.temperature).toBe(0.95);
    expect(logged[0].sampler.top_p).toBe(0.7);
    expect(logged[0].sampler.seed).toBe(7);
    expect(logged[0].user_text).toBe("slider check message");
  });

  it("populates the disease context panel for a toy-library match", async () => {
    const window = new Window();
    const doc = window.document;
    doc.body.innerHTML = '<div id="app"></div>';
    const root = doc.getElementById("app") as unknown as HTMLElement;
    const view = new ChatView(root, new ChatApi(BASE));
    await view.start();
    await view.send("我痛风发作了，脚趾又红又肿怎么办？");

    const panel = root.querySelector(".context-panel")!;
    expect(panel.classList.contains("hidden")).toBe(false);
    expect(panel.textContent).toContain("d020");
    expect(panel.textContent).toContain("痛风");
    // Treatment section of the matched doc, straight from the library.
    expect(panel.textContent).toContain("抗炎止痛");
    // Transcript still equals the streamed reply.
    const last = view.messages[view.messages.length - 1];
    expect(last.role).toBe("assistant");
    expect(last.matchedDocIds).toEqual(["d020"]);
  });

  it("rejects invalid sampler values with the field name", async () => {
    const api = new ChatApi(BASE);
    await expect(api.createSession({ top_p: 1.5 })).rejects.toMatchObject({
      status: 400,
      field: "top_p",
    });
  });
});
