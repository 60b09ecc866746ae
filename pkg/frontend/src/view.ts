import { SseEvent } from "./sse.js";
import { ChatMessage, DoneEvent, SamplerSettings, TokenEvent } from "./types.js";

/** The slice of ChatApi the view needs; tests substitute a scripted one. */
export interface ChatBackend {
  createSession(overrides: Partial<SamplerSettings>): Promise<{ session_id: string; sampler: SamplerSettings }>;
  streamMessage(
    sessionId: string,
    text: string,
    overrides: Partial<SamplerSettings>,
    debug: boolean,
  ): AsyncGenerator<SseEvent>;
}

export function clampControls(raw: { temperature: number; top_p: number; seed: number }): SamplerSettings {
  return {
    temperature: Math.min(2, Math.max(0, Number.isFinite(raw.temperature) ? raw.temperature : 0.95)),
    top_p: Math.min(1, Math.max(0.01, Number.isFinite(raw.top_p) ? raw.top_p : 0.7)),
    seed: Math.max(0, Math.floor(Number.isFinite(raw.seed) ? raw.seed : 0)),
  };
}

export class ChatView {
  sessionId: string | null = null;
  messages: ChatMessage[] = [];
  streaming = false;
  lastTokenIndex = -1;

  private doc: Document;
  private banner!: HTMLElement;
  private retryButton!: HTMLButtonElement;
  private transcript!: HTMLElement;
  private bufferEl!: HTMLElement;
  private contextPanel!: HTMLElement;
  private contextBody!: HTMLElement;
  private input!: HTMLInputElement;
  private sendButton!: HTMLButtonElement;
  temperatureSlider!: HTMLInputElement;
  topPSlider!: HTMLInputElement;
  seedField!: HTMLInputElement;
  debugToggle!: HTMLInputElement;

  constructor(private root: HTMLElement, private api: ChatBackend) {
    this.doc = root.ownerDocument;
    this.build();
  }

  private el<K extends keyof HTMLElementTagNameMap>(
    tag: K, className?: string, parent?: HTMLElement,
  ): HTMLElementTagNameMap[K] {
    const node = this.doc.createElement(tag);
    if (className) node.className = className;
    (parent ?? this.root).appendChild(node);
    return node;
  }

  private build(): void {
    this.root.classList.add("chat");

    this.banner = this.el("div", "banner hidden");
    this.retryButton = this.el("button", "retry", this.banner);
    this.retryButton.textContent = "retry";
    this.retryButton.addEventListener("click", () => void this.start());

    this.transcript = this.el("div", "transcript");
    this.bufferEl = this.el("div", "stream-buffer hidden");

    this.contextPanel = this.el("aside", "context-panel hidden");
    const title = this.el("h3", undefined, this.contextPanel);
    title.textContent = "疾病资料 / disease context";
    this.contextBody = this.el("pre", "context-body", this.contextPanel);

    const controls = this.el("div", "controls");
    this.temperatureSlider = this.slider(controls, "temperature", "0", "2", "0.05", "0.95");
    this.topPSlider = this.slider(controls, "top-p", "0.01", "1", "0.01", "0.7");
    const seedLabel = this.el("label", "control", controls);
    seedLabel.textContent = "seed ";
    this.seedField = this.el("input", "seed", seedLabel);
    this.seedField.type = "number";
    this.seedField.value = "0";
    const debugLabel = this.el("label", "control", controls);
    debugLabel.textContent = "show designed prompt ";
    this.debugToggle = this.el("input", "debug", debugLabel);
    this.debugToggle.type = "checkbox";

    const composer = this.el("form", "composer");
    this.input = this.el("input", "message-input", composer);
    this.input.type = "text";
    this.input.placeholder = "describe your symptoms…";
    this.sendButton = this.el("button", "send", composer);
    this.sendButton.type = "submit";
    this.sendButton.textContent = "send";
    composer.addEventListener("submit", (ev) => {
      ev.preventDefault();
      const text = this.input.value.trim();
      if (text) void this.send(text);
    });
  }

  private slider(parent: HTMLElement, name: string, min: string, max: string,
                 step: string, value: string): HTMLInputElement {
    const label = this.el("label", "control", parent);
    label.textContent = `${name} `;
    const input = this.el("input", name, label);
    input.type = "range";
    input.min = min;
    input.max = max;
    input.step = step;
    input.value = value;
    const readout = this.el("span", "readout", label);
    readout.textContent = value;
    input.addEventListener("input", () => {
      readout.textContent = input.value;
    });
    return input;
  }

  /** Current control values, clamped to valid ranges before any request. */
  controls(): SamplerSettings {
    return clampControls({
      temperature: parseFloat(this.temperatureSlider.value),
      top_p: parseFloat(this.topPSlider.value),
      seed: parseInt(this.seedField.value, 10),
    });
  }

  async start(overrides: Partial<SamplerSettings> = {}): Promise<void> {
    this.hideBanner();
    try {
      const res = await this.api.createSession(overrides);
      this.sessionId = res.session_id;
      this.temperatureSlider.value = String(res.sampler.temperature);
      this.topPSlider.value = String(res.sampler.top_p);
      this.seedField.value = String(res.sampler.seed);
    } catch (err) {
      this.sessionId = null;
      this.showBanner(`could not reach the service: ${(err as Error).message}`);
    }
  }

  async send(text: string): Promise<void> {
    if (!this.sessionId || this.streaming) return;
    this.streaming = true;
    this.sendButton.disabled = true;
    this.input.value = "";
    this.pushMessage({ role: "user", text });

    this.lastTokenIndex = -1;
    this.bufferEl.textContent = "";
    this.bufferEl.classList.remove("hidden");

    let done: DoneEvent | null = null;
    try {
      const stream = this.api.streamMessage(this.sessionId, text, this.controls(), this.debugToggle.checked);
      for await (const event of stream) {
        if (event.event === "token") {
          const tok = event.data as TokenEvent;
          if (tok.index <= this.lastTokenIndex) {
            throw new Error(`token event out of order: ${tok.index}`);
          }
          this.lastTokenIndex = tok.index;
          this.bufferEl.textContent = (this.bufferEl.textContent ?? "") + tok.text;
        } else if (event.event === "done") {
          done = event.data as DoneEvent;
        }
      }
    } catch (err) {
      this.finishInterrupted(text, (err as Error).message);
      return;
    }
    if (done === null) {
      this.finishInterrupted(text, "stream ended without a done event");
      return;
    }

    // Atomic replace: the buffer disappears and the final message text
    // (identical to the concatenated deltas) lands in the transcript.
    this.bufferEl.classList.add("hidden");
    this.bufferEl.textContent = "";
    this.pushMessage({
      role: "assistant",
      text: done.text,
      flagged: done.repetition_flagged,
      matchedDocIds: done.matched_doc_ids,
      designedPrompt: done.designed_prompt,
    });
    this.updateContextPanel(done);
    this.streaming = false;
    this.sendButton.disabled = false;
  }

  private finishInterrupted(text: string, reason: string): void {
    this.bufferEl.classList.add("hidden");
    const partial = this.bufferEl.textContent ?? "";
    this.bufferEl.textContent = "";
    this.pushMessage({ role: "assistant", text: partial, interrupted: true });
    const msgEl = this.transcript.lastElementChild as HTMLElement;
    const resend = this.doc.createElement("button");
    resend.className = "resend";
    resend.textContent = "resend";
    resend.title = reason;
    resend.addEventListener("click", () => void this.send(text));
    msgEl.appendChild(resend);
    this.streaming = false;
    this.sendButton.disabled = false;
  }

  private pushMessage(message: ChatMessage): void {
    this.messages.push(message);
    const node = this.el("div", `msg ${message.role}`, this.transcript);
    const body = this.el("span", "text", node);
    body.textContent = message.text;
    if (message.flagged) {
      const badge = this.el("span", "repetition-badge", node);
      badge.textContent = "repetitive";
      badge.title = "the repetition detector flagged this reply";
    }
    if (message.interrupted) {
      node.classList.add("interrupted");
    }
  }

  private updateContextPanel(done: DoneEvent): void {
    if (done.matched_doc_ids.length === 0) {
      return; // keep whatever context was shown last
    }
    this.contextPanel.classList.remove("hidden");
    let body = `matched: ${done.matched_doc_ids.join(", ")}`;
    if (done.context_block) {
      body += `\n${done.context_block}`;
    }
    if (this.debugToggle.checked && done.designed_prompt) {
      body += `\n--- designed prompt ---\n${done.designed_prompt}`;
    }
    this.contextBody.textContent = body;
  }

  transcriptText(role: "user" | "assistant"): string[] {
    return this.messages.filter((m) => m.role === role).map((m) => m.text);
  }

  private showBanner(message: string): void {
    this.banner.classList.remove("hidden");
    this.banner.insertBefore(this.doc.createTextNode(message + " "), this.retryButton);
  }

  private hideBanner(): void {
    this.banner.classList.add("hidden");
    while (this.banner.firstChild && this.banner.firstChild !== this.retryButton) {
      this.banner.removeChild(this.banner.firstChild);
    }
  }
}
