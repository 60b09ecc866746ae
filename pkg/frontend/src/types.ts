export interface SamplerSettings {
  temperature: number;
  top_p: number;
  seed: number;
  max_new_tokens?: number;
}

export interface TokenEvent {
  session_id: string;
  index: number;
  text: string;
}

export interface DoneEvent {
  session_id: string;
  text: string;
  token_count: number;
  finish_reason: string;
  overflow: boolean;
  repetition_flagged: boolean;
  repetition_ratio: number;
  matched_doc_ids: string[];
  latency_s: number;
  designed_prompt?: string;
  context_block?: string;
}

export interface SessionInfo {
  session_id: string;
  overrides: Record<string, unknown>;
  history: { role: "user" | "assistant"; text: string; ts: string }[];
  prompt_tokens: number;
  completion_tokens: number;
}

export interface ChatMessage {
  role: "user" | "assistant";
  text: string;
  flagged?: boolean;
  interrupted?: boolean;
  matchedDocIds?: string[];
  designedPrompt?: string;
}
