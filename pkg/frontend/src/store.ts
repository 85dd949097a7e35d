// Console state: one connection session plus chat histories, persisted per
// browser profile in localStorage. UI panels subscribe and re-render on
// change; updates are serialized through the single store instance.

import type { ChatMessage } from "./api";

export interface ChatSessionState {
  session_id: string;
  model: string;
  history: ChatMessage[];
  params: { max_tokens: number; temperature: number };
}

export interface ConsoleState {
  baseUrl: string;
  token: string;
  subject: string;
  groups: string[];
  chat: ChatSessionState;
}

const STORAGE_KEY = "fedgate-console";

function freshChat(): ChatSessionState {
  return {
    session_id: `s-${Date.now().toString(16)}-${Math.floor(Math.random() * 1e6)}`,
    model: "",
    history: [],
    params: { max_tokens: 64, temperature: 0.7 },
  };
}

function defaults(): ConsoleState {
  return {
    baseUrl: "",
    token: "",
    subject: "",
    groups: [],
    chat: freshChat(),
  };
}

export class Store {
  private state: ConsoleState;
  private listeners: Array<(s: ConsoleState) => void> = [];

  constructor(private storage: Storage = localStorage) {
    this.state = this.load();
  }

  private load(): ConsoleState {
    try {
      const raw = this.storage.getItem(STORAGE_KEY);
      if (!raw) return defaults();
      return { ...defaults(), ...JSON.parse(raw) };
    } catch {
      return defaults();
    }
  }

  get(): ConsoleState {
    return this.state;
  }

  update(patch: Partial<ConsoleState>): void {
    this.state = { ...this.state, ...patch };
    this.storage.setItem(STORAGE_KEY, JSON.stringify(this.state));
    for (const listener of this.listeners) listener(this.state);
  }

  subscribe(listener: (s: ConsoleState) => void): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  /** Append one message, enforcing user/assistant alternation. */
  pushMessage(message: ChatMessage): void {
    const history = this.state.chat.history;
    const last = history[history.length - 1];
    if (last && last.role === message.role) {
      throw new Error(`chat history must alternate roles, got ${message.role} twice`);
    }
    this.update({
      chat: { ...this.state.chat, history: [...history, message] },
    });
  }

  /** Replace the content of the trailing assistant message (streaming). */
  amendAssistant(content: string): void {
    const history = [...this.state.chat.history];
    const last = history[history.length - 1];
    if (!last || last.role !== "assistant") {
      throw new Error("no assistant message to amend");
    }
    history[history.length - 1] = { role: "assistant", content };
    this.update({ chat: { ...this.state.chat, history } });
  }

  resetChat(model?: string): void {
    const chat = freshChat();
    if (model) chat.model = model;
    this.update({ chat });
  }
}
