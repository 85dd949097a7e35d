// Typed client for the gateway's public HTTP surface. The console talks to
// nothing else: models, jobs, metrics, chat completions (JSON or SSE),
// admin registration, and the demo identity provider mounted at /idp.

import { readSSE } from "./sse";

export interface Session {
  baseUrl: string;
  token: string;
}

export interface ModelInfo {
  id: string;
}

export interface JobRow {
  model: string;
  endpoint: string | null;
  state: "queued" | "starting" | "running" | "stopped";
  instances: number;
  detail: InstanceRow[];
  last_active_at: number | null;
}

export interface InstanceRow {
  instance_id: string;
  state: string;
  nodes: number[];
  gpus: number;
  in_flight: number;
  dedicated: boolean;
}

export interface MetricsSnapshot {
  window_s: number;
  request_throughput: number;
  output_token_throughput: number;
  latency: { p50: number; p90: number; p99: number };
  completed: number;
  errors: number;
  totals: { requests: number; tokens: number };
  queue_depth: { gateway_pending: number; fabric_pending: number };
}

export interface ChatMessage {
  role: "user" | "assistant";
  content: string;
}

export interface ChatParams {
  max_tokens?: number;
  temperature?: number;
}

export class GatewayError extends Error {
  constructor(
    public status: number,
    message: string,
    public errType = "error",
  ) {
    super(message);
  }
}

async function request<T>(
  session: Session,
  method: string,
  path: string,
  body?: unknown,
): Promise<T> {
  const resp = await fetch(session.baseUrl + path, {
    method,
    headers: {
      Authorization: `Bearer ${session.token}`,
      ...(body !== undefined ? { "Content-Type": "application/json" } : {}),
    },
    body: body !== undefined ? JSON.stringify(body) : undefined,
  });
  if (!resp.ok) {
    const detail = await resp.json().catch(() => ({}) as any);
    throw new GatewayError(
      resp.status,
      detail?.error?.message ?? `HTTP ${resp.status}`,
      detail?.error?.type,
    );
  }
  return (await resp.json()) as T;
}

export async function listModels(session: Session): Promise<string[]> {
  const out = await request<{ data: ModelInfo[] }>(session, "GET", "/v1/models");
  return out.data.map((m) => m.id);
}

export async function fetchJobs(session: Session): Promise<JobRow[]> {
  const out = await request<{ jobs: JobRow[] }>(session, "GET", "/jobs");
  return out.jobs;
}

export async function fetchMetrics(session: Session): Promise<MetricsSnapshot> {
  return request<MetricsSnapshot>(session, "GET", "/metrics");
}

export async function registerModel(
  session: Session,
  definition: Record<string, unknown>,
): Promise<string> {
  const out = await request<{ registered: string }>(
    session,
    "POST",
    "/admin/models",
    definition,
  );
  return out.registered;
}

/** Probe admin rights without side effects: the group gate rejects
 * non-admins with 403 before the (empty, invalid) body is even parsed. */
export async function isAdmin(session: Session): Promise<boolean> {
  try {
    await request(session, "POST", "/admin/models", {});
    return true;
  } catch (err) {
    if (err instanceof GatewayError) return err.status !== 403 && err.status !== 401;
    throw err;
  }
}

export async function chatOnce(
  session: Session,
  model: string,
  messages: ChatMessage[],
  params: ChatParams = {},
): Promise<{ content: string; completionTokens: number }> {
  const out = await request<any>(session, "POST", "/v1/chat/completions", {
    model,
    messages,
    ...params,
  });
  return {
    content: out.choices?.[0]?.message?.content ?? "",
    completionTokens: out.usage?.completion_tokens ?? 0,
  };
}

export interface StreamCallbacks {
  onDelta: (text: string) => void;
  onDone?: (finishReason: string | null) => void;
  onError?: (err: GatewayError) => void;
}

/** Stream a chat completion; resolves with the accumulated text once the
 * server sends [DONE]. HTTP-level failures reject before any delta. */
export async function chatStream(
  session: Session,
  model: string,
  messages: ChatMessage[],
  params: ChatParams,
  callbacks: StreamCallbacks,
  signal?: AbortSignal,
): Promise<string> {
  const resp = await fetch(session.baseUrl + "/v1/chat/completions", {
    method: "POST",
    headers: {
      Authorization: `Bearer ${session.token}`,
      "Content-Type": "application/json",
    },
    body: JSON.stringify({ model, messages, stream: true, ...params }),
    signal,
  });
  if (!resp.ok || !resp.body) {
    const detail = await resp.json().catch(() => ({}) as any);
    throw new GatewayError(
      resp.status,
      detail?.error?.message ?? `HTTP ${resp.status}`,
      detail?.error?.type,
    );
  }
  let text = "";
  let finish: string | null = null;
  await readSSE(resp.body.getReader(), (payload) => {
    if (payload.error) {
      const err = new GatewayError(
        payload.error.code ?? 502,
        payload.error.message ?? "stream error",
        payload.error.type,
      );
      callbacks.onError?.(err);
      throw err;
    }
    const choice = payload.choices?.[0];
    const delta = choice?.delta?.content ?? "";
    if (delta) {
      text += delta;
      callbacks.onDelta(delta);
    }
    if (choice?.finish_reason) finish = choice.finish_reason;
  });
  callbacks.onDone?.(finish);
  return text;
}

/** Demo login against the mock identity provider mounted on the gateway. */
export async function issueToken(
  baseUrl: string,
  subject: string,
  groups: string[] = [],
): Promise<{ token: string; groups: string[] }> {
  const resp = await fetch(baseUrl + "/idp/token", {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({ subject, groups }),
  });
  if (!resp.ok) throw new GatewayError(resp.status, "token issuance failed");
  const out = await resp.json();
  return { token: out.access_token, groups: out.groups ?? [] };
}
