// Incremental server-sent-events reader over a fetch body stream.
// Events are `data: <json>` frames separated by blank lines; the stream
// terminates with `data: [DONE]`.

export type SSEPayload = any;

export async function readSSE(
  reader: ReadableStreamDefaultReader<Uint8Array>,
  onEvent: (payload: SSEPayload) => void,
): Promise<void> {
  const decoder = new TextDecoder();
  let buffer = "";
  try {
    while (true) {
      const { value, done } = await reader.read();
      if (done) break;
      buffer += decoder.decode(value, { stream: true });
      buffer = drain(buffer, onEvent);
    }
    drain(buffer + "\n\n", onEvent); // flush a final unterminated frame
  } finally {
    reader.releaseLock();
  }
}

/** Feed complete frames from `buffer` to `onEvent`; returns the remainder.
 * Exposed for tests: frames may arrive split across arbitrary chunk
 * boundaries and must still parse exactly once. */
export function drain(
  buffer: string,
  onEvent: (payload: SSEPayload) => void,
): string {
  let idx: number;
  while ((idx = buffer.indexOf("\n\n")) >= 0) {
    const frame = buffer.slice(0, idx);
    buffer = buffer.slice(idx + 2);
    for (const line of frame.split("\n")) {
      if (!line.startsWith("data:")) continue;
      const payload = line.slice(5).trim();
      if (!payload || payload === "[DONE]") continue;
      try {
        onEvent(JSON.parse(payload));
      } catch (err) {
        if (err instanceof SyntaxError) {
          console.warn("unparseable SSE frame", payload);
          continue;
        }
        throw err;
      }
    }
  }
  return buffer;
}
