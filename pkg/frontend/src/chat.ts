// Interactive chat playground: model dropdown fed by /v1/models and /jobs,
// streamed responses rendered incrementally, cold-start state surfaced from
// /jobs until the first token arrives.

import {
  ChatMessage,
  GatewayError,
  Session,
  chatStream,
  fetchJobs,
  listModels,
} from "./api";
import { renderMarkdown } from "./markdown";
import { Store } from "./store";

export function actionableError(err: unknown): string {
  if (err instanceof GatewayError) {
    if (err.status === 401) return "Token rejected (401): paste a fresh token or sign in again.";
    if (err.status === 403) return "Access denied (403): your groups do not cover this model.";
    if (err.status === 429) return "Rate limited (429): slow down and retry shortly.";
    if (err.status === 404) return "Unknown model (404): pick a registered model.";
    return `Request failed (${err.status}): ${err.message}`;
  }
  return `Connection problem: ${String(err)}`;
}

/** Fill a <select> with registered models, flagging live ones. */
export async function populateModelDropdown(
  select: HTMLSelectElement,
  session: Session,
): Promise<void> {
  const [models, jobs] = await Promise.all([
    listModels(session),
    fetchJobs(session),
  ]);
  const states = new Map(jobs.map((j) => [j.model, j.state]));
  const previous = select.value;
  select.innerHTML = "";
  for (const model of models) {
    const option = document.createElement("option");
    option.value = model;
    const state = states.get(model);
    option.textContent = state ? `${model} (${state})` : model;
    select.appendChild(option);
  }
  if (previous && models.includes(previous)) select.value = previous;
}

function messageElement(msg: ChatMessage): HTMLElement {
  const div = document.createElement("div");
  div.className = `msg msg-${msg.role}`;
  div.innerHTML = renderMarkdown(msg.content);
  return div;
}

export function renderHistory(list: HTMLElement, history: ChatMessage[]): void {
  list.innerHTML = "";
  for (const msg of history) list.appendChild(messageElement(msg));
  list.scrollTop = list.scrollHeight;
}

/** Send the chat box contents; streams into the trailing assistant bubble.
 * A transport drop mid-stream reconnects once. Returns the final text. */
export async function sendChat(
  store: Store,
  session: Session,
  statusEl: HTMLElement,
  listEl: HTMLElement,
  prompt: string,
): Promise<string> {
  const state = store.get();
  store.pushMessage({ role: "user", content: prompt });
  store.pushMessage({ role: "assistant", content: "" });
  renderHistory(listEl, store.get().chat.history);

  let gotFirstToken = false;
  let settled = false;
  statusEl.textContent = "";
  const coldWatch = watchColdStart(
    session, state.chat.model, statusEl, () => gotFirstToken || settled);

  const attempt = () =>
    chatStream(
      session,
      state.chat.model,
      store.get().chat.history.slice(0, -1),
      state.chat.params,
      {
        onDelta: (delta) => {
          gotFirstToken = true;
          statusEl.textContent = "";
          const current = store.get().chat.history;
          store.amendAssistant(current[current.length - 1].content + delta);
          renderHistory(listEl, store.get().chat.history);
        },
      },
    );

  try {
    let text: string;
    try {
      text = await attempt();
    } catch (err) {
      if (err instanceof GatewayError || gotFirstToken) throw err;
      text = await attempt(); // one reconnect for a dropped connection
    }
    return text;
  } catch (err) {
    statusEl.textContent = actionableError(err);
    // drop the empty assistant bubble so history stays alternating
    const history = store.get().chat.history;
    if (history[history.length - 1]?.content === "") {
      store.update({
        chat: { ...store.get().chat, history: history.slice(0, -2) },
      });
      renderHistory(listEl, store.get().chat.history);
    }
    throw err;
  } finally {
    settled = true;
    await coldWatch;
  }
}

/** Poll /jobs while the model is provisioning so the user sees
 * queued -> starting instead of a silent wait. Stops at the first token. */
async function watchColdStart(
  session: Session,
  model: string,
  statusEl: HTMLElement,
  done: () => boolean,
): Promise<void> {
  for (let i = 0; i < 600 && !done(); i++) {
    try {
      const jobs = await fetchJobs(session);
      if (done()) break;
      const row = jobs.find((j) => j.model === model);
      if (row && row.state !== "running") {
        statusEl.textContent =
          row.state === "queued"
            ? "queued: waiting for cluster nodes"
            : "starting: loading model weights";
      } else if (row) {
        statusEl.textContent = "running: waiting for first token";
      }
    } catch {
      break; // status is best-effort; the stream itself reports hard errors
    }
    await new Promise((resolve) => setTimeout(resolve, 500));
  }
}

export function mountChatPanel(
  root: HTMLElement,
  store: Store,
  session: () => Session,
): void {
  root.innerHTML = `
    <div class="chat-panel">
      <div class="toolbar">
        <label>model <select id="chat-model"></select></label>
        <label>max tokens <input id="chat-max-tokens" type="number" value="64" min="1"></label>
        <button id="chat-refresh">refresh models</button>
        <button id="chat-clear">new session</button>
      </div>
      <div id="chat-status" class="status-line"></div>
      <div id="chat-list" class="chat-list"></div>
      <form id="chat-form">
        <input id="chat-input" placeholder="Message the model..." autocomplete="off">
        <button type="submit">send</button>
      </form>
    </div>`;

  const select = root.querySelector<HTMLSelectElement>("#chat-model")!;
  const statusEl = root.querySelector<HTMLElement>("#chat-status")!;
  const listEl = root.querySelector<HTMLElement>("#chat-list")!;
  const form = root.querySelector<HTMLFormElement>("#chat-form")!;
  const input = root.querySelector<HTMLInputElement>("#chat-input")!;
  const maxTokens = root.querySelector<HTMLInputElement>("#chat-max-tokens")!;

  const refresh = () =>
    populateModelDropdown(select, session()).catch((err) => {
      statusEl.textContent = actionableError(err);
    });

  root.querySelector("#chat-refresh")!.addEventListener("click", refresh);
  root.querySelector("#chat-clear")!.addEventListener("click", () => {
    store.resetChat(select.value);
    renderHistory(listEl, []);
  });
  select.addEventListener("change", () => {
    store.update({ chat: { ...store.get().chat, model: select.value } });
  });

  form.addEventListener("submit", (event) => {
    event.preventDefault();
    const prompt = input.value.trim();
    if (!prompt || !select.value) return;
    input.value = "";
    store.update({
      chat: {
        ...store.get().chat,
        model: select.value,
        params: {
          ...store.get().chat.params,
          max_tokens: parseInt(maxTokens.value, 10) || 64,
        },
      },
    });
    void sendChat(store, session(), statusEl, listEl, prompt).catch(() => {});
  });

  renderHistory(listEl, store.get().chat.history);
  void refresh();
}
