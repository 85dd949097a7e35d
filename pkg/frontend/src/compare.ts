// Multi-column compare: one prompt fanned out to 2-4 models concurrently.
// Columns stream independently; a failure in one never blanks the others.

import { GatewayError, Session, chatStream } from "./api";
import { actionableError } from "./chat";
import { renderMarkdown } from "./markdown";

export interface ColumnResult {
  model: string;
  text: string;
  tokens: number;
  latencyMs: number;
  error: string | null;
}

/** Run one column to completion, reporting deltas into its own element. */
export async function runColumn(
  session: Session,
  model: string,
  prompt: string,
  maxTokens: number,
  bodyEl: HTMLElement,
  metaEl: HTMLElement,
): Promise<ColumnResult> {
  const started = performance.now();
  let text = "";
  let tokens = 0;
  try {
    await chatStream(
      session,
      model,
      [{ role: "user", content: prompt }],
      { max_tokens: maxTokens },
      {
        onDelta: (delta) => {
          text += delta;
          tokens += 1;
          bodyEl.innerHTML = renderMarkdown(text);
          metaEl.textContent = `${tokens} tokens...`;
        },
      },
    );
    const latencyMs = performance.now() - started;
    metaEl.textContent = `${tokens} tokens in ${(latencyMs / 1000).toFixed(2)}s`;
    return { model, text, tokens, latencyMs, error: null };
  } catch (err) {
    const latencyMs = performance.now() - started;
    const message = actionableError(err);
    bodyEl.innerHTML = "";
    metaEl.textContent = message;
    metaEl.classList.add("error");
    return {
      model,
      text,
      tokens,
      latencyMs,
      error: err instanceof GatewayError ? String(err.status) : message,
    };
  }
}

/** Fan the prompt out to every selected model; per-column failures are
 * isolated, so the result array always has one entry per model. */
export async function runCompare(
  session: Session,
  models: string[],
  prompt: string,
  maxTokens: number,
  grid: HTMLElement,
): Promise<ColumnResult[]> {
  grid.innerHTML = "";
  const slots = models.map((model) => {
    const column = document.createElement("div");
    column.className = "compare-col";
    column.innerHTML = `
      <div class="compare-head">${model}</div>
      <div class="compare-meta">waiting...</div>
      <div class="compare-body"></div>`;
    grid.appendChild(column);
    return {
      model,
      body: column.querySelector<HTMLElement>(".compare-body")!,
      meta: column.querySelector<HTMLElement>(".compare-meta")!,
    };
  });
  return Promise.all(
    slots.map((slot) =>
      runColumn(session, slot.model, prompt, maxTokens, slot.body, slot.meta),
    ),
  );
}

export function mountComparePanel(
  root: HTMLElement,
  session: () => Session,
  modelSource: () => Promise<string[]>,
): void {
  root.innerHTML = `
    <div class="compare-panel">
      <div class="toolbar">
        <span>models (2-4)</span>
        <select id="cmp-models" multiple size="4"></select>
        <label>max tokens <input id="cmp-max-tokens" type="number" value="48" min="1"></label>
        <button id="cmp-refresh">refresh</button>
      </div>
      <form id="cmp-form">
        <input id="cmp-input" placeholder="Prompt for every column..." autocomplete="off">
        <button type="submit">compare</button>
      </form>
      <div id="cmp-status" class="status-line"></div>
      <div id="cmp-grid" class="compare-grid"></div>
    </div>`;

  const select = root.querySelector<HTMLSelectElement>("#cmp-models")!;
  const statusEl = root.querySelector<HTMLElement>("#cmp-status")!;
  const grid = root.querySelector<HTMLElement>("#cmp-grid")!;

  const refresh = async () => {
    try {
      const models = await modelSource();
      select.innerHTML = "";
      for (const model of models) {
        const option = document.createElement("option");
        option.value = model;
        option.textContent = model;
        select.appendChild(option);
      }
    } catch (err) {
      statusEl.textContent = actionableError(err);
    }
  };

  root.querySelector("#cmp-refresh")!.addEventListener("click", () => void refresh());
  root.querySelector<HTMLFormElement>("#cmp-form")!.addEventListener("submit", (event) => {
    event.preventDefault();
    const prompt = root.querySelector<HTMLInputElement>("#cmp-input")!.value.trim();
    const chosen = Array.from(select.selectedOptions).map((o) => o.value);
    const maxTokens =
      parseInt(root.querySelector<HTMLInputElement>("#cmp-max-tokens")!.value, 10) || 48;
    if (!prompt) return;
    if (chosen.length < 2 || chosen.length > 4) {
      statusEl.textContent = "Select between 2 and 4 models.";
      return;
    }
    statusEl.textContent = "";
    void runCompare(session(), chosen, prompt, maxTokens, grid);
  });

  void refresh();
}
