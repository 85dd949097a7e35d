// App shell: connection box (token paste or demo sign-in against the mock
// identity provider) and the three tabs. All gateway access flows through
// the session the user establishes here.

import { Session, issueToken, listModels } from "./api";
import { mountChatPanel } from "./chat";
import { mountComparePanel } from "./compare";
import { OpsPanel } from "./ops";
import { Store } from "./store";
import "./styles.css";

const store = new Store();

function session(): Session {
  const { baseUrl, token } = store.get();
  return { baseUrl: baseUrl.replace(/\/$/, ""), token };
}

function mountAuthBox(root: HTMLElement): void {
  const state = store.get();
  root.innerHTML = `
    <div class="auth-box">
      <input id="auth-url" placeholder="gateway url" value="${state.baseUrl || "http://127.0.0.1:8080"}">
      <input id="auth-token" placeholder="paste bearer token" value="${state.token}">
      <button id="auth-save">connect</button>
      <span class="dim">or</span>
      <input id="auth-subject" placeholder="subject" value="${state.subject || "console-user"}">
      <label><input id="auth-admin" type="checkbox"> admin</label>
      <button id="auth-login">demo sign-in</button>
      <span id="auth-status" class="status-line"></span>
    </div>`;

  const url = root.querySelector<HTMLInputElement>("#auth-url")!;
  const token = root.querySelector<HTMLInputElement>("#auth-token")!;
  const status = root.querySelector<HTMLElement>("#auth-status")!;

  root.querySelector("#auth-save")!.addEventListener("click", () => {
    store.update({ baseUrl: url.value.trim(), token: token.value.trim() });
    status.textContent = "connected with pasted token";
    renderTabs();
  });

  root.querySelector("#auth-login")!.addEventListener("click", async () => {
    const subject = root.querySelector<HTMLInputElement>("#auth-subject")!.value.trim();
    const admin = root.querySelector<HTMLInputElement>("#auth-admin")!.checked;
    try {
      const issued = await issueToken(
        url.value.trim().replace(/\/$/, ""),
        subject || "console-user",
        admin ? ["admins"] : [],
      );
      token.value = issued.token;
      store.update({
        baseUrl: url.value.trim(),
        token: issued.token,
        subject,
        groups: issued.groups,
      });
      status.textContent = `signed in as ${subject}`;
      renderTabs();
    } catch (err) {
      status.textContent = `sign-in failed: ${String(err)}`;
    }
  });
}

let ops: OpsPanel | null = null;

function renderTabs(active = "chat"): void {
  const tabs = document.getElementById("tabs")!;
  const view = document.getElementById("view")!;
  tabs.innerHTML = "";
  ops?.unmount();
  ops = null;
  for (const name of ["chat", "compare", "operations"]) {
    const button = document.createElement("button");
    button.textContent = name;
    button.className = name === active ? "tab active" : "tab";
    button.addEventListener("click", () => renderTabs(name));
    tabs.appendChild(button);
  }
  view.innerHTML = "";
  if (!store.get().token) {
    view.innerHTML = "<p class='dim'>Connect with a token to begin.</p>";
    return;
  }
  if (active === "chat") {
    mountChatPanel(view, store, session);
  } else if (active === "compare") {
    mountComparePanel(view, session, () => listModels(session()));
  } else {
    ops = new OpsPanel(view, session);
    void ops.mount();
  }
}

export function boot(): void {
  mountAuthBox(document.getElementById("auth")!);
  renderTabs();
}

if (typeof document !== "undefined" && document.getElementById("auth")) {
  boot();
}
