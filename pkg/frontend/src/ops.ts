// Operator view: live instance table from /jobs, throughput from /metrics
// (2 s poll), and a model-registration form for admins. Non-admins get the
// read-only view; admin-ness is probed through the same public route the
// form posts to, so the console stays on the documented surface.

import {
  GatewayError,
  JobRow,
  MetricsSnapshot,
  Session,
  fetchJobs,
  fetchMetrics,
  isAdmin,
  registerModel,
} from "./api";
import { actionableError } from "./chat";

const POLL_MS = 2000;
const SPARK_SAMPLES = 60;

export function stateBadge(state: string): string {
  return `<span class="badge badge-${state}">${state}</span>`;
}

export function renderJobsTable(rows: JobRow[]): string {
  if (!rows.length) return "<p class='dim'>no instances</p>";
  const body = rows
    .flatMap((row) =>
      row.detail.length
        ? row.detail.map(
            (inst) => `
      <tr>
        <td>${row.model}</td>
        <td>${row.endpoint ?? "-"}</td>
        <td>${stateBadge(inst.state)}</td>
        <td>${inst.instance_id}${inst.dedicated ? " (batch)" : ""}</td>
        <td>${inst.nodes.join(", ") || "-"}</td>
        <td>${inst.gpus}</td>
        <td>${inst.in_flight}</td>
      </tr>`,
          )
        : [
            `<tr><td>${row.model}</td><td>${row.endpoint ?? "-"}</td>
             <td>${stateBadge(row.state)}</td><td colspan="4"></td></tr>`,
          ],
    )
    .join("");
  return `<table class="jobs-table">
    <tr><th>model</th><th>endpoint</th><th>state</th><th>instance</th>
        <th>nodes</th><th>gpus</th><th>in flight</th></tr>
    ${body}</table>`;
}

/** Inline SVG sparkline of the recent output-token throughput samples. */
export function sparkline(samples: number[], width = 240, height = 36): string {
  if (samples.length < 2) return `<svg width="${width}" height="${height}"></svg>`;
  const peak = Math.max(...samples, 1e-9);
  const step = width / (samples.length - 1);
  const points = samples
    .map((v, i) => `${(i * step).toFixed(1)},${(height - (v / peak) * (height - 2) - 1).toFixed(1)}`)
    .join(" ");
  return `<svg width="${width}" height="${height}" class="spark">
    <polyline fill="none" stroke="currentColor" stroke-width="1.5" points="${points}"/>
  </svg>`;
}

export class OpsPanel {
  private timer: ReturnType<typeof setInterval> | null = null;
  private samples: number[] = [];

  constructor(
    private root: HTMLElement,
    private session: () => Session,
  ) {}

  async mount(): Promise<void> {
    this.root.innerHTML = `
      <div class="ops-panel">
        <div class="ops-metrics">
          <span id="ops-throughput"></span>
          <span id="ops-spark"></span>
          <span id="ops-queues"></span>
        </div>
        <div id="ops-jobs"></div>
        <div id="ops-admin"></div>
        <div id="ops-status" class="status-line"></div>
      </div>`;
    await this.renderAdminForm();
    await this.poll();
    this.timer = setInterval(() => void this.poll(), POLL_MS);
  }

  unmount(): void {
    if (this.timer !== null) clearInterval(this.timer);
    this.timer = null;
  }

  private async renderAdminForm(): Promise<void> {
    const holder = this.root.querySelector<HTMLElement>("#ops-admin")!;
    let admin = false;
    try {
      admin = await isAdmin(this.session());
    } catch {
      admin = false;
    }
    if (!admin) {
      holder.innerHTML = "<p class='dim'>read-only view (admin group required to register models)</p>";
      return;
    }
    holder.innerHTML = `
      <form id="ops-register" class="register-form">
        <strong>register model</strong>
        <input id="reg-name" placeholder="name" required>
        <input id="reg-params" type="number" step="0.1" placeholder="params (B)" required>
        <input id="reg-gpus" type="number" value="1" min="1" title="gpus required">
        <input id="reg-rate" type="number" value="100" min="1" title="tokens/s per instance">
        <input id="reg-endpoints" placeholder="endpoint ids, comma separated" required>
        <button type="submit">register</button>
        <span id="reg-status"></span>
      </form>`;
    holder
      .querySelector<HTMLFormElement>("#ops-register")!
      .addEventListener("submit", (event) => void this.submitRegistration(event));
  }

  private async submitRegistration(event: Event): Promise<void> {
    event.preventDefault();
    const value = (id: string) =>
      this.root.querySelector<HTMLInputElement>(`#${id}`)!.value.trim();
    const status = this.root.querySelector<HTMLElement>("#reg-status")!;
    try {
      const name = await registerModel(this.session(), {
        name: value("reg-name"),
        params_billions: parseFloat(value("reg-params")),
        gpus_required: parseInt(value("reg-gpus"), 10) || 1,
        service_rate: parseFloat(value("reg-rate")) || 100,
        endpoints: value("reg-endpoints").split(",").map((s) => s.trim()).filter(Boolean),
      });
      status.textContent = `registered ${name}`;
      status.classList.remove("error");
    } catch (err) {
      status.textContent =
        err instanceof GatewayError ? `${err.status}: ${err.message}` : String(err);
      status.classList.add("error");
    }
  }

  private async poll(): Promise<void> {
    const statusEl = this.root.querySelector<HTMLElement>("#ops-status")!;
    try {
      const [jobs, metrics] = await Promise.all([
        fetchJobs(this.session()),
        fetchMetrics(this.session()),
      ]);
      this.applySnapshot(jobs, metrics);
      statusEl.textContent = "";
    } catch (err) {
      statusEl.textContent = actionableError(err);
    }
  }

  applySnapshot(jobs: JobRow[], metrics: MetricsSnapshot): void {
    this.samples.push(metrics.output_token_throughput);
    if (this.samples.length > SPARK_SAMPLES) this.samples.shift();
    this.root.querySelector<HTMLElement>("#ops-throughput")!.textContent =
      `${metrics.request_throughput.toFixed(2)} req/s | ` +
      `${metrics.output_token_throughput.toFixed(0)} tok/s | ` +
      `p50 ${metrics.latency.p50.toFixed(2)}s`;
    this.root.querySelector<HTMLElement>("#ops-spark")!.innerHTML =
      sparkline(this.samples);
    this.root.querySelector<HTMLElement>("#ops-queues")!.textContent =
      `pending: gateway ${metrics.queue_depth.gateway_pending}, ` +
      `fabric ${metrics.queue_depth.fabric_pending}`;
    this.root.querySelector<HTMLElement>("#ops-jobs")!.innerHTML =
      renderJobsTable(jobs);
  }
}
