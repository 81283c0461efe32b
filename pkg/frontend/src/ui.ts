/**
 * DOM controller: renders the session view and forwards intents to the
 * service. All numbers shown come from service payloads; the only client
 * math is chart geometry.
 */

import { ApiClient, ServiceError } from "./api.js";
import {
  DEFAULT_LAYOUT,
  Series,
  axisTicks,
  linearScale,
  seriesPath,
  valueExtent,
} from "./chart.js";
import { BranchTree, MedicationSelection, SessionState, rewardChipText } from "./state.js";
import type { SchemaPayload, SuggestPayload } from "./types.js";

const CHART_DEFAULTS = ["ADNI_MEM", "ADNI_EF2", "Hippocampus", "Ventricles"];
const SERIES_COLORS = ["#2563eb", "#dc2626", "#059669", "#d97706", "#7c3aed"];

export class ConsoleApp {
  private readonly api: ApiClient;
  private readonly root: HTMLElement;
  private schema: SchemaPayload | null = null;
  private policies: string[] = [];
  private readonly tree = new BranchTree();
  private chartFeature: string = CHART_DEFAULTS[0] ?? "ADNI_MEM";
  private banner: string | null = null;

  constructor(root: HTMLElement, api: ApiClient) {
    this.root = root;
    this.api = api;
  }

  async boot(): Promise<void> {
    try {
      this.schema = await this.api.schema();
      this.policies = (await this.api.policies()).policies.map((p) => p.name);
      this.banner = null;
    } catch (err) {
      this.banner = `service unreachable: ${String(err)} — retry`;
    }
    this.render();
  }

  private active(): SessionState | null {
    return this.tree.active();
  }

  async startPatient(cohort: string): Promise<void> {
    if (!this.schema) return;
    try {
      const created = await this.api.createSession(cohort);
      this.tree.addRoot(new SessionState(this.schema, created));
      this.banner = null;
    } catch (err) {
      this.banner = this.describeError(err);
    }
    this.render();
  }

  async submitVisit(): Promise<void> {
    const state = this.active();
    if (!state || state.done || !this.schema) return;
    const action = state.selection.asNumbers();
    try {
      const payload = await this.api.step(state.sessionId, action);
      state.applyStep(action, payload);
      this.banner = null;
    } catch (err) {
      this.banner = this.describeError(err);
    }
    this.render();
  }

  toggleMedication(index: number): void {
    const state = this.active();
    if (!state || state.done) return;
    state.selection = state.selection.toggle(index);
    this.render();
  }

  async compareSuggestion(policy: string): Promise<void> {
    const state = this.active();
    if (!state) return;
    try {
      state.suggestion = await this.api.suggest(state.sessionId, policy, true);
      this.banner = null;
    } catch (err) {
      this.banner = this.describeError(err);
    }
    this.render();
  }

  async forkBranch(): Promise<void> {
    const state = this.active();
    if (!state || !this.schema) return;
    try {
      const forked = await this.api.fork(state.sessionId);
      const view = await this.api.getSession(forked.session_id);
      const child = new SessionState(
        this.schema,
        {
          session_id: view.session_id,
          observation: { values: view.initial_observation, named: {} },
          cohort: view.cohort,
          horizon: view.horizon,
          dt_months: view.dt_months,
        },
        state.sessionId,
      );
      // replay the recorded steps so the branch shares the pre-fork prefix
      for (const step of view.steps) {
        child.applyStep(step.action, {
          observation: { values: step.observation, named: {} },
          reward: step.reward,
          terminated: step.terminated,
          truncated: step.truncated,
          info: { termination_reason: step.reason },
        });
      }
      child.selection = new MedicationSelection(
        this.schema.actions.indexOf(this.schema.no_medication_action),
        state.selection.bits,
      );
      this.tree.addBranch(child);
      this.banner = null;
    } catch (err) {
      this.banner = this.describeError(err);
    }
    this.render();
  }

  selectBranch(id: string): void {
    this.tree.activeId = id;
    this.render();
  }

  /** Session log as JSONL, built verbatim from the service's session view. */
  async downloadLog(): Promise<void> {
    const state = this.active();
    if (!state) return;
    try {
      const view = await this.api.getSession(state.sessionId);
      const lines = [
        JSON.stringify({
          type: "reset",
          observation: view.initial_observation,
          cohort: view.cohort,
        }),
        ...view.steps.map((s) =>
          JSON.stringify({
            type: "step",
            step: s.step,
            action: s.action,
            observation: s.observation,
            reward: s.reward,
            terminated: s.terminated,
            truncated: s.truncated,
            reason: s.reason,
          }),
        ),
      ];
      const blob = new Blob([lines.join("\n") + "\n"], { type: "application/jsonl" });
      const url = URL.createObjectURL(blob);
      const anchor = document.createElement("a");
      anchor.href = url;
      anchor.download = `session-${state.sessionId.slice(0, 8)}.jsonl`;
      anchor.click();
      URL.revokeObjectURL(url);
    } catch (err) {
      this.banner = this.describeError(err);
      this.render();
    }
  }

  setChartFeature(name: string): void {
    this.chartFeature = name;
    this.render();
  }

  private describeError(err: unknown): string {
    if (err instanceof ServiceError) return `${err.code}: ${err.message}`;
    return `service unreachable: ${String(err)} — retry`;
  }

  // -- rendering -------------------------------------------------------------

  render(): void {
    const schema = this.schema;
    this.root.replaceChildren();
    if (this.banner) {
      const div = el("div", "banner error");
      div.textContent = this.banner;
      this.root.appendChild(div);
    }
    if (!schema) {
      const retry = el("button", "retry");
      retry.textContent = "Retry connection";
      retry.onclick = () => void this.boot();
      this.root.appendChild(retry);
      return;
    }

    this.root.appendChild(this.renderHeader(schema));
    const state = this.active();
    if (!state) return;

    const layout = el("div", "columns");
    layout.appendChild(this.renderStatePanel(schema, state));
    const right = el("div", "right-column");
    right.appendChild(this.renderChart(schema));
    right.appendChild(this.renderMedicationPanel(schema, state));
    if (state.suggestion) right.appendChild(this.renderSuggestion(schema, state.suggestion, state));
    right.appendChild(this.renderBranches());
    layout.appendChild(right);
    this.root.appendChild(layout);
  }

  private renderHeader(schema: SchemaPayload): HTMLElement {
    const header = el("div", "header");
    const cohortSelect = el("select", "cohort") as HTMLSelectElement;
    for (const cohort of schema.cohorts) {
      const opt = document.createElement("option");
      opt.value = cohort;
      opt.textContent = cohort;
      cohortSelect.appendChild(opt);
    }
    const newPatient = el("button", "new-patient");
    newPatient.textContent = "New patient";
    newPatient.onclick = () => void this.startPatient(cohortSelect.value);
    header.append(cohortSelect, newPatient);

    const state = this.active();
    if (state) {
      const info = el("span", "session-info");
      info.textContent =
        `session ${state.sessionId.slice(0, 8)}… · cohort ${state.cohort} · ` +
        `visit ${state.timeline.length - 1}/${state.horizon} · every ${state.dtMonths} months`;
      header.appendChild(info);
      const chip = el("span", "reward-chip");
      chip.textContent = `reward ${rewardChipText(state.lastReward)}`;
      header.appendChild(chip);
      if (state.done) {
        const endBanner = el("span", "banner termination");
        endBanner.textContent =
          state.phase === "truncated"
            ? `horizon reached after ${state.timeline.length - 1} visits`
            : `episode terminated: ${state.terminationReason}`;
        header.appendChild(endBanner);
      }
    }
    return header;
  }

  private renderStatePanel(schema: SchemaPayload, state: SessionState): HTMLElement {
    const panel = el("div", "state-panel");
    const title = el("h3");
    title.textContent = "Current visit";
    panel.appendChild(title);
    const table = el("table", "features") as HTMLTableElement;
    const latest = state.timeline[state.timeline.length - 1];
    if (!latest) return panel;
    schema.features.forEach((feature, i) => {
      const row = table.insertRow();
      row.insertCell().textContent = feature.name;
      const value = latest.observation[i];
      row.insertCell().textContent = value === undefined ? "" : formatValue(value, feature.kind);
      row.insertCell().textContent = feature.unit;
    });
    panel.appendChild(table);
    return panel;
  }

  private renderMedicationPanel(schema: SchemaPayload, state: SessionState): HTMLElement {
    const panel = el("div", "medications");
    const title = el("h3");
    title.textContent = "Medications for the next visit";
    panel.appendChild(title);
    const suggested = new Set(state.suggestion?.action_names ?? []);
    schema.actions.forEach((action, i) => {
      const label = el("label", suggested.has(action) ? "med suggested" : "med");
      const box = document.createElement("input");
      box.type = "checkbox";
      box.checked = Boolean(state.selection.bits[i]);
      box.disabled = state.done;
      box.onchange = () => this.toggleMedication(i);
      label.append(box, document.createTextNode(action.replace(/_active$/, "")));
      panel.appendChild(label);
    });

    const controls = el("div", "controls");
    const submit = el("button", "submit") as HTMLButtonElement;
    submit.textContent = state.done ? "episode over — start a new patient" : "Submit visit";
    submit.disabled = state.done;
    submit.onclick = () => void this.submitVisit();
    controls.appendChild(submit);

    const fork = el("button", "fork");
    fork.textContent = "Fork what-if branch";
    fork.onclick = () => void this.forkBranch();
    controls.appendChild(fork);

    const download = el("button", "download-log");
    download.textContent = "Download session log";
    download.onclick = () => void this.downloadLog();
    controls.appendChild(download);

    if (this.policies.length) {
      const policySelect = el("select", "policy") as HTMLSelectElement;
      for (const name of this.policies) {
        const opt = document.createElement("option");
        opt.value = name;
        opt.textContent = name;
        policySelect.appendChild(opt);
      }
      const suggest = el("button", "suggest");
      suggest.textContent = "Compare suggestion";
      suggest.onclick = () => void this.compareSuggestion(policySelect.value);
      controls.append(policySelect, suggest);
    }
    panel.appendChild(controls);
    return panel;
  }

  private renderSuggestion(
    schema: SchemaPayload,
    suggestion: SuggestPayload,
    state: SessionState,
  ): HTMLElement {
    const panel = el("div", "suggestion");
    const title = el("h3");
    title.textContent = `Suggestion (${suggestion.policy}) — not auto-submitted`;
    panel.appendChild(title);
    const line = el("div", "suggested-actions");
    line.textContent = suggestion.action_names.join(", ") || "(none)";
    panel.appendChild(line);
    const mine = state.selection.asNumbers().join("");
    const theirs = suggestion.action.join("");
    const agree = el("div", "agreement");
    agree.textContent = mine === theirs ? "matches your selection" : "differs from your selection";
    panel.appendChild(agree);

    if (suggestion.attribution) {
      const bars = el("div", "attribution");
      const values = suggestion.attribution.values;
      const maxAbs = Math.max(1e-12, ...values.map((v) => Math.abs(v)));
      suggestion.attribution.feature_names.forEach((name, i) => {
        const v = values[i] ?? 0;
        const row = el("div", "bar-row");
        const label = el("span", "bar-label");
        label.textContent = name;
        const bar = el("span", v >= 0 ? "bar pos" : "bar neg");
        bar.style.width = `${(Math.abs(v) / maxAbs) * 120}px`;
        bar.title = String(v);
        row.append(label, bar);
        bars.appendChild(row);
      });
      const total = values.reduce((a, b) => a + b, 0);
      const sum = el("div", "bar-sum");
      sum.textContent = `sum ≈ ${total.toPrecision(6)} (score shift vs cohort mean)`;
      bars.appendChild(sum);
      panel.appendChild(bars);
    }
    return panel;
  }

  private renderChart(schema: SchemaPayload): HTMLElement {
    const wrap = el("div", "chart");
    const picker = el("select", "chart-feature") as HTMLSelectElement;
    const ordered = [
      ...CHART_DEFAULTS.filter((n) => schema.features.some((f) => f.name === n)),
      ...schema.features.map((f) => f.name).filter((n) => !CHART_DEFAULTS.includes(n)),
    ];
    for (const name of ordered) {
      const opt = document.createElement("option");
      opt.value = name;
      opt.textContent = name;
      if (name === this.chartFeature) opt.selected = true;
      picker.appendChild(opt);
    }
    picker.onchange = () => this.setChartFeature(picker.value);
    wrap.appendChild(picker);

    const featureIndex = schema.features.findIndex((f) => f.name === this.chartFeature);
    const branches = this.tree.flatten();
    const seriesList: Series[] = branches.map(({ state }, i) => ({
      label: state.sessionId.slice(0, 6),
      values: state.timeline.map((p) => p.observation[featureIndex] ?? null),
      color: SERIES_COLORS[i % SERIES_COLORS.length] ?? "#333",
    }));
    wrap.appendChild(renderSvgChart(seriesList));
    return wrap;
  }

  private renderBranches(): HTMLElement {
    const panel = el("div", "branches");
    const title = el("h3");
    title.textContent = "Branches";
    panel.appendChild(title);
    for (const { state, depth } of this.tree.flatten()) {
      const row = el(
        "div",
        state.sessionId === this.tree.activeId ? "branch active" : "branch",
      );
      row.style.marginLeft = `${depth * 16}px`;
      row.textContent = `${state.sessionId.slice(0, 8)}… · ${state.timeline.length - 1} visits · ${state.phase}`;
      row.onclick = () => this.selectBranch(state.sessionId);
      panel.appendChild(row);
    }
    return panel;
  }
}

function el(tag: string, className?: string): HTMLElement {
  const node = document.createElement(tag);
  if (className) node.className = className;
  return node;
}

function formatValue(value: number, kind: string): string {
  if (kind === "binary") return value ? "yes" : "no";
  return Math.abs(value) >= 1000 ? value.toFixed(0) : value.toPrecision(4);
}

function renderSvgChart(seriesList: Series[]): SVGSVGElement {
  const L = DEFAULT_LAYOUT;
  const svg = document.createElementNS("http://www.w3.org/2000/svg", "svg");
  svg.setAttribute("viewBox", `0 0 ${L.width} ${L.height}`);
  svg.setAttribute("width", String(L.width));
  svg.setAttribute("height", String(L.height));

  const maxLen = Math.max(2, ...seriesList.map((s) => s.values.length));
  const [lo, hi] = valueExtent(seriesList);
  const x = linearScale(0, maxLen - 1, L.padLeft, L.width - L.padRight);
  const y = linearScale(lo, hi, L.height - L.padBottom, L.padTop);

  for (const tick of axisTicks(lo, hi)) {
    const line = document.createElementNS("http://www.w3.org/2000/svg", "line");
    line.setAttribute("x1", String(L.padLeft));
    line.setAttribute("x2", String(L.width - L.padRight));
    line.setAttribute("y1", String(y.toPixel(tick)));
    line.setAttribute("y2", String(y.toPixel(tick)));
    line.setAttribute("stroke", "#ddd");
    svg.appendChild(line);
    const label = document.createElementNS("http://www.w3.org/2000/svg", "text");
    label.setAttribute("x", "4");
    label.setAttribute("y", String(y.toPixel(tick) + 4));
    label.setAttribute("font-size", "10");
    label.textContent = tick.toPrecision(3);
    svg.appendChild(label);
  }
  for (const series of seriesList) {
    const path = document.createElementNS("http://www.w3.org/2000/svg", "path");
    path.setAttribute("d", seriesPath(series.values, x, y));
    path.setAttribute("fill", "none");
    path.setAttribute("stroke", series.color);
    path.setAttribute("stroke-width", "2");
    svg.appendChild(path);
  }
  return svg;
}
