/**
 * Pure view-state: the medication checkbox machine, the visit timeline, and
 * the branch tree. No dynamics math lives here; every number rendered comes
 * verbatim from a service payload.
 */

import type {
  CreateSessionPayload,
  SchemaPayload,
  StepPayload,
  SuggestPayload,
} from "./types.js";

/**
 * Checkbox state machine over the medication classes.
 *
 * Invariant (enforced by construction, not validation): the selection is
 * never empty and the no-medication class is mutually exclusive with every
 * treatment. Transitions are immutable.
 */
export class MedicationSelection {
  readonly bits: ReadonlyArray<boolean>;
  readonly noMedIndex: number;

  constructor(noMedIndex: number, bits?: ReadonlyArray<boolean>, size = 17) {
    this.noMedIndex = noMedIndex;
    if (bits === undefined) {
      const fresh = new Array<boolean>(size).fill(false);
      fresh[noMedIndex] = true;
      this.bits = fresh;
    } else {
      this.bits = bits;
    }
  }

  /** One checkbox click; always lands in a valid selection. */
  toggle(index: number): MedicationSelection {
    const next = [...this.bits];
    if (index === this.noMedIndex) {
      if (next[index]) {
        return this; // sole selection cannot be removed
      }
      next.fill(false);
      next[index] = true;
      return new MedicationSelection(this.noMedIndex, next);
    }
    next[index] = !next[index];
    if (next[index]) {
      next[this.noMedIndex] = false;
    } else if (!next.some(Boolean)) {
      next[this.noMedIndex] = true; // deselecting everything re-arms no-medication
    }
    return new MedicationSelection(this.noMedIndex, next);
  }

  isValid(): boolean {
    const count = this.bits.filter(Boolean).length;
    if (count === 0) return false;
    if (this.bits[this.noMedIndex] && count > 1) return false;
    return true;
  }

  asNumbers(): number[] {
    return this.bits.map((b) => (b ? 1 : 0));
  }

  key(): string {
    return this.asNumbers().join("");
  }
}

export interface VisitPoint {
  step: number;
  observation: number[];
  /** Reward exactly as received; null for the initial visit. */
  reward: number | null;
  action: number[] | null;
}

export type SessionPhase = "live" | "terminated" | "truncated";

/** One episode's view model; immutable payload data, mutable bookkeeping. */
export class SessionState {
  readonly sessionId: string;
  readonly cohort: string;
  readonly horizon: number;
  readonly dtMonths: number;
  readonly parentId: string | null;
  timeline: VisitPoint[] = [];
  phase: SessionPhase = "live";
  terminationReason: string | null = null;
  lastReward: number | null = null;
  selection: MedicationSelection;
  suggestion: SuggestPayload | null = null;

  constructor(
    schema: SchemaPayload,
    created: CreateSessionPayload,
    parentId: string | null = null,
  ) {
    this.sessionId = created.session_id;
    this.cohort = created.cohort;
    this.horizon = created.horizon;
    this.dtMonths = created.dt_months;
    this.parentId = parentId;
    const noMed = schema.actions.indexOf(schema.no_medication_action);
    this.selection = new MedicationSelection(noMed, undefined, schema.actions.length);
    this.timeline.push({
      step: 0,
      observation: created.observation.values,
      reward: null,
      action: null,
    });
  }

  /** Fold a step payload into the timeline; stores the reward verbatim. */
  applyStep(action: number[], payload: StepPayload): void {
    this.timeline.push({
      step: this.timeline.length,
      observation: payload.observation.values,
      reward: payload.reward,
      action,
    });
    this.lastReward = payload.reward;
    this.suggestion = null;
    if (payload.terminated) {
      this.phase = "terminated";
      this.terminationReason = String(payload.info["termination_reason"] ?? "terminated");
    } else if (payload.truncated) {
      this.phase = "truncated";
      this.terminationReason = "horizon";
    }
  }

  get done(): boolean {
    return this.phase !== "live";
  }
}

/** Reward chip content: the payload number rendered without recomputation. */
export function rewardChipText(reward: number | null): string {
  return reward === null ? "—" : String(reward);
}

/** Branch tree over forked sessions. */
export class BranchTree {
  readonly nodes = new Map<string, SessionState>();
  readonly children = new Map<string, string[]>();
  rootId: string | null = null;
  activeId: string | null = null;

  addRoot(state: SessionState): void {
    this.nodes.clear();
    this.children.clear();
    this.nodes.set(state.sessionId, state);
    this.rootId = state.sessionId;
    this.activeId = state.sessionId;
  }

  addBranch(state: SessionState): void {
    if (!state.parentId || !this.nodes.has(state.parentId)) {
      throw new Error("branch parent unknown");
    }
    this.nodes.set(state.sessionId, state);
    const siblings = this.children.get(state.parentId) ?? [];
    siblings.push(state.sessionId);
    this.children.set(state.parentId, siblings);
    this.activeId = state.sessionId;
  }

  active(): SessionState | null {
    return this.activeId ? this.nodes.get(this.activeId) ?? null : null;
  }

  /** Depth-first listing for rendering, each with its tree depth. */
  flatten(): Array<{ state: SessionState; depth: number }> {
    const out: Array<{ state: SessionState; depth: number }> = [];
    const walk = (id: string, depth: number) => {
      const node = this.nodes.get(id);
      if (!node) return;
      out.push({ state: node, depth });
      for (const child of this.children.get(id) ?? []) walk(child, depth + 1);
    };
    if (this.rootId) walk(this.rootId, 0);
    return out;
  }
}
