import { describe, expect, it } from "vitest";

import {
  BranchTree,
  MedicationSelection,
  SessionState,
  rewardChipText,
} from "../src/state.js";
import type { CreateSessionPayload, SchemaPayload, StepPayload } from "../src/types.js";

const N_ACTIONS = 17;
const NO_MED = 9;

function isValid(bits: ReadonlyArray<boolean>): boolean {
  const count = bits.filter(Boolean).length;
  return count >= 1 && !(bits[NO_MED] && count > 1);
}

describe("medication checkbox machine", () => {
  it("starts at the no-medication singleton", () => {
    const s = new MedicationSelection(NO_MED, undefined, N_ACTIONS);
    expect(s.bits[NO_MED]).toBe(true);
    expect(s.asNumbers().reduce((a, b) => a + b, 0)).toBe(1);
    expect(s.isValid()).toBe(true);
  });

  it("cannot produce an invalid action under any transition sequence (exhaustive)", () => {
    // Breadth-first over the full reachable graph with all 17 toggles.
    const start = new MedicationSelection(NO_MED, undefined, N_ACTIONS);
    const seen = new Map<string, MedicationSelection>();
    seen.set(start.key(), start);
    const queue: MedicationSelection[] = [start];
    while (queue.length) {
      const node = queue.pop()!;
      for (let i = 0; i < N_ACTIONS; i++) {
        const next = node.toggle(i);
        expect(next.isValid()).toBe(true);
        expect(isValid(next.bits)).toBe(true);
        if (!seen.has(next.key())) {
          seen.set(next.key(), next);
          queue.push(next);
        }
      }
    }
    // reachable set = every valid selection: 2^16 - 1 treatment subsets + no-med
    expect(seen.size).toBe(2 ** (N_ACTIONS - 1) - 1 + 1);
    for (const sel of seen.values()) {
      expect(isValid(sel.bits)).toBe(true);
    }
  });

  it("deselecting everything re-arms no-medication", () => {
    let s = new MedicationSelection(NO_MED, undefined, N_ACTIONS);
    s = s.toggle(0); // treatment on, no-med off
    expect(s.bits[0]).toBe(true);
    expect(s.bits[NO_MED]).toBe(false);
    s = s.toggle(0); // remove the only treatment
    expect(s.bits[NO_MED]).toBe(true);
  });

  it("selecting no-medication clears treatments", () => {
    let s = new MedicationSelection(NO_MED, undefined, N_ACTIONS);
    s = s.toggle(0);
    s = s.toggle(3);
    s = s.toggle(NO_MED);
    expect(s.asNumbers().reduce((a, b) => a + b, 0)).toBe(1);
    expect(s.bits[NO_MED]).toBe(true);
  });

  it("toggling the lone no-medication box is a no-op", () => {
    const s = new MedicationSelection(NO_MED, undefined, N_ACTIONS);
    expect(s.toggle(NO_MED)).toBe(s);
  });
});

const schema: SchemaPayload = {
  name: "test",
  features: [
    { name: "ADNI_MEM", kind: "continuous", unit: "score" },
    { name: "subject_age", kind: "continuous", unit: "years" },
  ],
  actions: Array.from({ length: N_ACTIONS }, (_, i) =>
    i === NO_MED ? "No Medication_active" : `a${i}_active`,
  ),
  time_feature: "next_visit_months",
  no_medication_action: "No Medication_active",
  ad_treatment_action: "a0_active",
  memory_score_feature: "ADNI_MEM",
  horizon: 22,
  dt_months: 6,
  cohorts: ["all"],
  fingerprint: "x",
};

function created(): CreateSessionPayload {
  return {
    session_id: "abc123",
    observation: { values: [0.5, 76.2], named: { ADNI_MEM: 0.5, subject_age: 76.2 } },
    cohort: "all",
    horizon: 22,
    dt_months: 6,
  };
}

function stepPayload(reward: number, terminated = false, truncated = false): StepPayload {
  return {
    observation: { values: [0.4, 76.7], named: {} },
    reward,
    terminated,
    truncated,
    info: { termination_reason: terminated ? "invalid_action" : "none" },
  };
}

describe("session state", () => {
  it("stores rewards verbatim from the payload", () => {
    const s = new SessionState(schema, created());
    const raw = 4.714045207910317; // full-precision payload value
    s.applyStep([0, 1], stepPayload(raw));
    expect(s.lastReward).toBe(raw); // identity, no recomputation
    expect(s.timeline[1]!.reward).toBe(raw);
    expect(rewardChipText(s.lastReward)).toBe(String(raw));
    expect(rewardChipText(s.lastReward)).toBe("4.714045207910317");
  });

  it("rewards in payloads stay within the environment bounds", () => {
    const s = new SessionState(schema, created());
    s.applyStep([1], stepPayload(-10.0, true));
    expect(s.lastReward).toBeGreaterThanOrEqual(-10);
    expect(s.lastReward).toBeLessThanOrEqual(10);
  });

  it("timeline grows by one point per step and is capped by the horizon", () => {
    const s = new SessionState(schema, created());
    for (let i = 0; i < 22; i++) {
      s.applyStep([1], stepPayload(0.1, false, i === 21));
    }
    expect(s.timeline.length).toBe(23); // initial + 22 steps
    expect(s.phase).toBe("truncated");
    expect(s.terminationReason).toBe("horizon");
  });

  it("termination flips the phase and records the reason", () => {
    const s = new SessionState(schema, created());
    s.applyStep([0], stepPayload(-10, true));
    expect(s.done).toBe(true);
    expect(s.phase).toBe("terminated");
    expect(s.terminationReason).toBe("invalid_action");
  });
});

describe("branch tree", () => {
  it("tracks forked branches under their parents", () => {
    const tree = new BranchTree();
    const root = new SessionState(schema, created());
    tree.addRoot(root);
    const childPayload = { ...created(), session_id: "child1" };
    const child = new SessionState(schema, childPayload, root.sessionId);
    tree.addBranch(child);
    const flat = tree.flatten();
    expect(flat.map((f) => f.state.sessionId)).toEqual(["abc123", "child1"]);
    expect(flat[1]!.depth).toBe(1);
    expect(tree.active()?.sessionId).toBe("child1");
  });

  it("rejects branches with unknown parents", () => {
    const tree = new BranchTree();
    tree.addRoot(new SessionState(schema, created()));
    const orphan = new SessionState(schema, { ...created(), session_id: "x" }, "ghost");
    expect(() => tree.addBranch(orphan)).toThrow();
  });
});
