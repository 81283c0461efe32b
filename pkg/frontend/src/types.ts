/** Wire payloads exchanged with the simulation service. */

export interface FeatureInfo {
  name: string;
  kind: "continuous" | "binary";
  unit: string;
}

export interface SchemaPayload {
  name: string;
  features: FeatureInfo[];
  actions: string[];
  time_feature: string;
  no_medication_action: string;
  ad_treatment_action: string;
  memory_score_feature: string;
  horizon: number;
  dt_months: number;
  cohorts: string[];
  fingerprint: string;
  observation_bounds?: { low: number[]; high: number[] };
}

export interface ObservationPayload {
  values: number[];
  named: Record<string, number>;
}

export interface CreateSessionPayload {
  session_id: string;
  observation: ObservationPayload;
  cohort: string;
  horizon: number;
  dt_months: number;
}

export interface StepPayload {
  observation: ObservationPayload;
  reward: number;
  terminated: boolean;
  truncated: boolean;
  info: Record<string, unknown>;
}

export interface SuggestPayload {
  policy: string;
  action: number[];
  action_names: string[];
  attribution?: {
    action_index: number;
    action_name: string;
    values: number[];
    feature_names: string[];
  };
}

export interface SessionViewPayload {
  session_id: string;
  cohort: string;
  done: boolean;
  step_index: number;
  termination_reason: string;
  horizon: number;
  dt_months: number;
  initial_observation: number[];
  steps: Array<{
    step: number;
    action: number[];
    observation: number[];
    reward: number;
    terminated: boolean;
    truncated: boolean;
    reason: string;
  }>;
}

export interface PolicyListPayload {
  policies: Array<{ name: string; deterministic: boolean }>;
}

export interface ApiErrorPayload {
  error: { code: string; message: string };
}
