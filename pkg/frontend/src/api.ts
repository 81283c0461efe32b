/** Typed client for the simulation service; fetch is injectable for tests. */

import type {
  ApiErrorPayload,
  CreateSessionPayload,
  PolicyListPayload,
  SchemaPayload,
  SessionViewPayload,
  StepPayload,
  SuggestPayload,
} from "./types.js";

export class ServiceError extends Error {
  readonly code: string;
  readonly status: number;

  constructor(code: string, message: string, status: number) {
    super(`${code}: ${message}`);
    this.code = code;
    this.status = status;
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  private readonly baseUrl: string;
  private readonly fetchFn: FetchLike;
  private schemaCache: SchemaPayload | null = null;

  constructor(baseUrl: string, fetchFn?: FetchLike) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
    this.fetchFn = fetchFn ?? ((input, init) => fetch(input, init));
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(`${this.baseUrl}${path}`, {
      headers: { "Content-Type": "application/json" },
      ...init,
    });
    const body = (await response.json()) as T | ApiErrorPayload;
    if (typeof body === "object" && body !== null && "error" in (body as object)) {
      const err = (body as ApiErrorPayload).error;
      throw new ServiceError(err.code, err.message, response.status);
    }
    if (!response.ok) {
      throw new ServiceError("internal", `HTTP ${response.status}`, response.status);
    }
    return body as T;
  }

  /** Schema is immutable for a running service; fetched once and cached. */
  async schema(): Promise<SchemaPayload> {
    if (!this.schemaCache) {
      this.schemaCache = await this.request<SchemaPayload>("/schema");
    }
    return this.schemaCache;
  }

  policies(): Promise<PolicyListPayload> {
    return this.request<PolicyListPayload>("/policies");
  }

  createSession(cohort: string, seed?: number): Promise<CreateSessionPayload> {
    const body: Record<string, unknown> = { cohort };
    if (seed !== undefined) body["seed"] = seed;
    return this.request<CreateSessionPayload>("/sessions", {
      method: "POST",
      body: JSON.stringify(body),
    });
  }

  getSession(id: string): Promise<SessionViewPayload> {
    return this.request<SessionViewPayload>(`/sessions/${id}`);
  }

  step(id: string, action: number[]): Promise<StepPayload> {
    return this.request<StepPayload>(`/sessions/${id}/step`, {
      method: "POST",
      body: JSON.stringify({ action }),
    });
  }

  fork(id: string): Promise<{ session_id: string; forked_from: string; done: boolean }> {
    return this.request(`/sessions/${id}/fork`, { method: "POST" });
  }

  deleteSession(id: string): Promise<{ deleted: string }> {
    return this.request(`/sessions/${id}`, { method: "DELETE" });
  }

  suggest(id: string, policy: string, attribute = false): Promise<SuggestPayload> {
    const params = new URLSearchParams({ policy, attribute: String(attribute) });
    return this.request<SuggestPayload>(`/sessions/${id}/suggest?${params}`);
  }
}
