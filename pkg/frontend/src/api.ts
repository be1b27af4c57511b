import type {
  ApiErrorBody,
  AuditRecord,
  ConsoleConfig,
  Metrics,
  ParticipantRow,
  ReassignResult,
  StoredMessage,
  StudyInfo,
  TransitionResult,
} from "./types.js";

export class ApiError extends Error {
  constructor(public status: number, public code: string, message: string) {
    super(message);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

/** Thin typed client over the management API. One method, one request. */
export class ApiClient {
  constructor(
    private token: string,
    private baseUrl: string = "",
    private fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private headers(json = false): Record<string, string> {
    const h: Record<string, string> = {};
    if (this.token) h["Authorization"] = `Bearer ${this.token}`;
    if (json) h["Content-Type"] = "application/json";
    return h;
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(this.baseUrl + path, init);
    if (!response.ok) {
      let body: ApiErrorBody = { code: "ERROR", message: response.statusText };
      try {
        body = (await response.json()) as ApiErrorBody;
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(response.status, body.code, body.message);
    }
    if (response.status === 204) return undefined as T;
    return (await response.json()) as T;
  }

  consoleConfig(): Promise<ConsoleConfig> {
    return this.request("/console-config");
  }

  studies(): Promise<StudyInfo[]> {
    return this.request("/studies", { headers: this.headers() });
  }

  participants(studyId: string): Promise<ParticipantRow[]> {
    return this.request(`/studies/${encodeURIComponent(studyId)}/participants`, {
      headers: this.headers(),
    });
  }

  metrics(studyId: string): Promise<Metrics> {
    return this.request(`/studies/${encodeURIComponent(studyId)}/metrics`, {
      headers: this.headers(),
    });
  }

  studyAudit(studyId: string, kind?: string): Promise<AuditRecord[]> {
    const suffix = kind ? `?kind=${encodeURIComponent(kind)}` : "";
    return this.request(`/studies/${encodeURIComponent(studyId)}/audit${suffix}`, {
      headers: this.headers(),
    });
  }

  participantAudit(participantId: string, kind?: string): Promise<AuditRecord[]> {
    const suffix = kind ? `?kind=${encodeURIComponent(kind)}` : "";
    return this.request(
      `/participants/${encodeURIComponent(participantId)}/audit${suffix}`,
      { headers: this.headers() },
    );
  }

  messages(participantId: string): Promise<StoredMessage[]> {
    return this.request(
      `/participants/${encodeURIComponent(participantId)}/messages`,
      { headers: this.headers() },
    );
  }

  diagram(studyId: string, group: string): Promise<string> {
    return this.fetchFn(
      `${this.baseUrl}/studies/${encodeURIComponent(studyId)}/groups/` +
        `${encodeURIComponent(group)}/diagram`,
      { headers: this.headers() },
    ).then(async (response) => {
      if (!response.ok) throw new ApiError(response.status, "ERROR", "diagram failed");
      return response.text();
    });
  }

  transition(participantId: string, target: string): Promise<TransitionResult> {
    return this.request(
      `/participants/${encodeURIComponent(participantId)}/transition`,
      {
        method: "POST",
        headers: this.headers(true),
        body: JSON.stringify({ target }),
      },
    );
  }

  reassign(participantId: string, group: string): Promise<ReassignResult> {
    return this.request(`/participants/${encodeURIComponent(participantId)}/group`, {
      method: "POST",
      headers: this.headers(true),
      body: JSON.stringify({ group }),
    });
  }

  randomize(participantId: string, force = false): Promise<ReassignResult> {
    return this.request(`/participants/${encodeURIComponent(participantId)}/group`, {
      method: "POST",
      headers: this.headers(true),
      body: JSON.stringify({ randomize: true, force }),
    });
  }

  exportUrl(studyId: string): string {
    return `${this.baseUrl}/studies/${encodeURIComponent(studyId)}/export`;
  }
}
