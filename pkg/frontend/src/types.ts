// Payload shapes of the management API. The console renders these
// verbatim: rates, outcomes, and windows are computed server-side only.

export interface StudyInfo {
  study_id: string;
  display_name: string;
  groups: string[];
}

export interface ConsoleConfig {
  studies: StudyInfo[];
  poll_interval_ms: number;
}

export interface ParticipantRow {
  participant_id: string;
  handle: string;
  group: string;
  status: string;
  current_state: string | null;
  cycle_date: string | null;
  last_message_at: string | null;
  success_rate: number | null;
  success_rate_percent: string | null;
}

export interface AuditRecord {
  seq: number;
  at: string;
  actor: string;
  kind: string;
  participant_id: string | null;
  study_id: string;
  payload: Record<string, unknown>;
}

export interface StoredMessage {
  direction: "in" | "out";
  handle: string;
  at: string;
  body: string;
  intent: string | null;
  idempotency_key: string | null;
  audit_seq: number;
}

export interface Metrics {
  study_id: string;
  messages_in: number;
  messages_out: number;
  unrecognized_inbound: number;
  error_rate: number;
  error_rate_percent: string;
  error_rate_defined: boolean;
  reminder_messages: number;
  success_rates: Record<string, number>;
  mean_success_rate: number;
}

export interface TransitionResult {
  participant_id: string;
  from: string;
  to: string;
}

export interface ReassignResult {
  old_group: string;
  new_group: string;
  no_change: boolean;
  effective_cycle?: string;
  randomized?: boolean;
}

export interface ApiErrorBody {
  code: string;
  message: string;
}
