import type { ParticipantRow } from "./types.js";

/**
 * Console view state. Panes poll independently; every request carries the
 * generation current at send time, and responses from an older generation
 * are dropped, so a study switch can never leave another study's rows on
 * screen.
 */
export class ConsoleState {
  selectedStudy: string | null = null;
  selectedParticipant: string | null = null;
  private generation = 0;

  switchStudy(studyId: string): number {
    this.selectedStudy = studyId;
    this.selectedParticipant = null;
    this.generation += 1;
    return this.generation;
  }

  selectParticipant(participantId: string | null): number {
    this.selectedParticipant = participantId;
    this.generation += 1;
    return this.generation;
  }

  currentGeneration(): number {
    return this.generation;
  }

  /** True when a response tagged with `generation` is still current. */
  accepts(generation: number): boolean {
    return generation === this.generation;
  }
}

/**
 * Displayed values pass through exactly as the API sent them; the console
 * never recomputes rates or outcomes. Rates use the server-formatted
 * percent string so what is on screen is byte-identical to the payload.
 */
export function displayCell(value: string | null): string {
  return value === null ? "-" : value;
}

export function participantCells(row: ParticipantRow): string[] {
  return [
    row.participant_id,
    row.handle,
    row.group,
    displayCell(row.current_state),
    displayCell(row.last_message_at),
    displayCell(row.success_rate_percent),
  ];
}

export interface TransitionApi {
  transition(participantId: string, target: string): Promise<unknown>;
}

/**
 * Two-step manual-transition flow: begin() captures the before/after pair
 * for the confirmation dialog; only confirm() talks to the API, exactly
 * once; cancel() never does.
 */
export class TransitionFlow {
  private pending: { participantId: string; from: string; to: string } | null = null;
  calls = 0;

  constructor(private api: TransitionApi) {}

  begin(participantId: string, from: string, to: string): { from: string; to: string } {
    this.pending = { participantId, from, to };
    return { from, to };
  }

  get active(): boolean {
    return this.pending !== null;
  }

  async confirm(): Promise<unknown> {
    if (!this.pending) throw new Error("no transition pending");
    const { participantId, to } = this.pending;
    this.pending = null;
    this.calls += 1;
    return this.api.transition(participantId, to);
  }

  cancel(): void {
    this.pending = null;
  }
}
