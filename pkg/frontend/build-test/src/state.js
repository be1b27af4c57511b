/**
 * Console view state. Panes poll independently; every request carries the
 * generation current at send time, and responses from an older generation
 * are dropped, so a study switch can never leave another study's rows on
 * screen.
 */
export class ConsoleState {
    constructor() {
        this.selectedStudy = null;
        this.selectedParticipant = null;
        this.generation = 0;
    }
    switchStudy(studyId) {
        this.selectedStudy = studyId;
        this.selectedParticipant = null;
        this.generation += 1;
        return this.generation;
    }
    selectParticipant(participantId) {
        this.selectedParticipant = participantId;
        this.generation += 1;
        return this.generation;
    }
    currentGeneration() {
        return this.generation;
    }
    /** True when a response tagged with `generation` is still current. */
    accepts(generation) {
        return generation === this.generation;
    }
}
/**
 * Displayed values pass through exactly as the API sent them; the console
 * never recomputes rates or outcomes. Rates use the server-formatted
 * percent string so what is on screen is byte-identical to the payload.
 */
export function displayCell(value) {
    return value === null ? "-" : value;
}
export function participantCells(row) {
    return [
        row.participant_id,
        row.handle,
        row.group,
        displayCell(row.current_state),
        displayCell(row.last_message_at),
        displayCell(row.success_rate_percent),
    ];
}
/**
 * Two-step manual-transition flow: begin() captures the before/after pair
 * for the confirmation dialog; only confirm() talks to the API, exactly
 * once; cancel() never does.
 */
export class TransitionFlow {
    constructor(api) {
        this.api = api;
        this.pending = null;
        this.calls = 0;
    }
    begin(participantId, from, to) {
        this.pending = { participantId, from, to };
        return { from, to };
    }
    get active() {
        return this.pending !== null;
    }
    async confirm() {
        if (!this.pending)
            throw new Error("no transition pending");
        const { participantId, to } = this.pending;
        this.pending = null;
        this.calls += 1;
        return this.api.transition(participantId, to);
    }
    cancel() {
        this.pending = null;
    }
}
