import { ApiClient, ApiError } from "./api.js";
import { renderAudit, renderBanner, renderDiagram, renderParticipantTable, renderTimeline, } from "./render.js";
import { ConsoleState, TransitionFlow } from "./state.js";
function byId(id) {
    const node = document.getElementById(id);
    if (!node)
        throw new Error(`missing element #${id}`);
    return node;
}
async function boot() {
    const token = window.localStorage.getItem("smartstate_token") ??
        window.prompt("Researcher API token") ?? "";
    window.localStorage.setItem("smartstate_token", token);
    const api = new ApiClient(token);
    const state = new ConsoleState();
    const flow = new TransitionFlow(api);
    const config = await api.consoleConfig();
    const studies = config.studies;
    let rows = [];
    const dropdown = byId("study-switcher");
    for (const study of studies) {
        const option = document.createElement("option");
        option.value = study.study_id;
        option.textContent = study.display_name;
        dropdown.appendChild(option);
    }
    const banner = byId("banner");
    const tbody = byId("participant-rows");
    const timeline = byId("timeline");
    const auditPane = byId("audit");
    const diagramPane = byId("diagram");
    const detailTitle = byId("detail-title");
    const auditFilter = byId("audit-filter");
    const exportLink = byId("export-link");
    const dialog = byId("confirm-dialog");
    const dialogText = byId("confirm-text");
    function currentStudy() {
        const found = studies.find((s) => s.study_id === state.selectedStudy);
        return found ?? studies[0];
    }
    function selectedRow() {
        return rows.find((r) => r.participant_id === state.selectedParticipant);
    }
    async function refreshTable(generation) {
        try {
            const data = await api.participants(currentStudy().study_id);
            if (!state.accepts(generation))
                return;
            rows = data;
            renderParticipantTable(tbody, rows, state.selectedParticipant, (pid) => {
                const gen = state.selectParticipant(pid);
                void refreshDetail(gen);
                renderParticipantTable(tbody, rows, pid, () => undefined);
            });
            renderBanner(banner, null);
        }
        catch (err) {
            renderBanner(banner, `API unreachable: ${err.message}`);
        }
    }
    async function refreshDetail(generation) {
        const row = selectedRow();
        if (!row) {
            detailTitle.textContent = "Select a participant";
            timeline.replaceChildren();
            auditPane.replaceChildren();
            diagramPane.replaceChildren();
            return;
        }
        detailTitle.textContent =
            `${row.participant_id} · ${row.handle} · ${row.group} · ${row.current_state ?? "-"}`;
        try {
            const kind = auditFilter.value || undefined;
            const [messages, audit, dot] = await Promise.all([
                api.messages(row.participant_id),
                api.participantAudit(row.participant_id, kind),
                api.diagram(currentStudy().study_id, row.group),
            ]);
            if (!state.accepts(generation))
                return;
            renderTimeline(timeline, messages);
            renderAudit(auditPane, audit);
            renderDiagram(diagramPane, dot, row.current_state);
        }
        catch (err) {
            renderBanner(banner, `Detail load failed: ${err.message}`);
        }
    }
    function rescope() {
        const generation = state.switchStudy(dropdown.value || studies[0].study_id);
        exportLink.href = api.exportUrl(currentStudy().study_id);
        void refreshTable(generation);
        void refreshDetail(generation);
    }
    dropdown.addEventListener("change", rescope);
    byId("transition-button").addEventListener("click", () => {
        const row = selectedRow();
        if (!row)
            return;
        const target = byId("transition-target").value.trim();
        if (!target)
            return;
        const shown = flow.begin(row.participant_id, row.current_state ?? "-", target);
        dialogText.textContent =
            `Move ${row.participant_id} from "${shown.from}" to "${shown.to}"? ` +
                "The participant will not be messaged.";
        dialog.style.display = "flex";
    });
    byId("confirm-yes").addEventListener("click", () => {
        dialog.style.display = "none";
        void (async () => {
            try {
                await flow.confirm();
                const generation = state.currentGeneration();
                await refreshTable(generation);
                await refreshDetail(generation);
            }
            catch (err) {
                const detail = err instanceof ApiError ? `${err.code}: ${err.message}`
                    : String(err);
                renderBanner(banner, `Transition rejected. ${detail}`);
            }
        })();
    });
    byId("confirm-no").addEventListener("click", () => {
        flow.cancel();
        dialog.style.display = "none";
    });
    byId("reassign-button").addEventListener("click", () => {
        const row = selectedRow();
        if (!row)
            return;
        const group = byId("reassign-group").value;
        void (async () => {
            try {
                const result = group === "randomize"
                    ? await api.randomize(row.participant_id)
                    : await api.reassign(row.participant_id, group);
                renderBanner(banner, result.no_change
                    ? `No change: already in ${result.new_group}.`
                    : `Reassigned ${row.participant_id}: ${result.old_group} -> ${result.new_group}.`);
                await refreshTable(state.currentGeneration());
            }
            catch (err) {
                const detail = err instanceof ApiError ? `${err.code}: ${err.message}`
                    : String(err);
                renderBanner(banner, `Reassign rejected. ${detail}`);
            }
        })();
    });
    auditFilter.addEventListener("change", () => {
        void refreshDetail(state.currentGeneration());
    });
    const reassignGroup = byId("reassign-group");
    function fillGroupChoices() {
        reassignGroup.replaceChildren();
        for (const group of currentStudy().groups) {
            const option = document.createElement("option");
            option.value = group;
            option.textContent = group;
            reassignGroup.appendChild(option);
        }
        const randomize = document.createElement("option");
        randomize.value = "randomize";
        randomize.textContent = "randomize (post-baseline)";
        reassignGroup.appendChild(randomize);
    }
    dropdown.addEventListener("change", fillGroupChoices);
    fillGroupChoices();
    rescope();
    window.setInterval(() => {
        const generation = state.currentGeneration();
        void refreshTable(generation);
        void refreshDetail(generation);
    }, config.poll_interval_ms);
}
void boot();
