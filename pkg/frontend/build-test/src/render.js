import { dotSummary, highlightState } from "./dot.js";
import { participantCells } from "./state.js";
function el(tag, className, text) {
    const node = document.createElement(tag);
    if (className)
        node.className = className;
    if (text !== undefined)
        node.textContent = text;
    return node;
}
export function renderBanner(container, message) {
    container.textContent = message ?? "";
    container.style.display = message ? "block" : "none";
}
export function renderParticipantTable(tbody, rows, selected, onSelect) {
    tbody.replaceChildren();
    for (const row of rows) {
        const tr = el("tr", row.participant_id === selected ? "selected" : "");
        tr.dataset.participant = row.participant_id;
        for (const cell of participantCells(row)) {
            tr.appendChild(el("td", "", cell));
        }
        tr.addEventListener("click", () => onSelect(row.participant_id));
        tbody.appendChild(tr);
    }
}
export function renderTimeline(container, messages) {
    container.replaceChildren();
    for (const message of messages) {
        const item = el("div", `msg msg-${message.direction}`);
        const meta = message.direction === "in"
            ? `${message.at} · received${message.intent ? ` · ${message.intent}` : ""}`
            : `${message.at} · sent`;
        item.appendChild(el("div", "msg-meta", meta));
        item.appendChild(el("div", "msg-body", message.body));
        container.appendChild(item);
    }
    container.scrollTop = container.scrollHeight;
}
export function renderAudit(container, records) {
    container.replaceChildren();
    for (const record of records) {
        const item = el("div", "audit-row");
        item.appendChild(el("span", "audit-seq", `#${record.seq}`));
        item.appendChild(el("span", `audit-kind kind-${record.kind}`, record.kind));
        item.appendChild(el("span", "audit-at", record.at));
        item.appendChild(el("span", "audit-actor", record.actor));
        item.appendChild(el("span", "audit-payload", JSON.stringify(record.payload)));
        container.appendChild(item);
    }
}
export function renderDiagram(container, dot, currentState) {
    container.replaceChildren();
    const marked = highlightState(dot, currentState);
    const pre = el("pre", "dot-source", marked);
    const summary = dotSummary(dot);
    const list = el("div", "dot-summary");
    const states = el("div", "dot-states");
    for (const node of summary.nodes) {
        states.appendChild(el("span", node === currentState ? "state-chip current" : "state-chip", node));
    }
    list.appendChild(states);
    for (const edge of summary.edges) {
        list.appendChild(el("div", "dot-edge", edge));
    }
    container.appendChild(list);
    container.appendChild(pre);
}
