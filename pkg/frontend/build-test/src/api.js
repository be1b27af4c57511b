export class ApiError extends Error {
    constructor(status, code, message) {
        super(message);
        this.status = status;
        this.code = code;
    }
}
/** Thin typed client over the management API. One method, one request. */
export class ApiClient {
    constructor(token, baseUrl = "", fetchFn = (input, init) => fetch(input, init)) {
        this.token = token;
        this.baseUrl = baseUrl;
        this.fetchFn = fetchFn;
    }
    headers(json = false) {
        const h = {};
        if (this.token)
            h["Authorization"] = `Bearer ${this.token}`;
        if (json)
            h["Content-Type"] = "application/json";
        return h;
    }
    async request(path, init) {
        const response = await this.fetchFn(this.baseUrl + path, init);
        if (!response.ok) {
            let body = { code: "ERROR", message: response.statusText };
            try {
                body = (await response.json());
            }
            catch {
                // non-JSON error body; keep the status text
            }
            throw new ApiError(response.status, body.code, body.message);
        }
        if (response.status === 204)
            return undefined;
        return (await response.json());
    }
    consoleConfig() {
        return this.request("/console-config");
    }
    studies() {
        return this.request("/studies", { headers: this.headers() });
    }
    participants(studyId) {
        return this.request(`/studies/${encodeURIComponent(studyId)}/participants`, {
            headers: this.headers(),
        });
    }
    metrics(studyId) {
        return this.request(`/studies/${encodeURIComponent(studyId)}/metrics`, {
            headers: this.headers(),
        });
    }
    studyAudit(studyId, kind) {
        const suffix = kind ? `?kind=${encodeURIComponent(kind)}` : "";
        return this.request(`/studies/${encodeURIComponent(studyId)}/audit${suffix}`, {
            headers: this.headers(),
        });
    }
    participantAudit(participantId, kind) {
        const suffix = kind ? `?kind=${encodeURIComponent(kind)}` : "";
        return this.request(`/participants/${encodeURIComponent(participantId)}/audit${suffix}`, { headers: this.headers() });
    }
    messages(participantId) {
        return this.request(`/participants/${encodeURIComponent(participantId)}/messages`, { headers: this.headers() });
    }
    diagram(studyId, group) {
        return this.fetchFn(`${this.baseUrl}/studies/${encodeURIComponent(studyId)}/groups/` +
            `${encodeURIComponent(group)}/diagram`, { headers: this.headers() }).then(async (response) => {
            if (!response.ok)
                throw new ApiError(response.status, "ERROR", "diagram failed");
            return response.text();
        });
    }
    transition(participantId, target) {
        return this.request(`/participants/${encodeURIComponent(participantId)}/transition`, {
            method: "POST",
            headers: this.headers(true),
            body: JSON.stringify({ target }),
        });
    }
    reassign(participantId, group) {
        return this.request(`/participants/${encodeURIComponent(participantId)}/group`, {
            method: "POST",
            headers: this.headers(true),
            body: JSON.stringify({ group }),
        });
    }
    randomize(participantId, force = false) {
        return this.request(`/participants/${encodeURIComponent(participantId)}/group`, {
            method: "POST",
            headers: this.headers(true),
            body: JSON.stringify({ randomize: true, force }),
        });
    }
    exportUrl(studyId) {
        return `${this.baseUrl}/studies/${encodeURIComponent(studyId)}/export`;
    }
}
