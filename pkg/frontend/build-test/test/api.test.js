import assert from "node:assert/strict";
import { test } from "node:test";
import { ApiClient, ApiError } from "../src/api.js";
function fakeFetch(respond, log) {
    return async (url, init) => {
        log.push({
            url,
            method: init?.method ?? "GET",
            headers: init?.headers ?? {},
            body: init?.body ?? null,
        });
        const { status, body } = respond(url, init);
        return new Response(typeof body === "string" ? body : JSON.stringify(body), { status, headers: { "Content-Type": "application/json" } });
    };
}
test("bearer token attached to researcher requests", async () => {
    const log = [];
    const client = new ApiClient("secret", "", fakeFetch(() => ({ status: 200, body: [] }), log));
    await client.participants("tre_main");
    assert.equal(log.length, 1);
    assert.equal(log[0].headers["Authorization"], "Bearer secret");
    assert.equal(log[0].url, "/studies/tre_main/participants");
});
test("manual transition posts exactly one request with the target body", async () => {
    const log = [];
    const client = new ApiClient("secret", "", fakeFetch(() => ({ status: 200, body: { participant_id: "p1", from: "a", to: "b" } }), log));
    const result = await client.transition("p1", "initial");
    assert.equal(result.to, "b");
    assert.equal(log.length, 1);
    assert.equal(log[0].method, "POST");
    assert.equal(log[0].url, "/participants/p1/transition");
    assert.deepEqual(JSON.parse(log[0].body ?? ""), { target: "initial" });
});
test("api errors surface code and message verbatim", async () => {
    const log = [];
    const client = new ApiClient("secret", "", fakeFetch(() => ({ status: 404, body: { code: "UNKNOWN_STATE", message: "no state" } }), log));
    await assert.rejects(() => client.transition("p1", "nope"), (err) => {
        assert.ok(err instanceof ApiError);
        assert.equal(err.status, 404);
        assert.equal(err.code, "UNKNOWN_STATE");
        assert.equal(err.message, "no state");
        return true;
    });
});
test("study scope is baked into every study-level url", async () => {
    const log = [];
    const client = new ApiClient("secret", "", fakeFetch(() => ({ status: 200, body: { success_rates: {} } }), log));
    await client.metrics("study_b");
    await client.studyAudit("study_b", "FAULT");
    assert.deepEqual(log.map((r) => r.url), ["/studies/study_b/metrics", "/studies/study_b/audit?kind=FAULT"]);
});
test("export url points at the zip endpoint without fetching", () => {
    const log = [];
    const client = new ApiClient("secret", "", fakeFetch(() => ({ status: 200, body: {} }), log));
    assert.equal(client.exportUrl("tre_main"), "/studies/tre_main/export");
    assert.equal(log.length, 0);
});
