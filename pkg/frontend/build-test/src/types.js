// Payload shapes of the management API. The console renders these
// verbatim: rates, outcomes, and windows are computed server-side only.
export {};
