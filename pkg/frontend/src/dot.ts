/**
 * Post-process a server-rendered DOT digraph so the participant's current
 * state is visually marked. Purely textual: the node line keeps its shape
 * and gains a fill. The server's DOT is the single source of structure.
 */
export function highlightState(dot: string, state: string | null): string {
  if (!state) return dot;
  const needle = `"${state}" [shape=`;
  return dot
    .split("\n")
    .map((line) => {
      const trimmed = line.trimStart();
      if (trimmed.startsWith(needle) && trimmed.endsWith("];")) {
        return line.replace("];", ', style=filled, fillcolor="#ffd75e"];');
      }
      return line;
    })
    .join("\n");
}

/** Minimal fallback rendering of a DOT digraph when Graphviz is absent:
 * lists states and labeled transitions so the pane is still useful. */
export function dotSummary(dot: string): { nodes: string[]; edges: string[] } {
  const nodes: string[] = [];
  const edges: string[] = [];
  for (const raw of dot.split("\n")) {
    const line = raw.trim();
    const edge = line.match(/^"([^"]+)" -> "([^"]+)" \[label="([^"]+)"/);
    if (edge) {
      edges.push(`${edge[1]} -> ${edge[2]} : ${edge[3]}`);
      continue;
    }
    const node = line.match(/^"([^"]+)" \[shape=/);
    if (node) nodes.push(node[1]);
  }
  return { nodes, edges };
}
