// Minimal markdown rendering for assistant output: fenced code blocks,
// inline code, bold, and pipe tables. Input is HTML-escaped first, so model
// output can never inject markup.

function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

function renderTable(lines: string[]): string {
  const rows = lines.map((line) =>
    line
      .replace(/^\|/, "")
      .replace(/\|$/, "")
      .split("|")
      .map((cell) => cell.trim()),
  );
  const isSeparator = (cells: string[]) =>
    cells.every((c) => /^:?-{2,}:?$/.test(c));
  let html = "<table>";
  rows.forEach((cells, i) => {
    if (isSeparator(cells)) return;
    const tag = i === 0 && rows.length > 1 && isSeparator(rows[1]) ? "th" : "td";
    html += `<tr>${cells.map((c) => `<${tag}>${inline(c)}</${tag}>`).join("")}</tr>`;
  });
  return html + "</table>";
}

function inline(text: string): string {
  return text
    .replace(/`([^`]+)`/g, "<code>$1</code>")
    .replace(/\*\*([^*]+)\*\*/g, "<strong>$1</strong>");
}

export function renderMarkdown(raw: string): string {
  const text = escapeHtml(raw);
  const out: string[] = [];
  const lines = text.split("\n");
  let i = 0;
  while (i < lines.length) {
    const line = lines[i];
    if (line.startsWith("```")) {
      const lang = line.slice(3).trim();
      const code: string[] = [];
      i += 1;
      while (i < lines.length && !lines[i].startsWith("```")) {
        code.push(lines[i]);
        i += 1;
      }
      i += 1; // closing fence
      out.push(
        `<pre><code${lang ? ` data-lang="${lang}"` : ""}>${code.join("\n")}</code></pre>`,
      );
      continue;
    }
    if (line.trimStart().startsWith("|")) {
      const table: string[] = [];
      while (i < lines.length && lines[i].trimStart().startsWith("|")) {
        table.push(lines[i]);
        i += 1;
      }
      out.push(renderTable(table));
      continue;
    }
    out.push(inline(line));
    i += 1;
  }
  return out
    .map((part) =>
      part.startsWith("<pre>") || part.startsWith("<table>")
        ? part
        : part + "<br>",
    )
    .join("");
}
