import init, { attention, gate_curve, triplet } from "./pkg/wasm_demo.js";

const $ = (id) => document.getElementById(id);
const fmt = (x) => x.toFixed(4);

function parse(json, out) {
  const v = JSON.parse(json);
  if (v.error) {
    out.innerHTML = `<p class="err">${v.error}</p>`;
    return null;
  }
  return v;
}

function bars(weights, labels) {
  return weights
    .map((w, i) => `<tr><th>${labels[i]}</th><td>${fmt(w)}</td><td><span class="bar" style="width:${160 * w}px"></span></td></tr>`)
    .join("");
}

function renderAttention() {
  const sharp = Number($("a-sharp").value);
  $("a-sharp-v").textContent = sharp.toFixed(2);
  const out = $("a-out");
  const v = parse(attention(Number($("a-seed").value), Number($("a-heads").value), sharp), out);
  if (!v) return;
  let html = "";
  v.fm.forEach((a, h) => {
    html += `<h3>fusion head ${h}</h3><table>${bars(a, ["v→v", "v→w", "w→v", "w→w"])}</table>`;
  });
  v.rm.forEach((a, h) => {
    html += `<h3>memory head ${h} (step 2)</h3><table>${bars(a, ["M→M", "M→f"])}</table>`;
  });
  out.innerHTML = html;
}

function renderGates() {
  const out = $("g-out");
  const rows = parse(
    gate_curve(Number($("g-seed").value), Number($("g-in").value), Number($("g-f").value), Number($("g-steps").value)),
    out,
  );
  if (!rows) return;
  const c = $("g-plot");
  const ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  const top = Math.max(1e-9, ...rows.flatMap((r) => [r.copy_gap, r.overwrite_gap, r.max_abs]));
  const line = (key, colour) => {
    ctx.strokeStyle = colour;
    ctx.beginPath();
    rows.forEach((r, i) => {
      const x = 10 + (i / Math.max(1, rows.length - 1)) * (c.width - 20);
      const y = c.height - 10 - (r[key] / top) * (c.height - 20);
      i ? ctx.lineTo(x, y) : ctx.moveTo(x, y);
    });
    ctx.stroke();
  };
  line("copy_gap", "#c50");
  line("overwrite_gap", "#27c");
  line("max_abs", "#999");
  const last = rows[rows.length - 1];
  out.innerHTML = `<p><span style="color:#c50">copy gap</span>, <span style="color:#27c">overwrite gap</span>, <span style="color:#999">max |M|</span>.
    Mean gates: g_i = ${last.g_i.toExponential(3)}, g_f = ${last.g_f.toExponential(3)}.
    At the last step the copy gap is ${last.copy_gap.toExponential(3)} and the overwrite gap is ${last.overwrite_gap.toExponential(3)}.</p>`;
}

function renderTriplet() {
  const m = Number($("t-m").value);
  $("t-m-v").textContent = m.toFixed(2);
  const out = $("t-out");
  const v = parse(triplet($("t-mat").value, m), out);
  if (!v) return;
  const rows = v.items
    .map((it) => `<tr><td>${it.anchor}</td><td>${it.image_negative}</td><td>${fmt(it.image_hinge)}</td><td>${it.caption_negative}</td><td>${fmt(it.caption_hinge)}</td></tr>`)
    .join("");
  out.innerHTML = `<p>loss = <b>${fmt(v.loss)}</b></p>
    <table><tr><th>anchor</th><th>hardest image</th><th>hinge</th><th>hardest caption</th><th>hinge</th></tr>${rows}</table>`;
}

await init();
for (const id of ["a-seed", "a-heads", "a-sharp"]) $(id).addEventListener("input", renderAttention);
for (const id of ["g-in", "g-f", "g-steps", "g-seed"]) $(id).addEventListener("input", renderGates);
for (const id of ["t-mat", "t-m"]) $(id).addEventListener("input", renderTriplet);
renderAttention();
renderGates();
renderTriplet();
