import init, { fixture_layers, allocate, staircase, mse_by_bits, separability } from "./pkg/csmpq_wasm.js";

const $ = (id) => document.getElementById(id);
const fmt = (x, d = 4) => Number(x).toFixed(d);

function call(fn, ...args) {
  try {
    return { ok: JSON.parse(fn(...args)) };
  } catch (e) {
    return { err: String(e) };
  }
}

let layers = [];

function renderAlloc() {
  const beta = +$("beta").value;
  const frac = +$("frac").value;
  $("betaV").textContent = beta;
  $("fracV").textContent = frac + "%";
  const bops = $("kind").value === "bops";
  const r = call(
    allocate,
    new Float64Array(layers.map((l) => l.alpha)),
    new Float64Array(layers.map((l) => l.param_count)),
    new Float64Array(layers.map((l) => l.mac_count)),
    beta, frac / 100, bops, 8, +$("bmin").value, +$("bmax").value, $("pin").checked,
  );
  if (r.err) {
    $("alloc").innerHTML = `<p class="err">${r.err}</p>`;
    return;
  }
  const a = r.ok;
  const rows = layers
    .map((l, i) => `<tr><td style="text-align:left">${l.layer_id}</td><td>${fmt(l.alpha)}</td><td>${fmt(a.theta[i])}</td><td>${a.bits[i]}</td></tr>`)
    .join("");
  const used = bops ? `${fmt(a.bops / 1e6, 3)} M BOPs of ${fmt(a.limit / 1e6, 3)} M` : `${fmt(a.size_bytes / 1024, 2)} KiB of ${fmt(a.limit / 1024, 2)} KiB`;
  $("alloc").innerHTML =
    `<table><tr><th>layer</th><th>alpha</th><th>theta</th><th>bits</th></tr>${rows}</table>` +
    `<p>${used}. objective ${fmt(a.objective)} (relaxed ${fmt(a.relaxed_objective)})</p>`;
}

function axes(ctx, w, h) {
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#aaa";
  ctx.beginPath();
  ctx.moveTo(0, h / 2); ctx.lineTo(w, h / 2);
  ctx.moveTo(w / 2, 0); ctx.lineTo(w / 2, h);
  ctx.stroke();
}

function renderStair() {
  const bits = +$("qbits").value;
  $("qbitsV").textContent = bits;
  const r = call(staircase, bits, 401);
  const c = $("stair"), ctx = c.getContext("2d");
  axes(ctx, c.width, c.height);
  if (r.err) { $("qinfo").innerHTML = `<p class="err">${r.err}</p>`; return; }
  const px = (x) => ((x + 1) / 2) * (c.width - 20) + 10;
  const py = (y) => c.height - (((y + 1) / 2) * (c.height - 20) + 10);
  ctx.strokeStyle = "#36c";
  ctx.beginPath();
  r.ok.x.forEach((x, i) => (i ? ctx.lineTo : ctx.moveTo).call(ctx, px(x), py(r.ok.y[i])));
  ctx.stroke();
  $("qinfo").textContent = `${r.ok.levels} levels, scale ${fmt(r.ok.scale, 5)}, mse on the ramp ${r.ok.mse.toExponential(3)}`;
}

function renderMse() {
  const r = call(mse_by_bits);
  const c = $("mse"), ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  if (r.err) return;
  const all = r.ok.flatMap((l) => l.mse).filter((v) => v > 0);
  const lo = Math.log10(Math.min(...all)), hi = Math.log10(Math.max(...all));
  const px = (b) => 30 + ((b - 2) / 6) * (c.width - 110);
  const py = (v) => 10 + (1 - (Math.log10(v) - lo) / (hi - lo)) * (c.height - 30);
  const colors = ["#c33", "#36c", "#393", "#c90", "#939", "#399"];
  ctx.font = "11px sans-serif";
  for (let b = 2; b <= 8; b++) { ctx.fillStyle = "#666"; ctx.fillText(b, px(b) - 3, c.height - 4); }
  r.ok.forEach((l, k) => {
    ctx.strokeStyle = ctx.fillStyle = colors[k % colors.length];
    ctx.beginPath();
    l.mse.forEach((v, i) => (i ? ctx.lineTo : ctx.moveTo).call(ctx, px(i + 2), py(v)));
    ctx.stroke();
    ctx.fillText(l.layer_id, c.width - 70, 14 + 13 * k);
  });
  ctx.fillStyle = "#666";
  ctx.fillText("weight mse (log) vs bits", 30, 12);
}

const C = 4, N = 6;
const start = [
  [1, 2, 1, 3, 1, 2],
  [2, 4, 2, 1, 0, 2],
  [0, 1, 5, 1, 0, 1],
  [3, 3, 3, 3, 3, 3],
];

function buildGrid() {
  const rows = start.map((row, i) =>
    `<tr>${row.map((v, j) => `<td><input type="number" step="0.5" id="g${i}_${j}" value="${v}"></td>`).join("")}</tr>`).join("");
  $("grid").innerHTML = `<table>${rows}</table>`;
  $("grid").addEventListener("input", renderSep);
}

function renderSep() {
  const vals = [];
  for (let i = 0; i < C; i++) for (let j = 0; j < N; j++) vals.push(+$(`g${i}_${j}`).value);
  const r = call(separability, new Float64Array(vals), C, N);
  if (r.err) { $("sep").innerHTML = `<p class="err">${r.err}</p>`; return; }
  for (let i = 0; i < C; i++)
    for (let j = 0; j < N; j++) $(`g${i}_${j}`).parentElement.className = r.ok.words[i][j] ? "word" : "";
  $("sep").innerHTML = `<p>alpha ${fmt(r.ok.alpha, 6)}, ${r.ok.word_count} words. idf per feature: ${r.ok.idf.map((v) => fmt(v, 3)).join(", ")}</p>`;
}

await init();
const fl = call(fixture_layers);
if (fl.err) $("alloc").innerHTML = `<p class="err">${fl.err}</p>`;
else layers = fl.ok;
for (const id of ["beta", "frac", "kind", "bmin", "bmax", "pin"]) $(id).addEventListener("input", renderAlloc);
$("qbits").addEventListener("input", renderStair);
buildGrid();
renderAlloc();
renderStair();
renderMse();
renderSep();
