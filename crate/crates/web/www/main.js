import init, { floorplan, utilization, tournament, models } from "./pkg/fbsim_web.js";

const COLORS = { Conv: "#6fa8dc", FC: "#8e7cc3", Max: "#f6b26b", ReLU: "#93c47d", Res: "#e06666", Softmax: "#c27ba0" };
const $ = (id) => document.getElementById(id);

function fail(el, e) {
  el.innerHTML = "";
  const p = document.createElement("p");
  p.className = "error";
  p.textContent = String(e.message ?? e);
  el.appendChild(p);
}

function drawArray(ima, side) {
  const px = 160;
  const scale = px / side;
  const wrap = document.createElement("div");
  wrap.style.display = "inline-block";
  const c = document.createElement("canvas");
  c.width = c.height = px;
  const g = c.getContext("2d");
  g.fillStyle = "#f4f4f4";
  g.fillRect(0, 0, px, px);
  for (const fb of ima.fbs) {
    const [r, col] = fb.origin;
    const [h, w] = fb.extent;
    g.fillStyle = COLORS[fb.op] ?? "#999";
    g.fillRect(col * scale, r * scale, Math.max(1, w * scale), Math.max(1, h * scale));
    g.strokeStyle = "#333";
    g.strokeRect(col * scale, r * scale, Math.max(1, w * scale), Math.max(1, h * scale));
  }
  c.title = ima.fbs.map((f) => `FB${f.fb_id} ${f.op} L${f.layer} ${f.extent[0]}x${f.extent[1]} @(${f.origin})`).join("\n");
  const cap = document.createElement("div");
  cap.textContent = `array ${ima.ima} · group ${ima.group} · ${(100 * ima.spatial).toFixed(1)}%`;
  wrap.append(c, cap);
  return wrap;
}

function runFloorplan() {
  const out = $("fp-out");
  try {
    const side = Number($("fp-side").value);
    const plan = JSON.parse(floorplan($("fp-model").value, side, $("fp-canonical").checked));
    out.innerHTML = "";
    const info = document.createElement("p");
    info.textContent = `${plan.imas.length} arrays; hover an array for its blocks.`;
    out.appendChild(info);
    for (const ima of plan.imas.slice(0, Number($("fp-limit").value))) out.appendChild(drawArray(ima, side));
  } catch (e) {
    fail(out, e);
  }
}

function table(head, rows) {
  const t = document.createElement("table");
  const tr = t.insertRow();
  for (const h of head) {
    const th = document.createElement("th");
    th.textContent = h;
    tr.appendChild(th);
  }
  for (const row of rows) {
    const r = t.insertRow();
    for (const v of row) r.insertCell().textContent = v;
  }
  return t;
}

function runSweep() {
  const out = $("ut-out");
  out.textContent = "running…";
  // Let the message paint before the synchronous run.
  setTimeout(() => {
    try {
      const u = JSON.parse(utilization($("ut-model").value));
      const pct = (x) => (x == null ? "infeasible" : (100 * x).toFixed(1) + "%");
      out.innerHTML = "";
      out.appendChild(table(["array", "static", "reconfigurable"], u.sweep.map((s) => [s.array, pct(s.static), pct(s.reconfig)])));
      out.appendChild(
        table(
          ["run", "cycles", "spatial", "temporal", "spatial σ"],
          u.runs.map((r) => [r.name, r.cycles, pct(r.mean_spatial), pct(r.mean_temporal), r.spatial_stddev.toFixed(3)]),
        ),
      );
      const p = document.createElement("p");
      p.textContent = `speedup over static-512: ${u.speedup_vs_static_512.toFixed(2)}×`;
      out.appendChild(p);
    } catch (e) {
      fail(out, e);
    }
  }, 10);
}

let game = null;

function showLevels() {
  const out = $("tn-out");
  out.innerHTML = "";
  const head = document.createElement("p");
  head.textContent = `tile ${game.t.tile[0]}×${game.t.tile[1]} cells · ${game.t.matches} matches × ${game.t.cycles_per_match} cycles = ${game.t.cycles} cycles`;
  out.appendChild(head);
  for (const lv of game.t.levels.slice(0, game.shown + 1)) {
    const div = document.createElement("div");
    div.className = "level";
    div.textContent = lv.level === 0 ? "leaves: " : `level ${lv.level}: `;
    for (const s of lv.slots) {
      const span = document.createElement("span");
      span.textContent = s.value;
      if (Array.isArray(s.from)) span.title = `winner of slots ${s.from[0]} and ${s.from[1]}`;
      else if (s.from !== "leaf") span.title = `bye from slot ${s.from}`;
      if (lv.level === game.t.levels.length - 1) span.className = "win";
      div.appendChild(span);
    }
    out.appendChild(div);
  }
  $("tn-step").disabled = game.shown >= game.t.levels.length - 1;
}

function runTournament() {
  try {
    const codes = $("tn-codes").value.split(/[\s,]+/).filter(Boolean).map(Number);
    if (codes.some((c) => !Number.isInteger(c) || c < 0)) throw new Error("values must be non-negative integers");
    game = { t: JSON.parse(tournament(Uint32Array.from(codes), Number($("tn-bits").value))), shown: 0 };
    showLevels();
  } catch (e) {
    $("tn-step").disabled = true;
    fail($("tn-out"), e);
  }
}

await init();
for (const id of ["fp-model", "ut-model"]) {
  for (const name of JSON.parse(models())) $(id).add(new Option(name, name, false, name === "toy-conv-relu-max"));
}
$("legend").innerHTML = Object.entries(COLORS)
  .map(([k, v]) => `<span style="background:${v}">${k}</span>`)
  .join("");
$("fp-run").onclick = runFloorplan;
$("ut-run").onclick = runSweep;
$("tn-run").onclick = runTournament;
$("tn-step").onclick = () => {
  game.shown += 1;
  showLevels();
};
runFloorplan();
