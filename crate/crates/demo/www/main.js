// Expects `wasm-pack build --target web --out-dir www/pkg` to have been run.
import init, { diffuse, residuals, compare } from "./pkg/smoothgnn_demo.js";

const COLORS = ["#1f77b4", "#d62728"];

function mix(p) {
  const a = [31, 119, 180], b = [214, 39, 40];
  const c = a.map((v, i) => Math.round(v * p[0] / (p[0] + p[1] || 1) + b[i] * p[1] / (p[0] + p[1] || 1)));
  return `rgb(${c.join(",")})`;
}

function layout(n) {
  // Cliques on circles at the ends, path nodes on a line between them.
  const clique = (n - 4) / 2, pts = [];
  for (let i = 0; i < n; i++) {
    if (i < clique || i >= n - clique) {
      const left = i < clique, k = left ? i : i - (n - clique);
      const cx = left ? 110 : 610, ang = 2 * Math.PI * k / clique + (left ? 0 : Math.PI);
      pts.push([cx + 70 * Math.cos(ang), 110 + 70 * Math.sin(ang)]);
    } else {
      pts.push([180 + (i - clique + 1) * 72, 110]);
    }
  }
  return pts;
}

function drawGraph(view) {
  const ctx = document.getElementById("graph").getContext("2d");
  ctx.clearRect(0, 0, 720, 220);
  const pts = layout(view.scores.length);
  ctx.strokeStyle = "#aaa";
  for (const [u, v] of view.edges) {
    ctx.beginPath(); ctx.moveTo(...pts[u]); ctx.lineTo(...pts[v]); ctx.stroke();
  }
  view.scores.forEach((s, i) => {
    ctx.beginPath(); ctx.arc(...pts[i], 13, 0, 2 * Math.PI);
    ctx.fillStyle = mix(s); ctx.fill();
    ctx.lineWidth = view.seeds.includes(i) ? 4 : 1;
    ctx.strokeStyle = COLORS[view.predictions[i]]; ctx.stroke();
    ctx.lineWidth = 1; ctx.strokeStyle = "#aaa";
  });
}

function drawResiduals(view) {
  const ctx = document.getElementById("residuals").getContext("2d");
  ctx.clearRect(0, 0, 720, 220);
  const r = view.residuals.filter((x) => x > 0).map(Math.log10);
  if (r.length === 0) return;
  const hi = Math.max(...r), lo = Math.min(...r, -9);
  ctx.strokeStyle = "#1f77b4"; ctx.beginPath();
  r.forEach((y, i) => {
    const px = 10 + 700 * i / Math.max(r.length - 1, 1), py = 10 + 200 * (hi - y) / (hi - lo || 1);
    i === 0 ? ctx.moveTo(px, py) : ctx.lineTo(px, py);
  });
  ctx.stroke();
  document.getElementById("residual-summary").textContent =
    `${view.iterations} iterations, converged: ${view.converged}, final residual ${view.residuals.at(-1)?.toExponential(2)}`;
}

function refresh() {
  const g = parseFloat(document.getElementById("gamma").value);
  document.getElementById("gamma-value").textContent = g.toFixed(2);
  drawGraph(JSON.parse(diffuse(g)));
  drawResiduals(JSON.parse(residuals(g)));
}

function train() {
  const out = document.getElementById("comparison");
  try {
    const v = JSON.parse(compare(
      parseFloat(document.getElementById("mu").value),
      parseInt(document.getElementById("layers").value, 10),
      parseInt(document.getElementById("seed").value, 10)));
    out.textContent =
      `MLP   test accuracy ${(100 * v.mlp_test_acc).toFixed(1)}%  (best epoch ${v.mlp_best_epoch})\n` +
      `R-MLP test accuracy ${(100 * v.rmlp_test_acc).toFixed(1)}%  (best epoch ${v.rmlp_best_epoch}, μ = ${v.mu})`;
  } catch (e) {
    out.textContent = `error: ${e}`;
  }
}

await init();
document.getElementById("gamma").addEventListener("input", refresh);
document.getElementById("train").addEventListener("click", train);
refresh();
