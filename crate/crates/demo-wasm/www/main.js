import init, { warp_outline, compare_outlines, calibrate } from "./pkg/annoreg_demo.js";

const $ = (id) => document.getElementById(id);
const W = 480, H = 360;

let points = [];
let closed = false;
let warped = null;

function preset() {
  points = [];
  for (let k = 0; k < 24; k++) {
    const t = (2 * Math.PI * k) / 24;
    const r = 110 * (1 + 0.15 * Math.cos(3 * t) + 0.08 * Math.sin(5 * t));
    points.push(240 + r * Math.cos(t), 180 + 0.8 * r * Math.sin(t));
  }
  closed = true;
}

function path(ctx, xy, close) {
  ctx.beginPath();
  for (let i = 0; i < xy.length; i += 2) {
    if (i === 0) ctx.moveTo(xy[0], xy[1]);
    else ctx.lineTo(xy[i], xy[i + 1]);
  }
  if (close) ctx.closePath();
}

function drawWarp() {
  const ctx = $("draw").getContext("2d");
  ctx.clearRect(0, 0, W, H);
  if (warped) {
    const a = warped.arrows;
    const gain = 3;
    ctx.strokeStyle = "#999";
    for (let i = 0; i < a.length; i += 4) {
      ctx.beginPath();
      ctx.moveTo(a[i], a[i + 1]);
      ctx.lineTo(a[i] + gain * a[i + 2], a[i + 1] + gain * a[i + 3]);
      ctx.stroke();
    }
  }
  ctx.lineWidth = 2;
  ctx.strokeStyle = "#d00";
  path(ctx, points, closed);
  ctx.stroke();
  for (let i = 0; i < points.length; i += 2) ctx.fillRect(points[i] - 2, points[i + 1] - 2, 4, 4);
  if (warped) {
    ctx.strokeStyle = "#00d";
    path(ctx, warped.outline, true);
    ctx.stroke();
  }
  ctx.lineWidth = 1;
}

function drawOverlay() {
  const canvas = $("overlay");
  const ctx = canvas.getContext("2d");
  ctx.fillStyle = "#fff";
  ctx.fillRect(0, 0, W, H);
  $("dice").textContent = $("jaccard").textContent = "–";
  if (!warped) return;
  const res = Number($("res").value);
  const r = compare_outlines(new Float64Array(points), warped.outline, W, H, res);
  const img = new ImageData(new Uint8ClampedArray(r.rgba), r.width, r.height);
  const tmp = new OffscreenCanvas(r.width, r.height);
  tmp.getContext("2d").putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(tmp, 0, 0, r.width * res, r.height * res);
  $("dice").textContent = r.dice.toFixed(4);
  $("jaccard").textContent = r.jaccard.toFixed(4);
  r.free();
}

function updateWarp() {
  $("amp-out").textContent = $("amp").value;
  $("res-out").textContent = $("res").value;
  if (warped) warped.free();
  warped = null;
  if (closed && points.length >= 6) {
    warped = warp_outline(new Float64Array(points), W, H, Number($("amp").value), Number($("seed").value) >>> 0);
    $("field-max").textContent = warped.max_displacement_um.toFixed(2);
  } else {
    $("field-max").textContent = "–";
  }
  drawWarp();
  drawOverlay();
}

function updateRoc() {
  for (const id of ["sigma", "prev", "tiles"]) $(`${id}-out`).textContent = $(id).value;
  const c = calibrate(Number($("tiles").value), Number($("prev").value), Number($("sigma").value), Number($("score-seed").value) >>> 0);
  const ctx = $("roc").getContext("2d");
  const S = 360, m = 30, span = S - 2 * m;
  const px = (f) => m + f * span, py = (t) => S - m - t * span;
  ctx.clearRect(0, 0, S, S);
  ctx.strokeStyle = "#bbb";
  ctx.strokeRect(m, m, span, span);
  ctx.beginPath();
  ctx.moveTo(px(0), py(0));
  ctx.lineTo(px(1), py(1));
  ctx.stroke();
  const roc = c.roc;
  ctx.strokeStyle = "#00d";
  ctx.lineWidth = 2;
  ctx.beginPath();
  for (let i = 0; i < roc.length; i += 2) {
    if (i === 0) ctx.moveTo(px(roc[0]), py(roc[1]));
    else ctx.lineTo(px(roc[i]), py(roc[i + 1]));
  }
  ctx.stroke();
  ctx.lineWidth = 1;
  ctx.fillStyle = "#d00";
  ctx.beginPath();
  ctx.arc(px(1 - c.specificity), py(c.sensitivity), 5, 0, 2 * Math.PI);
  ctx.fill();
  ctx.fillStyle = "#222";
  ctx.fillText("false positive rate", S / 2 - 40, S - 8);
  ctx.save();
  ctx.translate(12, S / 2 + 40);
  ctx.rotate(-Math.PI / 2);
  ctx.fillText("true positive rate", 0, 0);
  ctx.restore();
  $("auroc").textContent = c.auroc.toFixed(4);
  $("thr").textContent = c.threshold.toFixed(4);
  $("j").textContent = c.j.toFixed(4);
  $("sens").textContent = c.sensitivity.toFixed(4);
  $("spec").textContent = c.specificity.toFixed(4);
  c.free();
}

await init();

$("draw").addEventListener("click", (e) => {
  if (closed) { points = []; closed = false; }
  const rect = e.target.getBoundingClientRect();
  points.push(e.clientX - rect.left, e.clientY - rect.top);
  updateWarp();
});
$("close").addEventListener("click", () => { if (points.length >= 6) { closed = true; updateWarp(); } });
$("clear").addEventListener("click", () => { points = []; closed = false; updateWarp(); });
$("preset").addEventListener("click", () => { preset(); updateWarp(); });
for (const id of ["amp", "seed", "res"]) $(id).addEventListener("input", updateWarp);
for (const id of ["sigma", "prev", "tiles", "score-seed"]) $(id).addEventListener("input", updateRoc);

preset();
updateWarp();
updateRoc();
