import init, { viewCase, compareScores, trainHead, resetHead } from "./pkg/segwithu_demo.js";

const CLASS_COLORS = [[30, 30, 30], [220, 90, 60], [60, 140, 220], [90, 190, 90], [200, 180, 60]];
const LINE_COLORS = ["#d0602a", "#2a70d0", "#444", "#999"];

const $ = (id) => document.getElementById(id);
const params = () => [Number($("seed").value), Number($("index").value), Number($("noise").value)];

function status(text) {
  $("status").textContent = text;
}

function paint(canvas, width, height, color) {
  canvas.width = width;
  canvas.height = height;
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(width, height);
  for (let i = 0; i < width * height; i++) {
    const [r, g, b] = color(i);
    img.data.set([r, g, b, 255], 4 * i);
  }
  ctx.putImageData(img, 0, 0);
}

function heat(values) {
  const lo = Math.min(...values);
  const hi = Math.max(...values);
  const span = hi > lo ? hi - lo : 1;
  return (i) => {
    const t = (values[i] - lo) / span;
    return [255 * t, 255 * t * t, 255 * (1 - t) * 0.6];
  };
}

function plot(canvas, series, yLabel) {
  const ctx = canvas.getContext("2d");
  const { width, height } = canvas;
  const pad = 32;
  ctx.clearRect(0, 0, width, height);
  const xs = series.flatMap((s) => s.x);
  const ys = series.flatMap((s) => s.y);
  const [x0, x1] = [Math.min(...xs), Math.max(...xs)];
  const [y0, y1] = [Math.min(0, ...ys), Math.max(...ys) || 1];
  const px = (x) => pad + ((x - x0) / (x1 - x0 || 1)) * (width - 2 * pad);
  const py = (y) => height - pad - ((y - y0) / (y1 - y0 || 1)) * (height - 2 * pad);
  ctx.strokeStyle = "#bbb";
  ctx.strokeRect(pad, pad, width - 2 * pad, height - 2 * pad);
  ctx.fillStyle = "#555";
  ctx.font = "11px sans-serif";
  ctx.fillText(y1.toPrecision(3), 2, pad + 4);
  ctx.fillText(y0.toPrecision(3), 2, height - pad);
  ctx.fillText(yLabel, pad, pad - 8);
  series.forEach((s, k) => {
    ctx.strokeStyle = s.color;
    ctx.beginPath();
    s.x.forEach((x, i) => (i ? ctx.lineTo(px(x), py(s.y[i])) : ctx.moveTo(px(x), py(s.y[i]))));
    ctx.stroke();
    ctx.fillStyle = s.color;
    ctx.fillText(s.name, width - pad - 150, pad + 14 + 13 * k);
  });
}

function showCase() {
  const c = JSON.parse(viewCase(...params()));
  const cls = (field) => (i) => CLASS_COLORS[field[i] % CLASS_COLORS.length];
  paint($("labels"), c.width, c.height, cls(c.labels));
  paint($("prediction"), c.width, c.height, cls(c.prediction));
  paint($("errors"), c.width, c.height, (i) => (c.errors[i] ? [230, 40, 40] : [245, 245, 245]));
  $("errors-caption").textContent = `errors (${(100 * c.error_rate).toFixed(1)}%)`;
  return c;
}

function showScores() {
  const c = showCase();
  const r = JSON.parse(compareScores(...params()));
  r.methods.forEach((m, k) => {
    paint($(`score-${k}`), c.width, c.height, heat(m.score));
    $(`score-${k}-caption`).textContent = m.name;
  });
  const series = r.methods.map((m, k) => ({ name: m.name, x: m.curve.coverage, y: m.curve.risk, color: LINE_COLORS[k] }));
  series.push({ name: "oracle", x: r.oracle.coverage, y: r.oracle.risk, color: LINE_COLORS[2] });
  plot($("curves"), series, "risk");
  const fmt = (v, d) => (v === null ? "n/a" : v.toFixed(d));
  $("metrics").innerHTML =
    "<tr><th>score</th><th>AUROC</th><th>AURC</th></tr>" +
    r.methods.map((m) => `<tr><td>${m.name}</td><td>${fmt(m.auroc, 4)}</td><td>${fmt(m.aurc, 5)}</td></tr>`).join("") +
    `<tr><td>oracle</td><td></td><td>${fmt(r.oracle_aurc, 5)}</td></tr>` +
    `<tr><td>random</td><td></td><td>${fmt(r.random_aurc, 5)}</td></tr>`;
}

function train() {
  status("training...");
  // Let the status paint before the synchronous run.
  setTimeout(() => {
    try {
      const t = JSON.parse(trainHead(Number($("seed").value), Number($("epochs").value)));
      plot($("history"), [{ name: "validation AURC", x: t.epochs, y: t.val_aurc, color: LINE_COLORS[1] }], "AURC");
      $("train-info").textContent = `best epoch ${t.best_epoch} of ${t.epochs.length - 1}`;
      status("");
      showScores();
    } catch (e) {
      status(String(e));
    }
  }, 20);
}

function guarded(f) {
  return () => {
    try {
      status("");
      f();
    } catch (e) {
      status(String(e));
    }
  };
}

await init();
$("noise").addEventListener("input", () => ($("noise-value").textContent = $("noise").value));
$("view").addEventListener("click", guarded(showCase));
$("score").addEventListener("click", guarded(showScores));
$("train").addEventListener("click", train);
$("reset").addEventListener("click", guarded(() => {
  resetHead();
  $("train-info").textContent = "";
  showScores();
}));
guarded(showScores)();
