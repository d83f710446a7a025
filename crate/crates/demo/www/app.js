import init, { exploreBits, Lab } from "./pkg/signlesion_demo.js";

const $ = (id) => document.getElementById(id);
let lab;

function renderBits(pos) {
  const v = parseFloat($("value").value);
  const r = JSON.parse(exploreBits(v, pos));
  const bits = r.before.bits;
  $("bits").innerHTML = [...bits].map((b, i) => {
    const p = 31 - i;
    const cls = (p === 31 ? "s" : p >= 23 ? "e" : "") + (p === pos ? " hit" : "");
    return `<span class="${cls}" data-pos="${p}">${b}</span>`;
  }).join("");
  const line = (w) => `${w.hex}  sign=${w.sign} exp=${w.exponent} mant=${w.mantissa}  ${w.value}`;
  $("fields").textContent = `before ${line(r.before)}\nafter  ${line(r.after)}`;
}

$("bits").addEventListener("click", (e) => {
  if (e.target.dataset.pos) renderBits(Number(e.target.dataset.pos));
});
$("value").addEventListener("input", () => renderBits(31));

function plot(dnl, random) {
  const c = $("plot"), g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const pad = 30, w = c.width - 2 * pad, h = c.height - 2 * pad;
  g.strokeStyle = "#999";
  g.strokeRect(pad, pad, w, h);
  g.fillText("AR 1", 2, pad + 4);
  g.fillText("0", 10, pad + h);
  const line = (ys, color) => {
    g.strokeStyle = color;
    g.beginPath();
    ys.forEach((y, i) => {
      const x = pad + (ys.length === 1 ? w / 2 : (i * w) / (ys.length - 1));
      const yy = pad + h - Math.max(0, Math.min(1, y)) * h;
      i ? g.lineTo(x, yy) : g.moveTo(x, yy);
    });
    g.stroke();
  };
  line(random, "#888");
  line(dnl, "#c00");
}

$("run").addEventListener("click", () => {
  const r = JSON.parse(lab.curve(+$("k").value, +$("layers").value, +$("runs").value));
  const last = r.dnl.length - 1;
  $("summary").textContent =
    `baseline acc ${r.baseline_acc.toFixed(3)}; AR after ${last + 1} flips: ` +
    `targeted ${r.dnl[last].toFixed(3)}, random ${r.random[last].toFixed(3)}`;
  plot(r.dnl, r.random);
});

function kernelTable(values, hit) {
  const side = Math.round(Math.sqrt(values.length));
  const cols = side * side === values.length ? side : values.length;
  let html = "<table class=k><tr>";
  values.forEach((v, i) => {
    if (i && i % cols === 0) html += "</tr><tr>";
    html += `<td class="${i === hit ? "hit" : ""}">${v.toFixed(3)}</td>`;
  });
  return html + "</tr></table>";
}

$("show").addEventListener("click", () => {
  const r = JSON.parse(lab.kernelView(+$("flip").value - 1, +$("layers").value));
  $("where").textContent = `${r.tensor}[${r.flat_index}], layer ${r.layer}, kernel ${r.kernel}`;
  $("kernels").innerHTML =
    "<h3>before</h3>" + kernelTable(r.before, r.position) +
    "<h3>after</h3>" + kernelTable(r.after, r.position);
});

await init();
renderBits(31);
$("status").textContent = "Training a small CNN in the browser…";
setTimeout(() => {
  lab = new Lab(7);
  const s = JSON.parse(lab.summary());
  $("status").textContent =
    `Model ready: ${s.weights} weights, test accuracy ${s.test_acc.toFixed(3)} on ${s.test_samples} samples.`;
}, 0);
