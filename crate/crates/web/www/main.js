import init, { Demo } from "./pkg/plod_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
let demo = null;

// blue for negative, red for positive, white at zero
function diverging(t) {
  const s = Math.min(1, Math.abs(t));
  const fade = Math.round(255 * (1 - s));
  return t >= 0 ? [255, fade, fade] : [fade, fade, 255];
}

function paint(canvas, values, n, color) {
  canvas.width = n;
  canvas.height = n;
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(n, n);
  for (let j = 0; j < n; j++) {
    for (let i = 0; i < n; i++) {
      const [r, g, b] = color(values[j * n + i]);
      const k = 4 * ((n - 1 - j) * n + i);
      img.data.set([r, g, b, 255], k);
    }
  }
  ctx.putImageData(img, 0, 0);
}

function paintSigned(canvas, values) {
  const n = Math.round(Math.sqrt(values.length));
  const m = values.reduce((a, v) => Math.max(a, Math.abs(v)), 0) || 1;
  paint(canvas, values, n, (v) => diverging(v / m));
}

function plotEnergy(canvas, e) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (e.length < 2) return;
  const lo = Math.min(...e), hi = Math.max(...e);
  const span = hi - lo || Math.abs(hi) || 1;
  ctx.beginPath();
  e.forEach((v, k) => {
    const x = (k / (e.length - 1)) * (canvas.width - 10) + 5;
    const y = canvas.height - 5 - ((v - lo) / span) * (canvas.height - 10);
    k === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
  });
  ctx.stroke();
  ctx.fillText(`${lo.toExponential(3)} … ${hi.toExponential(3)}`, 8, 12);
}

function guard(f) {
  return () => {
    $("status").textContent = "";
    try {
      f();
    } catch (err) {
      $("status").textContent = String(err.message ?? err);
    }
  };
}

const make = guard(() => {
  demo?.free();
  demo = new Demo(num("seed"), num("eps"), num("fine"), num("lo"), num("hi"));
  const a = demo.coefficient();
  const lo = num("lo"), hi = num("hi");
  paint($("coef"), a, demo.cells(), (v) => {
    const g = Math.round(255 * (1 - (v - lo) / (hi - lo || 1)));
    return [g, g, g];
  });
});

const show = guard(() => {
  const f = demo.basis_function(num("coarse"), num("degree"), num("ell"), num("element"), num("mode"));
  paintSigned($("basis"), f);
});

const runWave = guard(() => {
  const sim = demo.simulate(num("coarse"), num("degree"), num("ell"), num("theta"), num("tau"), num("steps"));
  const bound = sim.tau_bound();
  $("cfl").textContent = Number.isFinite(bound) ? `largest stable τ ≈ ${bound.toExponential(3)}` : "unconditionally stable";
  if (sim.status() !== "ok") $("status").textContent = sim.status();
  paintSigned($("snapshot"), sim.snapshot());
  plotEnergy($("energy"), sim.energies());
  sim.free();
});

await init();
$("make").onclick = make;
$("show").onclick = show;
$("run").onclick = runWave;
make();
show();
