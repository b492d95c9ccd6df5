import init, { weight_profile, flow_slice, render_blob } from "./pkg/ub4d_demo.js";

const $ = (id) => document.getElementById(id);

function bind(ids, draw) {
  const update = () => {
    for (const id of ids) $(id + "-val").textContent = $(id).value;
    try {
      draw();
      $("error").textContent = "";
    } catch (e) {
      $("error").textContent = String(e);
    }
  };
  for (const id of ids) $(id).addEventListener("input", update);
  update();
}

function drawWeights() {
  const s = Math.pow(10, Number($("s").value));
  const n = Number($("n").value);
  $("s-val").textContent = s.toFixed(1);
  const v = weight_profile(s, n, 0.5);
  const tStar = v[0];
  const rows = [];
  for (let i = 1; i < v.length; i += 3) rows.push([v[i], v[i + 1], v[i + 2]]);
  const c = $("weights"), g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const t0 = rows[0][0], t1 = rows[rows.length - 1][0];
  const peak = Math.max(...rows.map((r) => Math.max(r[1], r[2])), 1e-12);
  const x = (t) => 20 + ((t - t0) / (t1 - t0)) * (c.width - 40);
  const y = (w) => c.height - 20 - (w / peak) * (c.height - 40);
  g.strokeStyle = "#fff";
  g.beginPath(); g.moveTo(x(tStar), 10); g.lineTo(x(tStar), c.height - 10); g.stroke();
  for (const [k, color] of [[2, "#5aa9ff"], [1, "#ffa04a"]]) {
    g.strokeStyle = color;
    g.lineWidth = 2;
    g.beginPath();
    rows.forEach((r, i) => (i ? g.lineTo(x(r[0]), y(r[k])) : g.moveTo(x(r[0]), y(r[k]))));
    g.stroke();
  }
}

function drawFlow() {
  const v = flow_slice(Number($("verts").value), Number($("angle").value), 700, Number($("l2").value), 21, 7n);
  const c = $("flow"), g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const px = (u) => ((u + 1) / 2) * c.width;
  const py = (u) => c.height - ((u + 1) / 2) * c.height;
  const nv = v[0];
  let i = 1;
  for (let k = 0; k < nv; k++, i += 4) {
    g.fillStyle = "#ffa04a";
    g.beginPath(); g.arc(px(v[i]), py(v[i + 1]), 4, 0, 2 * Math.PI); g.fill();
    g.fillStyle = "#7fdc8a";
    g.beginPath(); g.arc(px(v[i + 2]), py(v[i + 3]), 3, 0, 2 * Math.PI); g.fill();
  }
  g.strokeStyle = "#cfd6ff";
  for (; i < v.length; i += 4) {
    const [x0, y0, mx, my] = [v[i], v[i + 1], v[i + 2], v[i + 3]];
    if (Math.hypot(mx, my) < 1e-4) continue;
    g.beginPath(); g.moveTo(px(x0), py(y0)); g.lineTo(px(x0 + mx), py(y0 + my)); g.stroke();
  }
}

function drawBlob() {
  const c = $("blob");
  const rgba = render_blob(Number($("tau").value), Number($("az").value), c.width);
  c.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(rgba), c.width, c.height), 0, 0);
}

await init();
bind(["s", "n"], drawWeights);
bind(["angle", "verts", "l2"], drawFlow);
bind(["tau", "az"], drawBlob);
