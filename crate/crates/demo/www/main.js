import init, { Scene } from "./pkg/mvdesc_demo.js";

const $ = (id) => document.getElementById(id);

function draw(canvas, bytes) {
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(canvas.width, canvas.height);
  for (let i = 0; i < bytes.length; i++) {
    img.data[4 * i] = img.data[4 * i + 1] = img.data[4 * i + 2] = bytes[i];
    img.data[4 * i + 3] = 255;
  }
  ctx.putImageData(img, 0, 0);
}

function target() {
  return [+$("theta").value, +$("phi").value, +$("rho").value];
}

let scene;
let fitTimer = null;

function refresh() {
  const [t, p, r] = target();
  $("theta_v").textContent = t.toFixed(2);
  $("phi_v").textContent = p.toFixed(2);
  $("rho_v").textContent = r.toFixed(2);
  draw($("hard"), scene.render(t, p, r, false));
  draw($("soft"), scene.render(t, p, r, true));
  draw($("rots"), scene.rotations(t, p, r));
}

function startFit() {
  stopFit();
  const goal = target();
  let v = [goal[0] + 0.35, Math.max(0.05, goal[1] - 0.25), Math.min(1, goal[2] + 0.15)];
  const lr = [2e-4, 2e-4, 1e-4];
  let step = 0;
  fitTimer = setInterval(() => {
    const [loss, ...g] = scene.fit_step(Float64Array.from(v), Float64Array.from(goal));
    // Normalized step so the animation moves at a steady pace.
    const n = Math.hypot(...g) || 1;
    v = v.map((x, i) => x - (lr[i] * 100 * g[i]) / Math.sqrt(n));
    v[1] = Math.min(Math.max(v[1], 0), Math.PI / 2);
    v[2] = Math.min(Math.max(v[2], 0.3), 1);
    draw($("fitview"), scene.render(v[0], v[1], v[2], false));
    $("fit_v").textContent =
      `step ${++step} loss ${loss.toFixed(2)} theta ${v[0].toFixed(3)} phi ${v[1].toFixed(3)} rho ${v[2].toFixed(3)}`;
    if (step >= 400) stopFit();
  }, 30);
}

function stopFit() {
  if (fitTimer !== null) clearInterval(fitTimer);
  fitTimer = null;
}

async function main() {
  await init();
  scene = new Scene(1, 4000);
  $("kp").max = scene.point_count() - 1;
  $("status").textContent = `${scene.point_count()} points`;
  $("status").style.color = "";
  for (const id of ["theta", "phi", "rho"]) $(id).addEventListener("input", refresh);
  $("kp").addEventListener("change", () => {
    scene.set_keypoint(+$("kp").value);
    refresh();
  });
  $("randkp").addEventListener("click", () => {
    $("kp").value = Math.floor(Math.random() * scene.point_count());
    scene.set_keypoint(+$("kp").value);
    refresh();
  });
  $("fit").addEventListener("click", startFit);
  $("stop").addEventListener("click", stopFit);
  refresh();
}

main().catch((e) => {
  $("status").textContent = String(e);
});
