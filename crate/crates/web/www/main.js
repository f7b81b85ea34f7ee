import init, { render_rain, compose, align } from "./pkg/derain_web.js";

const SIZE = 96;

function paint(canvas, bytes) {
  canvas.width = SIZE;
  canvas.height = SIZE;
  const img = new ImageData(new Uint8ClampedArray(bytes), SIZE, SIZE);
  canvas.getContext("2d").putImageData(img, 0, 0);
}

function values(section) {
  const v = {};
  for (const input of section.querySelectorAll("input")) v[input.name] = Number(input.value);
  return v;
}

function out(section, name) {
  return section.querySelector(`canvas[data-out="${name}"]`);
}

function wire(id, run) {
  const section = document.getElementById(id);
  const update = () => {
    try {
      run(section, values(section));
    } catch (e) {
      console.error(e);
    }
  };
  section.addEventListener("input", update);
  update();
}

await init();

wire("rain", (s, v) => {
  const pair = render_rain(SIZE, v.seed, v.count, v.angle, v.length, v.opacity / 100);
  paint(out(s, "clean"), pair.clean());
  paint(out(s, "rainy"), pair.rainy());
  paint(out(s, "rain"), pair.rain());
  pair.free();
});

wire("compose", (s, v) => {
  paint(out(s, "composed"), compose(SIZE, 1, v.lam / 100, v.short, v.long, v.weight / 100));
});

wire("align", (s, v) => {
  const a = align(SIZE, 1, v.dx / 10, v.dy / 10, v.levels, v.iterations);
  paint(out(s, "shifted"), a.shifted());
  paint(out(s, "warped"), a.warped());
  document.getElementById("align-stats").textContent =
    `estimated shift (${a.mean_u().toFixed(2)}, ${a.mean_v().toFixed(2)}) px; ` +
    `PSNR ${a.psnr_before().toFixed(2)} dB before, ${a.psnr_after().toFixed(2)} dB after warping`;
  a.free();
});
